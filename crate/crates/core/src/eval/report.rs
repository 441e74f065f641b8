//! Report renderings: tab-separated cell records (round-trippable), the
//! average-accuracy and per-group-best tables, and per-curve plot data.
//!
//! Record file layout:
//!
//! ```text
//! # opdroid evaluation report v1
//! # version <tool version>
//! # groups Calendar,Camera,...
//! # kinds tree,forest,nb-tree
//! # n_list 20,40,...
//! # config <key>=<value>        (one line per setting)
//! group kind features status train test tp tn fp fn accuracy tp_rate tn_rate note
//! ```
//!
//! `status` is `ok` or `skipped`; missing values are `-`. Floats use the
//! shortest representation that parses back to the same value.

use std::collections::BTreeMap;
use std::fmt::Write;

use thiserror::Error;

use super::{CellKey, CellMetrics, CellOutcome, ConfusionCounts, EvaluationReport};
use crate::classify::ModelKind;
use crate::groups::GroupId;

pub const REPORT_HEADER: &str =
    "group\tkind\tfeatures\tstatus\ttrain\ttest\ttp\ttn\tfp\tfn\taccuracy\ttp_rate\ttn_rate\tnote";
const MAGIC: &str = "# opdroid evaluation report v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("report line {line}: {msg}")]
pub struct ReportFormatError {
    pub line: usize,
    pub msg: String,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "-".into())
}

fn fixed(v: Option<f64>, places: usize) -> String {
    v.map(|x| format!("{x:.places$}"))
        .unwrap_or_else(|| "-".into())
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl EvaluationReport {
    fn keys(&self) -> impl Iterator<Item = CellKey> + '_ {
        self.groups.iter().flat_map(move |&group| {
            self.kinds
                .iter()
                .flat_map(move |&kind| self.n_list.iter().map(move |&n| CellKey { group, kind, n }))
        })
    }

    fn preamble(&self, title: &str) -> String {
        let mut s = format!("# {title}\n# version {}\n", crate::VERSION);
        for (k, v) in &self.config {
            let _ = writeln!(s, "# config {k}={v}");
        }
        s
    }

    pub fn to_records(&self) -> String {
        let mut s = format!("{MAGIC}\n# version {}\n", crate::VERSION);
        let _ = writeln!(s, "# groups {}", join(self.groups.iter().map(|g| g.name())));
        let _ = writeln!(s, "# kinds {}", join(self.kinds.iter().map(|k| k.name())));
        let _ = writeln!(s, "# n_list {}", join(&self.n_list));
        for (k, v) in &self.config {
            let _ = writeln!(s, "# config {k}={v}");
        }
        s.push_str(REPORT_HEADER);
        s.push('\n');
        for key in self.keys() {
            let head = format!("{}\t{}\t{}", key.group.name(), key.kind.name(), key.n);
            let _ = match self.cells.get(&key) {
                Some(CellOutcome::Done(m)) => writeln!(
                    s,
                    "{head}\tok\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t-",
                    m.train_size,
                    m.counts.total(),
                    m.counts.tp,
                    m.counts.tn,
                    m.counts.fp,
                    m.counts.fn_,
                    m.accuracy,
                    opt(m.tp_rate),
                    opt(m.tn_rate),
                ),
                Some(CellOutcome::Skipped(reason)) => writeln!(
                    s,
                    "{head}\tskipped\t-\t-\t-\t-\t-\t-\t-\t-\t-\t{}",
                    reason.replace(['\t', '\n'], " ")
                ),
                None => writeln!(s, "{head}\tskipped\t-\t-\t-\t-\t-\t-\t-\t-\t-\tnot run"),
            };
        }
        s
    }

    pub fn parse_records(text: &str) -> Result<Self, ReportFormatError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let err = |line: usize, msg: &str| ReportFormatError {
            line,
            msg: msg.to_string(),
        };
        match lines.next() {
            Some((_, MAGIC)) => {}
            _ => return Err(err(1, "not an evaluation report")),
        }
        let mut report = EvaluationReport {
            config: Vec::new(),
            groups: Vec::new(),
            kinds: Vec::new(),
            n_list: Vec::new(),
            cells: BTreeMap::new(),
        };
        let mut seen_header = false;
        for (no, line) in lines {
            if let Some(meta) = line.strip_prefix("# ") {
                let (key, value) = meta.split_once(' ').unwrap_or((meta, ""));
                let list = || value.split(',').filter(|s| !s.is_empty());
                match key {
                    "version" => {}
                    "groups" => {
                        report.groups = list()
                            .map(|g| g.parse::<GroupId>().map_err(|e| err(no, &e.to_string())))
                            .collect::<Result<_, _>>()?
                    }
                    "kinds" => {
                        report.kinds = list()
                            .map(|k| k.parse::<ModelKind>().map_err(|e| err(no, &e)))
                            .collect::<Result<_, _>>()?
                    }
                    "n_list" => {
                        report.n_list = list()
                            .map(|n| n.parse().map_err(|_| err(no, "bad n_list")))
                            .collect::<Result<_, _>>()?
                    }
                    "config" => {
                        let (k, v) = value
                            .split_once('=')
                            .ok_or_else(|| err(no, "config needs key=value"))?;
                        report.config.push((k.to_string(), v.to_string()));
                    }
                    _ => return Err(err(no, "unknown header line")),
                }
                continue;
            }
            if line == REPORT_HEADER {
                seen_header = true;
                continue;
            }
            if !seen_header {
                return Err(err(no, "record before column header"));
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 14 {
                return Err(err(no, "expected 14 columns"));
            }
            let key = CellKey {
                group: f[0]
                    .parse()
                    .map_err(|e: crate::groups::GroupError| err(no, &e.to_string()))?,
                kind: f[1].parse().map_err(|e: String| err(no, &e))?,
                n: f[2].parse().map_err(|_| err(no, "bad feature count"))?,
            };
            let int = |s: &str| s.parse::<u64>().map_err(|_| err(no, "bad integer"));
            let float = |s: &str| s.parse::<f64>().map_err(|_| err(no, "bad number"));
            let ofloat = |s: &str| {
                if s == "-" {
                    Ok(None)
                } else {
                    float(s).map(Some)
                }
            };
            let outcome = match f[3] {
                "ok" => {
                    let counts = ConfusionCounts {
                        tp: int(f[6])?,
                        tn: int(f[7])?,
                        fp: int(f[8])?,
                        fn_: int(f[9])?,
                    };
                    if int(f[5])? != counts.total() {
                        return Err(err(no, "test size disagrees with counts"));
                    }
                    CellOutcome::Done(CellMetrics {
                        train_size: int(f[4])? as usize,
                        counts,
                        accuracy: float(f[10])?,
                        tp_rate: ofloat(f[11])?,
                        tn_rate: ofloat(f[12])?,
                    })
                }
                "skipped" => CellOutcome::Skipped(f[13].to_string()),
                _ => return Err(err(no, "status must be ok or skipped")),
            };
            if report.cells.insert(key, outcome).is_some() {
                return Err(err(no, "duplicate cell"));
            }
        }
        if !seen_header {
            return Err(err(0, "missing column header"));
        }
        Ok(report)
    }

    /// Average accuracy per feature count (rows) and classifier (columns),
    /// followed by column maxima and minima.
    pub fn average_table(&self) -> String {
        let mut s = self.preamble("average accuracy (%) over groups");
        let _ = write!(s, "{:<10}", "features");
        for k in &self.kinds {
            let _ = write!(s, "{:>9}", k.label());
        }
        s.push('\n');
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); self.kinds.len()];
        for &n in &self.n_list {
            let _ = write!(s, "{n:<10}");
            for (i, &kind) in self.kinds.iter().enumerate() {
                let avg = self.average_accuracy(kind, n);
                columns[i].extend(avg);
                let _ = write!(s, "{:>9}", fixed(avg, 2));
            }
            s.push('\n');
        }
        for (name, pick) in [
            ("Maximum", f64::max as fn(f64, f64) -> f64),
            ("Minimum", f64::min),
        ] {
            let _ = write!(s, "{name:<10}");
            for col in &columns {
                let v = col.iter().copied().reduce(pick);
                let _ = write!(s, "{:>9}", fixed(v, 2));
            }
            s.push('\n');
        }
        s
    }

    /// Best classifier per group with its accuracy, feature count and the
    /// benign and malicious detection rates.
    pub fn best_table(&self) -> String {
        let mut s = self.preamble("group-wise maximum accuracy");
        let _ = writeln!(
            s,
            "{:<12}{:>6}{:>10}{:>10}{:>6}{:>6}",
            "group", "best", "accuracy", "features", "TN", "TP"
        );
        for &g in &self.groups {
            match self.group_best(g) {
                Some(b) => {
                    let _ = writeln!(
                        s,
                        "{:<12}{:>6}{:>10.2}{:>10}{:>6}{:>6}",
                        g.name(),
                        b.key.kind.label(),
                        b.metrics.accuracy,
                        b.key.n,
                        fixed(b.metrics.tn_rate, 2),
                        fixed(b.metrics.tp_rate, 2)
                    );
                }
                None => {
                    let _ = writeln!(
                        s,
                        "{:<12}{:>6}{:>10}{:>10}{:>6}{:>6}",
                        g.name(),
                        "-",
                        "-",
                        "-",
                        "-",
                        "-"
                    );
                }
            }
        }
        let _ = writeln!(
            s,
            "{:<12}{:>16}",
            "average",
            fixed(self.overall_best_average(), 2)
        );

        let mut reasons: BTreeMap<(GroupId, &str), usize> = BTreeMap::new();
        for (key, reason) in self.skipped() {
            *reasons.entry((key.group, reason)).or_default() += 1;
        }
        if !reasons.is_empty() {
            s.push_str("\nskipped cells\n");
            for ((g, reason), count) in reasons {
                let _ = writeln!(s, "{:<12}{count:>4}  {reason}", g.name());
            }
        }
        s
    }

    /// `features<TAB>accuracy` for one group and classifier; skipped cells
    /// are left out.
    pub fn plot_data(&self, group: GroupId, kind: ModelKind) -> String {
        let mut s = self.preamble(&format!(
            "accuracy vs features: {} {}",
            group.name(),
            kind.label()
        ));
        s.push_str("features\taccuracy\n");
        for &n in &self.n_list {
            if let Some(m) = self.metrics(CellKey { group, kind, n }) {
                let _ = writeln!(s, "{n}\t{}", m.accuracy);
            }
        }
        s
    }
}
