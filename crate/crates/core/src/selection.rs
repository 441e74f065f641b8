//! Opcode ranking by class-mean occurrence difference.
//!
//! For each opcode `j` the benign and malicious class means are
//! `F_B(j) = Σ f_i(j) / N_B` and `F_M(j) = Σ f_i(j) / N_M`, and the score is
//! `D(j) = |F_B(j) − F_M(j)|`. Opcodes are ordered by descending `D`, ties
//! broken by ascending opcode value, and the first `n` become the features.
//!
//! `f_i(j)` is the raw count by default; [`FrequencyMode::Relative`] uses
//! `count / total` per app instead.
//!
//! Arithmetic is double precision. Raw-count sums are accumulated as integers
//! and are exact below 2^53. `D` is computed over the common denominator,
//! `|S_B·N_M − S_M·N_B| / (N_B·N_M)`, so two opcodes whose exact scores are
//! equal always get bit-identical floats and the tie-break applies cleanly.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::groups::GroupId;
use crate::histogram::{OpcodeHistogram, BUCKETS};
use crate::opcodes::Opcode;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub enum FrequencyMode {
    #[default]
    RawCount,
    Relative,
}

impl FrequencyMode {
    pub fn name(self) -> &'static str {
        match self {
            FrequencyMode::RawCount => "raw",
            FrequencyMode::Relative => "relative",
        }
    }

    /// Per-app value of one bucket under this mode.
    pub fn value(self, hist: &OpcodeHistogram, bucket: usize) -> f64 {
        match self {
            FrequencyMode::RawCount => hist[bucket] as f64,
            FrequencyMode::Relative if hist.total() == 0 => 0.0,
            FrequencyMode::Relative => hist[bucket] as f64 / hist.total() as f64,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SelectionError {
    #[error("no {0} apps: the group cannot be trained")]
    EmptyClass(&'static str),
    #[error("n = {0} is outside 1..=256")]
    NOutOfRange(usize),
    #[error("ranking artifact line {line}: {msg}")]
    Artifact { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeanProfile {
    benign_sums: [f64; BUCKETS],
    malicious_sums: [f64; BUCKETS],
    n_benign: usize,
    n_malicious: usize,
}

impl ClassMeanProfile {
    pub fn n_benign(&self) -> usize {
        self.n_benign
    }

    pub fn n_malicious(&self) -> usize {
        self.n_malicious
    }

    /// `F_B(j)`.
    pub fn benign_mean(&self, bucket: usize) -> f64 {
        self.benign_sums[bucket] / self.n_benign as f64
    }

    /// `F_M(j)`.
    pub fn malicious_mean(&self, bucket: usize) -> f64 {
        self.malicious_sums[bucket] / self.n_malicious as f64
    }

    /// `D(j)`, evaluated over the common denominator.
    pub fn difference(&self, bucket: usize) -> f64 {
        let nb = self.n_benign as f64;
        let nm = self.n_malicious as f64;
        (self.benign_sums[bucket] * nm - self.malicious_sums[bucket] * nb).abs() / (nb * nm)
    }
}

fn class_sums<'a, I>(apps: I, mode: FrequencyMode) -> ([f64; BUCKETS], usize)
where
    I: IntoIterator<Item = &'a OpcodeHistogram>,
{
    let apps: Vec<&OpcodeHistogram> = apps.into_iter().collect();
    let mut sums = [0f64; BUCKETS];
    match mode {
        FrequencyMode::RawCount => {
            for (bucket, sum) in sums.iter_mut().enumerate() {
                *sum = apps.iter().map(|h| h[bucket]).sum::<u64>() as f64;
            }
        }
        FrequencyMode::Relative => {
            // Sorting makes the float sum independent of app order.
            let mut values = Vec::with_capacity(apps.len());
            for (bucket, sum) in sums.iter_mut().enumerate() {
                values.clear();
                values.extend(apps.iter().map(|h| mode.value(h, bucket)));
                values.sort_by(f64::total_cmp);
                *sum = values.iter().sum();
            }
        }
    }
    (sums, apps.len())
}

pub fn compute_profile<'a, B, M>(
    benign: B,
    malicious: M,
    mode: FrequencyMode,
) -> Result<ClassMeanProfile, SelectionError>
where
    B: IntoIterator<Item = &'a OpcodeHistogram>,
    M: IntoIterator<Item = &'a OpcodeHistogram>,
{
    let (benign_sums, n_benign) = class_sums(benign, mode);
    let (malicious_sums, n_malicious) = class_sums(malicious, mode);
    if n_benign == 0 {
        return Err(SelectionError::EmptyClass("benign"));
    }
    if n_malicious == 0 {
        return Err(SelectionError::EmptyClass("malicious"));
    }
    Ok(ClassMeanProfile {
        benign_sums,
        malicious_sums,
        n_benign,
        n_malicious,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRanking {
    scores: [f64; BUCKETS],
    order: Vec<Opcode>,
}

impl FeatureRanking {
    pub fn score(&self, op: Opcode) -> f64 {
        self.scores[op.0 as usize]
    }

    pub fn scores(&self) -> &[f64; BUCKETS] {
        &self.scores
    }

    /// All 256 opcodes, best first.
    pub fn order(&self) -> &[Opcode] {
        &self.order
    }
}

pub fn rank_features(profile: &ClassMeanProfile) -> FeatureRanking {
    let mut scores = [0f64; BUCKETS];
    for (bucket, score) in scores.iter_mut().enumerate() {
        *score = profile.difference(bucket);
    }
    let mut order: Vec<Opcode> = Opcode::all().collect();
    order.sort_by(|a, b| {
        scores[b.0 as usize]
            .total_cmp(&scores[a.0 as usize])
            .then(a.0.cmp(&b.0))
    });
    FeatureRanking { scores, order }
}

pub fn top_n(ranking: &FeatureRanking, n: usize) -> Result<Vec<Opcode>, SelectionError> {
    if !(1..=BUCKETS).contains(&n) {
        return Err(SelectionError::NOutOfRange(n));
    }
    Ok(ranking.order[..n].to_vec())
}

/// Top-`k` opcodes and their scores as two tab-separated columns.
pub fn difference_report(ranking: &FeatureRanking, k: usize) -> Result<String, SelectionError> {
    let top = top_n(ranking, k)?;
    let mut out = String::from("opcode\tdifference\n");
    for op in top {
        let _ = writeln!(out, "{}\t{}", op.mnemonic(), ranking.score(op));
    }
    Ok(out)
}

/// The selected feature list as exchanged between pipeline stages.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingArtifact {
    pub group: Option<GroupId>,
    pub features: Vec<(Opcode, f64)>,
}

pub const ARTIFACT_MAGIC: &str = "feature-ranking v1";

impl RankingArtifact {
    pub fn from_ranking(
        group: Option<GroupId>,
        ranking: &FeatureRanking,
        n: usize,
    ) -> Result<Self, SelectionError> {
        let features = top_n(ranking, n)?
            .into_iter()
            .map(|op| (op, ranking.score(op)))
            .collect();
        Ok(Self { group, features })
    }

    pub fn opcodes(&self) -> Vec<Opcode> {
        self.features.iter().map(|(op, _)| *op).collect()
    }

    /// Layout:
    ///
    /// ```text
    /// feature-ranking v1
    /// group <name or ->
    /// n <count>
    /// rank<TAB>opcode<TAB>mnemonic<TAB>score
    /// 1<TAB>0x1a<TAB>const-string<TAB>12.5
    /// ```
    ///
    /// `opcode` is authoritative; `mnemonic` is informational. Scores use
    /// the shortest decimal that round-trips.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{ARTIFACT_MAGIC}");
        let _ = writeln!(s, "group {}", self.group.map(|g| g.name()).unwrap_or("-"));
        let _ = writeln!(s, "n {}", self.features.len());
        s.push_str("rank\topcode\tmnemonic\tscore\n");
        for (i, (op, score)) in self.features.iter().enumerate() {
            let _ = writeln!(s, "{}\t{:#04x}\t{}\t{}", i + 1, op.0, op.mnemonic(), score);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, SelectionError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| SelectionError::Artifact {
                line: 0,
                msg: format!("missing {what}"),
            })
        };
        let bad = |line: usize, msg: &str| SelectionError::Artifact {
            line: line + 1,
            msg: msg.to_string(),
        };

        let (i, magic) = next("magic")?;
        if magic.trim() != ARTIFACT_MAGIC {
            return Err(bad(i, "bad magic"));
        }
        let (i, group_line) = next("group")?;
        let group = match group_line.strip_prefix("group ").map(str::trim) {
            Some("-") => None,
            Some(name) => Some(GroupId::from_str(name).map_err(|_| bad(i, "unknown group"))?),
            None => return Err(bad(i, "expected group line")),
        };
        let (i, n_line) = next("n")?;
        let n: usize = n_line
            .strip_prefix("n ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad(i, "expected n line"))?;
        let (i, header) = next("column header")?;
        if header.trim() != "rank\topcode\tmnemonic\tscore" {
            return Err(bad(i, "bad column header"));
        }
        let mut features = Vec::with_capacity(n);
        for (i, line) in lines {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad(i, "expected 4 columns"));
            }
            let op = cols[1]
                .strip_prefix("0x")
                .and_then(|h| u8::from_str_radix(h, 16).ok())
                .ok_or_else(|| bad(i, "bad opcode"))?;
            let score: f64 = cols[3].trim().parse().map_err(|_| bad(i, "bad score"))?;
            features.push((Opcode(op), score));
        }
        if features.len() != n || n == 0 || n > BUCKETS {
            return Err(bad(0, "feature count does not match n"));
        }
        Ok(Self { group, features })
    }
}
