//! Per-app opcode occurrence counts and their line-oriented text form.
//!
//! Histogram files are comma-separated, one app per line:
//!
//! ```text
//! app_id,op_00,op_01,...,op_ff,total
//! com.example.app,12,0,...,3,4821
//! ```
//!
//! Columns are in ascending opcode order. Lines starting with `#` are
//! header comments and are ignored on read.

use std::fmt::Write as _;
use std::ops::Index;

use thiserror::Error;

use crate::opcodes::Opcode;

pub const BUCKETS: usize = 256;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct OpcodeHistogram {
    counts: [u64; BUCKETS],
    total: u64,
}

impl Default for OpcodeHistogram {
    fn default() -> Self {
        Self::zero()
    }
}

impl std::fmt::Debug for OpcodeHistogram {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let nonzero: Vec<(String, u64)> = self
            .counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0)
            .map(|(op, &c)| (format!("{op:#04x}"), c))
            .collect();
        f.debug_struct("OpcodeHistogram")
            .field("total", &self.total)
            .field("nonzero", &nonzero)
            .finish()
    }
}

impl OpcodeHistogram {
    pub fn zero() -> Self {
        Self {
            counts: [0; BUCKETS],
            total: 0,
        }
    }

    pub fn from_counts(counts: [u64; BUCKETS]) -> Self {
        let total = counts.iter().sum();
        Self { counts, total }
    }

    pub fn record(&mut self, op: Opcode) {
        self.add(op, 1);
    }

    pub fn add(&mut self, op: Opcode, n: u64) {
        self.counts[op.0 as usize] += n;
        self.total += n;
    }

    pub fn counts(&self) -> &[u64; BUCKETS] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn get(&self, op: Opcode) -> u64 {
        self.counts[op.0 as usize]
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn merge_from(&mut self, other: &OpcodeHistogram) {
        for (mine, theirs) in self.counts.iter_mut().zip(other.counts.iter()) {
            *mine += theirs;
        }
        self.total += other.total;
    }

    pub fn scaled(&self, factor: u64) -> OpcodeHistogram {
        let mut counts = self.counts;
        for c in counts.iter_mut() {
            *c *= factor;
        }
        OpcodeHistogram::from_counts(counts)
    }
}

impl Index<usize> for OpcodeHistogram {
    type Output = u64;

    fn index(&self, index: usize) -> &u64 {
        &self.counts[index]
    }
}

/// Bucketwise sum of any number of histograms.
pub fn merge_histograms<'a, I>(parts: I) -> OpcodeHistogram
where
    I: IntoIterator<Item = &'a OpcodeHistogram>,
{
    let mut out = OpcodeHistogram::zero();
    for part in parts {
        out.merge_from(part);
    }
    out
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HistogramFormatError {
    #[error("line {line}: expected {expected} fields, found {found}")]
    FieldCount {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: bad count {value:?}")]
    BadCount { line: usize, value: String },
    #[error("line {line}: total {stated} does not match bucket sum {actual}")]
    TotalMismatch {
        line: usize,
        stated: u64,
        actual: u64,
    },
    #[error("missing or malformed header")]
    Header,
    #[error("app id {0:?} contains a separator or whitespace")]
    BadAppId(String),
}

pub fn header_line() -> String {
    let mut line = String::from("app_id");
    for op in 0..BUCKETS {
        let _ = write!(line, ",op_{op:02x}");
    }
    line.push_str(",total");
    line
}

/// Rejects ids that would break the line-oriented formats.
pub fn validate_app_id(id: &str) -> Result<(), HistogramFormatError> {
    if id.is_empty() || id.chars().any(|c| c == ',' || c.is_whitespace()) {
        return Err(HistogramFormatError::BadAppId(id.to_string()));
    }
    Ok(())
}

pub fn format_record(app_id: &str, hist: &OpcodeHistogram) -> String {
    let mut line = String::with_capacity(app_id.len() + 4 * BUCKETS);
    line.push_str(app_id);
    for c in hist.counts.iter() {
        let _ = write!(line, ",{c}");
    }
    let _ = write!(line, ",{}", hist.total);
    line
}

/// Renders a full histogram file (header plus one record per app).
pub fn write_table<'a, I>(records: I) -> String
where
    I: IntoIterator<Item = (&'a str, &'a OpcodeHistogram)>,
{
    let mut out = header_line();
    out.push('\n');
    for (id, hist) in records {
        out.push_str(&format_record(id, hist));
        out.push('\n');
    }
    out
}

pub fn parse_table(text: &str) -> Result<Vec<(String, OpcodeHistogram)>, HistogramFormatError> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    match lines.next() {
        Some((_, l)) if l.trim_end() == header_line() => {}
        _ => return Err(HistogramFormatError::Header),
    }
    lines.map(|(i, l)| parse_record(i + 1, l)).collect()
}

fn parse_record(
    line: usize,
    text: &str,
) -> Result<(String, OpcodeHistogram), HistogramFormatError> {
    let fields: Vec<&str> = text.trim_end().split(',').collect();
    if fields.len() != BUCKETS + 2 {
        return Err(HistogramFormatError::FieldCount {
            line,
            expected: BUCKETS + 2,
            found: fields.len(),
        });
    }
    let parse = |s: &str| {
        s.parse::<u64>()
            .map_err(|_| HistogramFormatError::BadCount {
                line,
                value: s.to_string(),
            })
    };
    let mut counts = [0u64; BUCKETS];
    for (slot, field) in counts.iter_mut().zip(&fields[1..=BUCKETS]) {
        *slot = parse(field)?;
    }
    let stated = parse(fields[BUCKETS + 1])?;
    let hist = OpcodeHistogram::from_counts(counts);
    if hist.total != stated {
        return Err(HistogramFormatError::TotalMismatch {
            line,
            stated,
            actual: hist.total,
        });
    }
    Ok((fields[0].to_string(), hist))
}
