//! Dataset manifests, cached extraction and synthetic corpora.
//!
//! Extracted corpora travel between pipeline stages as two files: a
//! histogram table (see [`crate::histogram`]) and an app table
//! `app_id<TAB>label<TAB>permissions` with comma-joined permissions (`-` for
//! none).

mod ingest;
mod manifest;
mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::classify::Label;
use crate::histogram::{self, HistogramFormatError, OpcodeHistogram};
use crate::manifest::PermissionSet;

pub use ingest::{
    content_hash, extract_app, ingest, ExtractError, IngestOptions, IngestReport, Quarantined,
};
pub use manifest::{CorpusManifest, ManifestEntry};
pub use synthetic::{
    generate_synthetic, materialize, planted_benchmark, planted_opcodes, AppFormat, Cohort,
    SyntheticApp, SyntheticSpec, PLANTED_GAP, PLANTED_PER_GROUP,
};

pub const APP_TABLE_HEADER: &str = "app_id\tlabel\tpermissions";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("app table line {line}: {msg}")]
    AppTable { line: usize, msg: String },
    #[error("duplicate app id {0:?}")]
    DuplicateAppId(String),
    #[error(transparent)]
    Histogram(#[from] HistogramFormatError),
    #[error("app {0:?} has no histogram record")]
    MissingHistogram(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One labeled app after extraction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppRecord {
    pub app_id: String,
    pub label: Label,
    pub histogram: OpcodeHistogram,
    pub permissions: PermissionSet,
}

/// Writes `bytes` to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CorpusError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| CorpusError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// Renders `(histogram table, app table)` for an extracted corpus.
pub fn write_extracted(apps: &[AppRecord]) -> (String, String) {
    let hist = histogram::write_table(apps.iter().map(|a| (a.app_id.as_str(), &a.histogram)));
    let mut table = format!("{APP_TABLE_HEADER}\n");
    for a in apps {
        let _ = writeln!(
            table,
            "{}\t{}\t{}",
            a.app_id,
            a.label,
            a.permissions.to_field()
        );
    }
    (hist, table)
}

/// Joins a histogram table and an app table; rows follow the app table.
pub fn read_extracted(hist_text: &str, app_text: &str) -> Result<Vec<AppRecord>, CorpusError> {
    let mut hists: BTreeMap<String, OpcodeHistogram> = BTreeMap::new();
    for (id, h) in histogram::parse_table(hist_text)? {
        if hists.insert(id.clone(), h).is_some() {
            return Err(CorpusError::DuplicateAppId(id));
        }
    }
    let mut lines = app_text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    match lines.next() {
        Some((_, l)) if l.trim_end() == APP_TABLE_HEADER => {}
        other => {
            return Err(CorpusError::AppTable {
                line: other.map_or(0, |(n, _)| n),
                msg: "missing header".into(),
            })
        }
    }
    let mut seen = HashSet::new();
    let mut apps = Vec::new();
    for (line, text) in lines {
        let f: Vec<&str> = text.trim_end().split('\t').collect();
        if f.len() != 3 {
            return Err(CorpusError::AppTable {
                line,
                msg: format!("expected 3 fields, found {}", f.len()),
            });
        }
        let label = f[1]
            .parse()
            .map_err(|msg| CorpusError::AppTable { line, msg })?;
        if !seen.insert(f[0]) {
            return Err(CorpusError::DuplicateAppId(f[0].into()));
        }
        let histogram = hists
            .remove(f[0])
            .ok_or_else(|| CorpusError::MissingHistogram(f[0].into()))?;
        apps.push(AppRecord {
            app_id: f[0].to_string(),
            label,
            histogram,
            permissions: PermissionSet::from_field(f[2]),
        });
    }
    Ok(apps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opcodes::Opcode;

    #[test]
    fn extracted_round_trip() {
        let mut h = OpcodeHistogram::zero();
        h.add(Opcode(0x0e), 3);
        let apps = vec![
            AppRecord {
                app_id: "a".into(),
                label: Label::Benign,
                histogram: h,
                permissions: PermissionSet::new(),
            },
            AppRecord {
                app_id: "b".into(),
                label: Label::Malicious,
                histogram: OpcodeHistogram::zero(),
                permissions: ["android.permission.SEND_SMS"]
                    .into_iter()
                    .map(String::from)
                    .collect(),
            },
        ];
        let (hist, table) = write_extracted(&apps);
        assert_eq!(read_extracted(&hist, &table).unwrap(), apps);
        assert!(matches!(
            read_extracted(&hist, "app_id\tlabel\tpermissions\nzzz\tbenign\t-\n"),
            Err(CorpusError::MissingHistogram(_))
        ));
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
