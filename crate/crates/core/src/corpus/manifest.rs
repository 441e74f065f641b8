//! Corpus manifest: one app per line,
//!
//! ```text
//! # comment
//! app_id <TAB> label <TAB> path [<TAB> hist-ref [<TAB> perms-ref]]
//! ```
//!
//! `path` is an `.apk`, a `.dex`, a `.smali` file, or a directory holding
//! smali sources and/or `classes*.dex` plus `AndroidManifest.xml`. The
//! optional refs point at precomputed results: a histogram table with one
//! record, and a permission list with one name per line. `-` marks an absent
//! column; `path` may be `-` when both refs are given. Relative paths resolve
//! against the manifest's directory.

use std::collections::HashSet;
use std::fmt::Write as _;

use super::CorpusError;
use crate::classify::Label;
use crate::histogram::validate_app_id;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub app_id: String,
    pub label: Label,
    pub path: Option<String>,
    pub hist_ref: Option<String>,
    pub perms_ref: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

fn field(s: Option<&str>) -> Option<String> {
    s.map(str::trim)
        .filter(|s| !s.is_empty() && *s != "-")
        .map(String::from)
}

impl CorpusManifest {
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
                continue;
            }
            let err = |msg: String| CorpusError::Manifest { line, msg };
            let cols: Vec<&str> = raw.trim_end_matches(['\r', '\n']).split('\t').collect();
            if !(3..=5).contains(&cols.len()) {
                return Err(err(format!(
                    "expected 3 to 5 tab-separated columns, found {}",
                    cols.len()
                )));
            }
            let app_id = cols[0].trim().to_string();
            validate_app_id(&app_id).map_err(|e| err(e.to_string()))?;
            let label = cols[1].parse().map_err(err)?;
            let entry = ManifestEntry {
                path: field(cols.get(2).copied()),
                hist_ref: field(cols.get(3).copied()),
                perms_ref: field(cols.get(4).copied()),
                app_id,
                label,
            };
            if entry.path.is_none() && (entry.hist_ref.is_none() || entry.perms_ref.is_none()) {
                return Err(err("path is required unless both refs are given".into()));
            }
            if !seen.insert(entry.app_id.clone()) {
                return Err(CorpusError::DuplicateAppId(entry.app_id));
            }
            entries.push(entry);
        }
        Ok(Self { entries })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# app_id\tlabel\tpath\thist-ref\tperms-ref\n");
        for e in &self.entries {
            let d = |o: &Option<String>| o.clone().unwrap_or_else(|| "-".into());
            let _ = write!(s, "{}\t{}\t{}", e.app_id, e.label, d(&e.path));
            if e.hist_ref.is_some() || e.perms_ref.is_some() {
                let _ = write!(s, "\t{}\t{}", d(&e.hist_ref), d(&e.perms_ref));
            }
            s.push('\n');
        }
        s
    }
}
