use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{write_atomic, AppRecord, CorpusError, CorpusManifest, ManifestEntry};
use crate::apk::{analyze_apk, dex_entry_index, ApkError};
use crate::dex::{extract_from_dex_with, DexError, DexOptions};
use crate::histogram::{self, merge_histograms, OpcodeHistogram};
use crate::manifest::{parse_manifest_bytes, ManifestError, PermissionSet};
use crate::smali::{extract_from_smali, SmaliError, UnknownMnemonicPolicy};

const CACHE_TAG: &str = "opdroid-extract v1";

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("{file}: {source}")]
    Dex { file: String, source: DexError },
    #[error(transparent)]
    Apk(#[from] ApkError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Smali(#[from] SmaliError),
    #[error("{0}: no smali or dex code found")]
    NoCode(PathBuf),
    #[error("{0}: no AndroidManifest.xml")]
    MissingManifest(PathBuf),
    #[error("{0}: not an apk, dex, smali file or directory")]
    UnknownInput(PathBuf),
    #[error("{path}: {msg}")]
    Ref { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    /// Content-addressed cache directory; `None` disables caching.
    pub cache_dir: Option<PathBuf>,
    pub dex: DexOptions,
    pub smali_policy: UnknownMnemonicPolicy,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quarantined {
    pub app_id: String,
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    /// Extracted apps, in manifest order.
    pub apps: Vec<AppRecord>,
    pub quarantined: Vec<Quarantined>,
    pub cache_hits: usize,
    /// Apps whose inputs were parsed on this run.
    pub extracted: usize,
    pub warnings: Vec<String>,
}

/// Raw input files of one app: `(role/name, bytes)` in a stable order.
enum Inputs {
    Apk(Vec<u8>),
    Dex(Vec<u8>),
    Smali(Vec<u8>),
    Dir {
        smali: Vec<(String, Vec<u8>)>,
        dex: Vec<(String, Vec<u8>)>,
        manifest: Option<Vec<u8>>,
    },
}

fn read(path: &Path) -> Result<Vec<u8>, ExtractError> {
    std::fs::read(path).map_err(|e| ExtractError::Io(path.to_path_buf(), e))
}

fn walk(dir: &Path, rel: &str, out: &mut Vec<(String, PathBuf)>) -> Result<(), ExtractError> {
    let io = |e| ExtractError::Io(dir.to_path_buf(), e);
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(io)?
        .collect::<Result<_, _>>()
        .map_err(io)?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let name = e.file_name().to_string_lossy().into_owned();
        let rel_name = if rel.is_empty() {
            name.clone()
        } else {
            format!("{rel}/{name}")
        };
        let path = e.path();
        if path.is_dir() {
            walk(&path, &rel_name, out)?;
        } else {
            out.push((rel_name, path));
        }
    }
    Ok(())
}

fn load(path: &Path) -> Result<Inputs, ExtractError> {
    if path.is_dir() {
        let mut files = Vec::new();
        walk(path, "", &mut files)?;
        let mut smali = Vec::new();
        let mut dex = Vec::new();
        let mut manifest = None;
        for (rel, p) in files {
            if rel.ends_with(".smali") {
                smali.push((rel, read(&p)?));
            } else if rel == "AndroidManifest.xml" {
                manifest = Some(read(&p)?);
            } else if dex_entry_index(&rel).is_some() {
                dex.push((rel, read(&p)?));
            }
        }
        dex.sort_by_key(|(name, _)| dex_entry_index(name));
        return Ok(Inputs::Dir {
            smali,
            dex,
            manifest,
        });
    }
    let bytes = read(path)?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    if bytes.starts_with(b"PK\x03\x04") || ext == "apk" {
        Ok(Inputs::Apk(bytes))
    } else if bytes.starts_with(b"dex\n") || ext == "dex" {
        Ok(Inputs::Dex(bytes))
    } else if ext == "smali" {
        Ok(Inputs::Smali(bytes))
    } else {
        Err(ExtractError::UnknownInput(path.to_path_buf()))
    }
}

impl Inputs {
    fn hash(&self, policy: UnknownMnemonicPolicy) -> String {
        let mut h = Sha256::new();
        let mut part = |name: &str, bytes: &[u8]| {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        };
        part(CACHE_TAG, format!("{policy:?}").as_bytes());
        match self {
            Inputs::Apk(b) => part("apk", b),
            Inputs::Dex(b) => part("dex", b),
            Inputs::Smali(b) => part("smali", b),
            Inputs::Dir {
                smali,
                dex,
                manifest,
            } => {
                for (n, b) in smali.iter().chain(dex) {
                    part(n, b);
                }
                if let Some(m) = manifest {
                    part("AndroidManifest.xml", m);
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn extract(
        &self,
        path: &Path,
        opts: &IngestOptions,
        warnings: &mut Vec<String>,
    ) -> Result<(OpcodeHistogram, PermissionSet), ExtractError> {
        let dex = |file: &str, b: &[u8]| {
            extract_from_dex_with(b, opts.dex).map_err(|source| ExtractError::Dex {
                file: file.to_string(),
                source,
            })
        };
        let mut smali = |docs: Vec<String>| -> Result<OpcodeHistogram, ExtractError> {
            let ex = extract_from_smali(&docs, opts.smali_policy)?;
            warnings.extend(
                ex.skipped
                    .iter()
                    .map(|w| format!("{}: {w}", path.display())),
            );
            Ok(ex.histogram)
        };
        match self {
            Inputs::Apk(b) => Ok(analyze_apk(b, opts.dex)?),
            Inputs::Dex(b) => Ok((dex(&path.display().to_string(), b)?, PermissionSet::new())),
            Inputs::Smali(b) => Ok((
                smali(vec![String::from_utf8_lossy(b).into_owned()])?,
                PermissionSet::new(),
            )),
            Inputs::Dir {
                smali: sm,
                dex: dx,
                manifest,
            } => {
                if sm.is_empty() && dx.is_empty() {
                    return Err(ExtractError::NoCode(path.to_path_buf()));
                }
                let manifest = manifest
                    .as_deref()
                    .ok_or_else(|| ExtractError::MissingManifest(path.to_path_buf()))?;
                let perms = parse_manifest_bytes(manifest)?;
                let mut parts = Vec::new();
                if !sm.is_empty() {
                    parts.push(smali(
                        sm.iter()
                            .map(|(_, b)| String::from_utf8_lossy(b).into_owned())
                            .collect(),
                    )?);
                }
                for (name, b) in dx {
                    parts.push(dex(name, b)?);
                }
                Ok((merge_histograms(&parts), perms))
            }
        }
    }
}

/// Extracts one app without touching any cache.
pub fn extract_app(
    path: &Path,
    opts: &IngestOptions,
) -> Result<(OpcodeHistogram, PermissionSet), ExtractError> {
    load(path)?.extract(path, opts, &mut Vec::new())
}

/// Cache key of an app's inputs.
pub fn content_hash(path: &Path, policy: UnknownMnemonicPolicy) -> Result<String, ExtractError> {
    Ok(load(path)?.hash(policy))
}

fn perms_text(perms: &PermissionSet) -> String {
    perms.iter().map(|p| format!("{p}\n")).collect()
}

fn parse_perms_list(text: &str) -> PermissionSet {
    text.lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .collect()
}

fn read_cache(dir: &Path, hash: &str) -> Option<(OpcodeHistogram, PermissionSet)> {
    let hist = std::fs::read_to_string(dir.join(format!("{hash}.hist"))).ok()?;
    let perms = std::fs::read_to_string(dir.join(format!("{hash}.perms"))).ok()?;
    let mut rows = histogram::parse_table(&hist).ok()?;
    (rows.len() == 1).then(|| (rows.remove(0).1, parse_perms_list(&perms)))
}

fn write_cache(
    dir: &Path,
    hash: &str,
    hist: &OpcodeHistogram,
    perms: &PermissionSet,
) -> Result<(), CorpusError> {
    let table = histogram::write_table([(hash, hist)]);
    write_atomic(&dir.join(format!("{hash}.hist")), table.as_bytes())?;
    write_atomic(
        &dir.join(format!("{hash}.perms")),
        perms_text(perms).as_bytes(),
    )
}

fn read_hist_ref(path: &Path, app_id: &str) -> Result<OpcodeHistogram, ExtractError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| ExtractError::Io(path.to_path_buf(), e))?;
    let refe = |msg: String| ExtractError::Ref {
        path: path.to_path_buf(),
        msg,
    };
    let mut rows = histogram::parse_table(&text).map_err(|e| refe(e.to_string()))?;
    if rows.len() == 1 {
        return Ok(rows.remove(0).1);
    }
    rows.into_iter()
        .find(|(id, _)| id == app_id)
        .map(|(_, h)| h)
        .ok_or_else(|| refe(format!("no record for {app_id}")))
}

fn read_perms_ref(path: &Path) -> Result<PermissionSet, ExtractError> {
    let bytes = read(path)?;
    if path.extension().is_some_and(|e| e == "xml") {
        return Ok(parse_manifest_bytes(&bytes)?);
    }
    Ok(parse_perms_list(&String::from_utf8_lossy(&bytes)))
}

enum Outcome {
    App {
        record: Box<AppRecord>,
        hit: bool,
        warnings: Vec<String>,
    },
    Quarantine(Quarantined),
}

fn process(
    entry: &ManifestEntry,
    base: &Path,
    opts: &IngestOptions,
) -> Result<Outcome, CorpusError> {
    let resolve = |p: &str| base.join(p);
    let mut warnings = Vec::new();
    let result = (|| -> Result<(OpcodeHistogram, PermissionSet, bool), ExtractError> {
        let hist_ref = entry
            .hist_ref
            .as_deref()
            .map(|p| read_hist_ref(&resolve(p), &entry.app_id))
            .transpose()?;
        let perms_ref = entry
            .perms_ref
            .as_deref()
            .map(|p| read_perms_ref(&resolve(p)))
            .transpose()?;
        if let (Some(h), Some(p)) = (&hist_ref, &perms_ref) {
            return Ok((h.clone(), p.clone(), true));
        }
        let path = resolve(entry.path.as_deref().unwrap_or_default());
        let inputs = load(&path)?;
        let hash = inputs.hash(opts.smali_policy);
        let cached = opts.cache_dir.as_deref().and_then(|d| read_cache(d, &hash));
        let (hist, perms, hit) = match cached {
            Some((h, p)) => (h, p, true),
            None => {
                let (h, p) = inputs.extract(&path, opts, &mut warnings)?;
                (h, p, false)
            }
        };
        if !hit {
            if let Some(dir) = opts.cache_dir.as_deref() {
                write_cache(dir, &hash, &hist, &perms).map_err(|e| ExtractError::Ref {
                    path: dir.to_path_buf(),
                    msg: e.to_string(),
                })?;
            }
        }
        Ok((hist_ref.unwrap_or(hist), perms_ref.unwrap_or(perms), hit))
    })();
    Ok(match result {
        Ok((histogram, permissions, hit)) => Outcome::App {
            record: Box::new(AppRecord {
                app_id: entry.app_id.clone(),
                label: entry.label,
                histogram,
                permissions,
            }),
            hit,
            warnings,
        },
        Err(e) => Outcome::Quarantine(Quarantined {
            app_id: entry.app_id.clone(),
            path: entry.path.clone().unwrap_or_else(|| "-".into()),
            reason: e.to_string(),
        }),
    })
}

/// Extracts every manifest entry, in parallel. Per-app failures are
/// quarantined rather than returned; relative paths resolve against `base`.
pub fn ingest(
    manifest: &CorpusManifest,
    base: &Path,
    opts: &IngestOptions,
) -> Result<IngestReport, CorpusError> {
    let outcomes: Vec<Outcome> = manifest
        .entries
        .par_iter()
        .map(|e| process(e, base, opts))
        .collect::<Result<_, _>>()?;
    let mut report = IngestReport::default();
    for o in outcomes {
        match o {
            Outcome::App {
                record,
                hit,
                warnings,
            } => {
                if hit {
                    report.cache_hits += 1;
                } else {
                    report.extracted += 1;
                }
                report.apps.push(*record);
                report.warnings.extend(warnings);
            }
            Outcome::Quarantine(q) => report.quarantined.push(q),
        }
    }
    Ok(report)
}
