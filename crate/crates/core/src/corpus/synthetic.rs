//! Seeded synthetic corpora with known class distributions.
//!
//! Each cohort is a set of permission groups plus benign and malicious app
//! counts and per-class mean opcode counts. An app's count for opcode `o` is
//! `round(max(0, Normal(mean[o], dispersion * mean[o])))`; its manifest
//! requests the template permissions of every group in the cohort.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{io_err, write_atomic, AppRecord, CorpusError, CorpusManifest, ManifestEntry};
use crate::apk::write_apk;
use crate::axml::{encode_manifest, StringEncoding};
use crate::classify::Label;
use crate::dex::writer::dex_for_histogram;
use crate::groups::{GroupId, Grouper};
use crate::histogram::{OpcodeHistogram, BUCKETS};
use crate::manifest::{render_manifest_text, PermissionSet};
use crate::opcodes::Opcode;
use crate::seeds;
use crate::smali::render_class;

/// Opcodes with a planted class gap per cohort of [`planted_benchmark`].
pub const PLANTED_PER_GROUP: usize = 10;
/// Extra mean count of each planted opcode in malicious apps.
pub const PLANTED_GAP: f64 = 16.0;

/// A permission every synthetic app requests; it maps to no group.
const BASELINE_PERMISSION: &str = "android.permission.INTERNET";

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub name: String,
    pub groups: BTreeSet<GroupId>,
    pub benign: usize,
    pub malicious: usize,
    pub benign_mean: Vec<f64>,
    pub malicious_mean: Vec<f64>,
}

impl Cohort {
    pub fn mean(&self, label: Label) -> &[f64] {
        match label {
            Label::Benign => &self.benign_mean,
            Label::Malicious => &self.malicious_mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub cohorts: Vec<Cohort>,
    /// Standard deviation as a fraction of the mean.
    pub dispersion: f64,
    /// Permissions requested for membership in each group. Groups without
    /// an entry use the first permission of the default mapping.
    pub templates: BTreeMap<GroupId, Vec<String>>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticApp {
    pub record: AppRecord,
    pub groups: BTreeSet<GroupId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppFormat {
    /// Directory with `AndroidManifest.xml` and `smali/`.
    Smali,
    /// Directory with `AndroidManifest.xml` and `classes.dex`.
    Dex,
    /// `.apk` with a binary manifest and `classes.dex`.
    Apk,
}

impl SyntheticSpec {
    fn permissions_for(&self, groups: &BTreeSet<GroupId>, grouper: &Grouper) -> PermissionSet {
        let mut perms = PermissionSet::new();
        perms.insert(BASELINE_PERMISSION);
        for g in groups.iter().filter(|g| g.is_dangerous()) {
            match self.templates.get(g) {
                Some(list) => list.iter().for_each(|p| {
                    perms.insert(p);
                }),
                None => {
                    if let Some(p) = grouper.mapping.permissions(*g).first() {
                        perms.insert(p);
                    }
                }
            }
        }
        perms
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::InvalidSpec(m));
        if !(self.dispersion >= 0.0 && self.dispersion.is_finite()) {
            return bad(format!(
                "dispersion {} must be finite and non-negative",
                self.dispersion
            ));
        }
        if self.cohorts.is_empty() {
            return bad("no cohorts".into());
        }
        let grouper = Grouper::default();
        let mut names = BTreeSet::new();
        for c in &self.cohorts {
            if c.name.is_empty()
                || c.name
                    .chars()
                    .any(|ch| !(ch.is_ascii_alphanumeric() || ch == '-' || ch == '_'))
            {
                return bad(format!("cohort name {:?} must be [A-Za-z0-9_-]+", c.name));
            }
            if !names.insert(c.name.as_str()) {
                return bad(format!("duplicate cohort {}", c.name));
            }
            for mean in [&c.benign_mean, &c.malicious_mean] {
                if mean.len() != BUCKETS {
                    return bad(format!(
                        "{}: mean vector has {} entries, expected {BUCKETS}",
                        c.name,
                        mean.len()
                    ));
                }
                if mean.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
                    return bad(format!("{}: means must be finite and non-negative", c.name));
                }
            }
            let perms = self.permissions_for(&c.groups, &grouper);
            if grouper.assign_groups(&perms) != c.groups {
                return bad(format!(
                    "{}: templates do not reproduce groups {:?}",
                    c.name,
                    c.groups.iter().map(|g| g.name()).collect::<Vec<_>>()
                ));
            }
        }
        Ok(())
    }
}

fn sample_histogram(mean: &[f64], dispersion: f64, seed_parts: &[u64]) -> OpcodeHistogram {
    let mut rng = seeds::rng(seed_parts);
    let mut counts = [0u64; BUCKETS];
    for (c, &m) in counts.iter_mut().zip(mean) {
        if m <= 0.0 {
            continue;
        }
        let x = if dispersion == 0.0 {
            m
        } else {
            Normal::new(m, dispersion * m)
                .expect("positive sd")
                .sample(&mut rng)
        };
        *c = x.max(0.0).round() as u64;
    }
    OpcodeHistogram::from_counts(counts)
}

/// Draws every app of every cohort. Ids are `<cohort>-b<i>` / `<cohort>-m<i>`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<SyntheticApp>, CorpusError> {
    spec.validate()?;
    let grouper = Grouper::default();
    let jobs: Vec<(usize, Label, usize)> = spec
        .cohorts
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| {
            (0..c.benign)
                .map(move |i| (ci, Label::Benign, i))
                .chain((0..c.malicious).map(move |i| (ci, Label::Malicious, i)))
        })
        .collect();
    Ok(jobs
        .into_par_iter()
        .map(|(ci, label, i)| {
            let c = &spec.cohorts[ci];
            let tag = match label {
                Label::Benign => 'b',
                Label::Malicious => 'm',
            };
            let histogram = sample_histogram(
                c.mean(label),
                spec.dispersion,
                &[spec.seed, ci as u64, label.index() as u64, i as u64],
            );
            SyntheticApp {
                record: AppRecord {
                    app_id: format!("{}-{tag}{i:04}", c.name),
                    label,
                    histogram,
                    permissions: spec.permissions_for(&c.groups, &grouper),
                },
                groups: c.groups.clone(),
            }
        })
        .collect())
}

/// Opcodes whose malicious mean exceeds the benign mean, per cohort, for a
/// spec built by [`planted_benchmark`].
pub fn planted_opcodes(spec: &SyntheticSpec) -> BTreeMap<String, Vec<Opcode>> {
    spec.cohorts
        .iter()
        .map(|c| {
            let ops = (0..BUCKETS)
                .filter(|&o| c.malicious_mean[o] != c.benign_mean[o])
                .map(|o| Opcode(o as u8))
                .collect();
            (c.name.clone(), ops)
        })
        .collect()
}

/// Nine single-group cohorts (the eight dangerous groups other than Sensors,
/// plus Others) of 83 benign and 84 malicious apps. Every assigned opcode
/// has an integer base mean between 1 and 12; malicious apps of cohort `k`
/// add [`PLANTED_GAP`] on [`PLANTED_PER_GROUP`] opcodes unique to `k`.
pub fn planted_benchmark(seed: u64) -> SyntheticSpec {
    let used: Vec<usize> = Opcode::all()
        .filter(|o| !o.is_unused())
        .map(|o| o.0 as usize)
        .collect();
    let mut base = vec![0.0; BUCKETS];
    for &o in &used {
        base[o] = (1 + seeds::derive(&[seed, 0xba5e, o as u64]) % 12) as f64;
    }
    let groups = GroupId::pipeline_groups(false);
    let cohorts = groups
        .iter()
        .enumerate()
        .map(|(k, &g)| {
            let mut malicious = base.clone();
            for j in 0..PLANTED_PER_GROUP {
                malicious[used[(k * PLANTED_PER_GROUP + j) * 2 % used.len()]] += PLANTED_GAP;
            }
            Cohort {
                name: g.name().to_ascii_lowercase(),
                groups: BTreeSet::from([g]),
                benign: 83,
                malicious: 84,
                benign_mean: base.clone(),
                malicious_mean: malicious,
            }
        })
        .collect();
    SyntheticSpec {
        cohorts,
        dispersion: 0.25,
        templates: BTreeMap::new(),
        seed,
    }
}

fn package_name(app_id: &str) -> String {
    format!("org.synthetic.{}", app_id.replace('-', "_"))
}

/// Writes every app under `dir/apps/` and returns a manifest with paths
/// relative to `dir`.
pub fn materialize(
    apps: &[SyntheticApp],
    dir: &Path,
    format: AppFormat,
) -> Result<CorpusManifest, CorpusError> {
    let apps_dir = dir.join("apps");
    std::fs::create_dir_all(&apps_dir).map_err(io_err(&apps_dir))?;
    let entries = apps
        .par_iter()
        .map(|app| {
            let r = &app.record;
            let package = package_name(&r.app_id);
            let rel = match format {
                AppFormat::Apk => {
                    let rel = format!("apps/{}.apk", r.app_id);
                    let manifest = encode_manifest(&package, &r.permissions, StringEncoding::Utf16);
                    let dex = dex_for_histogram(&r.histogram);
                    let bytes =
                        write_apk(&[("AndroidManifest.xml", &manifest), ("classes.dex", &dex)])
                            .map_err(|e| CorpusError::InvalidSpec(e.to_string()))?;
                    write_atomic(&dir.join(&rel), &bytes)?;
                    rel
                }
                AppFormat::Smali | AppFormat::Dex => {
                    let rel = format!("apps/{}", r.app_id);
                    let root = dir.join(&rel);
                    let text = render_manifest_text(&package, &r.permissions);
                    write_atomic(&root.join("AndroidManifest.xml"), text.as_bytes())?;
                    if format == AppFormat::Smali {
                        let class = render_class("org/synthetic/Main", &r.histogram);
                        write_atomic(
                            &root.join("smali/org/synthetic/Main.smali"),
                            class.as_bytes(),
                        )?;
                    } else {
                        write_atomic(&root.join("classes.dex"), &dex_for_histogram(&r.histogram))?;
                    }
                    rel
                }
            };
            Ok(ManifestEntry {
                app_id: r.app_id.clone(),
                label: r.label,
                path: Some(rel),
                hist_ref: None,
                perms_ref: None,
            })
        })
        .collect::<Result<Vec<_>, CorpusError>>()?;
    Ok(CorpusManifest { entries })
}
