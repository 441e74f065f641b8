//! Holdout experiments per permission group.
//!
//! For each group the bucket is split once (stratified by label), opcodes
//! are ranked on the training part, and every `(kind, n)` cell trains on the
//! top `n` opcodes and scores the held-out apps.

mod report;

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::classify::{self, ClassifyError, FeatureVector, Hyperparameters, Label, ModelKind};
use crate::corpus::AppRecord;
use crate::groups::{GroupId, Grouper};
use crate::seeds;
use crate::selection::{self, FeatureRanking, FrequencyMode, SelectionError};

pub use report::{ReportFormatError, REPORT_HEADER};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{label} has {count} apps, at least 2 are needed to split")]
    TooSmallForSplit { label: &'static str, count: usize },
    #[error("test fraction {0} is outside (0, 1)")]
    InvalidFraction(f64),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error("no group has both classes on both sides of its split")]
    NoTrainableGroup,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            seed: 0,
            stratified: true,
        }
    }
}

/// Test-set size for a stratum of `n`: `floor(fraction * n)`, kept inside
/// `1..=n-1` so neither side is empty.
pub fn test_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).floor() as usize).clamp(1, n - 1)
}

/// Splits `(app_id, label)` pairs into `(train, test)` id lists. The result
/// depends only on the set of pairs and the seed, not on input order.
pub fn split(
    bucket: &[(String, Label)],
    spec: &SplitSpec,
) -> Result<(Vec<String>, Vec<String>), EvalError> {
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(EvalError::InvalidFraction(spec.test_fraction));
    }
    let mut sorted: Vec<&(String, Label)> = bucket.iter().collect();
    sorted.sort();
    let strata: Vec<(&'static str, Vec<&String>)> = if spec.stratified {
        [Label::Benign, Label::Malicious]
            .into_iter()
            .map(|l| {
                (
                    l.name(),
                    sorted
                        .iter()
                        .filter(|(_, x)| *x == l)
                        .map(|(id, _)| id)
                        .collect(),
                )
            })
            .collect()
    } else {
        vec![("bucket", sorted.iter().map(|(id, _)| id).collect())]
    };

    let mut rng = seeds::rng(&[spec.seed]);
    let mut test = BTreeSet::new();
    for (label, mut ids) in strata {
        if ids.len() < 2 {
            return Err(EvalError::TooSmallForSplit {
                label,
                count: ids.len(),
            });
        }
        let k = test_count(ids.len(), spec.test_fraction);
        // Partial Fisher-Yates: the first k slots become the test draw.
        for i in 0..k {
            let j = rng.random_range(i..ids.len());
            ids.swap(i, j);
        }
        test.extend(ids[..k].iter().map(|s| s.as_str()));
    }
    let mut train_ids = Vec::new();
    let mut test_ids = Vec::new();
    for (id, _) in bucket {
        if test.contains(id.as_str()) {
            test_ids.push(id.clone());
        } else {
            train_ids.push(id.clone());
        }
    }
    Ok((train_ids, test_ids))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn record(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::Malicious, Label::Malicious) => self.tp += 1,
            (Label::Benign, Label::Benign) => self.tn += 1,
            (Label::Benign, Label::Malicious) => self.fp += 1,
            (Label::Malicious, Label::Benign) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// `(tp + tn) / total * 100`; zero for an empty test set.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => (self.tp + self.tn) as f64 / t as f64 * 100.0,
        }
    }

    /// Malicious detection rate `tp / (tp + fn)`.
    pub fn tp_rate(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Benign detection rate `tn / (tn + fp)`.
    pub fn tn_rate(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }
}

fn ratio(a: u64, b: u64) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub group: GroupId,
    pub kind: ModelKind,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMetrics {
    pub train_size: usize,
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub tp_rate: Option<f64>,
    pub tn_rate: Option<f64>,
}

impl CellMetrics {
    pub fn from_counts(train_size: usize, counts: ConfusionCounts) -> Self {
        Self {
            train_size,
            counts,
            accuracy: counts.accuracy(),
            tp_rate: counts.tp_rate(),
            tn_rate: counts.tn_rate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellOutcome {
    Done(CellMetrics),
    Skipped(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub test_fraction: f64,
    pub stratified: bool,
    pub seed: u64,
    pub kinds: Vec<ModelKind>,
    pub n_list: Vec<usize>,
    pub mode: FrequencyMode,
    /// Rank opcodes over the whole bucket instead of the training part.
    pub include_test_in_selection: bool,
    pub include_sensors: bool,
    pub hyper: Hyperparameters,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            stratified: true,
            seed: 0,
            kinds: ModelKind::ALL.to_vec(),
            n_list: default_n_list(),
            mode: FrequencyMode::RawCount,
            include_test_in_selection: false,
            include_sensors: false,
            hyper: Hyperparameters::default(),
        }
    }
}

/// 20, 40, ..., 200.
pub fn default_n_list() -> Vec<usize> {
    (1..=10).map(|i| i * 20).collect()
}

impl EvalConfig {
    pub fn split_spec(&self, group: GroupId) -> SplitSpec {
        SplitSpec {
            test_fraction: self.test_fraction,
            seed: seeds::derive(&[self.seed, seeds::key(group.name())]),
            stratified: self.stratified,
        }
    }

    pub fn model_seed(&self, key: CellKey) -> u64 {
        seeds::derive(&[
            self.seed,
            seeds::key(key.group.name()),
            u64::from(key.kind.tag()),
            key.n as u64,
        ])
    }

    /// Resolved settings as `key=value` pairs for artifact headers.
    pub fn echo(&self) -> Vec<(String, String)> {
        let join = |v: Vec<String>| v.join(",");
        vec![
            ("seed".into(), self.seed.to_string()),
            ("test_fraction".into(), self.test_fraction.to_string()),
            ("stratified".into(), self.stratified.to_string()),
            (
                "kinds".into(),
                join(self.kinds.iter().map(|k| k.name().to_string()).collect()),
            ),
            (
                "n_list".into(),
                join(self.n_list.iter().map(|n| n.to_string()).collect()),
            ),
            ("frequency".into(), self.mode.name().into()),
            (
                "include_test_in_selection".into(),
                self.include_test_in_selection.to_string(),
            ),
            ("include_sensors".into(), self.include_sensors.to_string()),
            ("hyperparameters".into(), self.hyper.describe()),
        ]
    }
}

/// One group's split and ranking, shared by all of its cells.
struct GroupPlan<'a> {
    train: Vec<&'a AppRecord>,
    test: Vec<&'a AppRecord>,
    ranking: FeatureRanking,
}

fn plan_group<'a>(
    group: GroupId,
    bucket: &[&'a AppRecord],
    config: &EvalConfig,
) -> Result<GroupPlan<'a>, EvalError> {
    let pairs: Vec<(String, Label)> = bucket.iter().map(|a| (a.app_id.clone(), a.label)).collect();
    let (_, test_ids) = split(&pairs, &config.split_spec(group))?;
    let test_ids: BTreeSet<&str> = test_ids.iter().map(String::as_str).collect();
    let (test, train): (Vec<&AppRecord>, Vec<&AppRecord>) = bucket
        .iter()
        .partition(|a| test_ids.contains(a.app_id.as_str()));
    let pool: &[&AppRecord] = if config.include_test_in_selection {
        bucket
    } else {
        &train
    };
    let of = |l: Label| {
        pool.iter()
            .filter(move |a| a.label == l)
            .map(|a| &a.histogram)
    };
    let profile = selection::compute_profile(of(Label::Benign), of(Label::Malicious), config.mode)?;
    Ok(GroupPlan {
        train,
        test,
        ranking: selection::rank_features(&profile),
    })
}

fn run_cell(
    plan: &GroupPlan<'_>,
    key: CellKey,
    config: &EvalConfig,
) -> Result<CellMetrics, EvalError> {
    let features = selection::top_n(&plan.ranking, key.n)?;
    let project =
        |a: &AppRecord| FeatureVector::project(&a.histogram, &features, config.mode, Some(a.label));
    let train: Vec<FeatureVector> = plan.train.iter().map(|a| project(a)).collect();
    let model = classify::train(
        key.kind,
        &features,
        &train,
        &config.hyper,
        config.model_seed(key),
    )?;
    let mut counts = ConfusionCounts::default();
    for app in &plan.test {
        let p = model.predict(&project(app))?;
        counts.record(app.label, p.label);
    }
    Ok(CellMetrics::from_counts(plan.train.len(), counts))
}

/// Evaluates one cell on a group bucket from scratch.
pub fn evaluate_cell(
    group: GroupId,
    kind: ModelKind,
    n: usize,
    bucket: &[&AppRecord],
    config: &EvalConfig,
) -> CellOutcome {
    let key = CellKey { group, kind, n };
    match plan_group(group, bucket, config).and_then(|plan| run_cell(&plan, key, config)) {
        Ok(m) => CellOutcome::Done(m),
        Err(e) => CellOutcome::Skipped(e.to_string()),
    }
}

/// Buckets apps by group under `grouper`, in corpus order.
pub fn group_buckets<'a>(
    apps: &'a [AppRecord],
    grouper: &Grouper,
) -> BTreeMap<GroupId, Vec<&'a AppRecord>> {
    let mut buckets: BTreeMap<GroupId, Vec<&AppRecord>> = BTreeMap::new();
    for app in apps {
        for g in grouper.assign_groups(&app.permissions) {
            buckets.entry(g).or_default().push(app);
        }
    }
    buckets
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    /// Resolved configuration, echoed into every rendering.
    pub config: Vec<(String, String)>,
    pub groups: Vec<GroupId>,
    pub kinds: Vec<ModelKind>,
    pub n_list: Vec<usize>,
    pub cells: BTreeMap<CellKey, CellOutcome>,
}

/// The best cell of one group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupBest {
    pub key: CellKey,
    pub metrics: CellMetrics,
}

impl EvaluationReport {
    pub fn metrics(&self, key: CellKey) -> Option<&CellMetrics> {
        match self.cells.get(&key)? {
            CellOutcome::Done(m) => Some(m),
            CellOutcome::Skipped(_) => None,
        }
    }

    /// Mean accuracy over the groups where `(kind, n)` ran, each group
    /// weighted equally.
    pub fn average_accuracy(&self, kind: ModelKind, n: usize) -> Option<f64> {
        let accs: Vec<f64> = self
            .groups
            .iter()
            .filter_map(|&group| self.metrics(CellKey { group, kind, n }))
            .map(|m| m.accuracy)
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    /// Highest-accuracy cell of a group. Ties go to fewer features, then to
    /// the earlier kind in the report's kind order.
    pub fn group_best(&self, group: GroupId) -> Option<GroupBest> {
        let mut best: Option<GroupBest> = None;
        for &n in &self.n_list {
            for &kind in &self.kinds {
                let key = CellKey { group, kind, n };
                if let Some(m) = self.metrics(key) {
                    if best.is_none_or(|b| m.accuracy > b.metrics.accuracy) {
                        best = Some(GroupBest { key, metrics: *m });
                    }
                }
            }
        }
        best
    }

    /// Mean of the per-group best accuracies over groups that ran.
    pub fn overall_best_average(&self) -> Option<f64> {
        let bests: Vec<f64> = self
            .groups
            .iter()
            .filter_map(|&g| self.group_best(g))
            .map(|b| b.metrics.accuracy)
            .collect();
        (!bests.is_empty()).then(|| bests.iter().sum::<f64>() / bests.len() as f64)
    }

    pub fn skipped(&self) -> impl Iterator<Item = (&CellKey, &str)> {
        self.cells.iter().filter_map(|(k, c)| match c {
            CellOutcome::Skipped(r) => Some((k, r.as_str())),
            CellOutcome::Done(_) => None,
        })
    }
}

/// Runs every `(group, kind, n)` cell. Groups come from
/// [`GroupId::pipeline_groups`]; a group that cannot be split or ranked has
/// all of its cells recorded as skipped.
pub fn sweep(
    apps: &[AppRecord],
    grouper: &Grouper,
    config: &EvalConfig,
) -> Result<EvaluationReport, EvalError> {
    let groups = GroupId::pipeline_groups(config.include_sensors);
    let buckets = group_buckets(apps, grouper);
    let empty = Vec::new();

    let plans: Vec<(GroupId, Result<GroupPlan<'_>, EvalError>)> = groups
        .par_iter()
        .map(|&g| (g, plan_group(g, buckets.get(&g).unwrap_or(&empty), config)))
        .collect();
    if plans.iter().all(|(_, p)| p.is_err()) {
        return Err(EvalError::NoTrainableGroup);
    }

    let jobs: Vec<(CellKey, &Result<GroupPlan<'_>, EvalError>)> = plans
        .iter()
        .flat_map(|(group, plan)| {
            config.kinds.iter().flat_map(move |&kind| {
                config.n_list.iter().map(move |&n| {
                    (
                        CellKey {
                            group: *group,
                            kind,
                            n,
                        },
                        plan,
                    )
                })
            })
        })
        .collect();
    let cells: BTreeMap<CellKey, CellOutcome> = jobs
        .into_par_iter()
        .map(|(key, plan)| {
            let outcome = match plan {
                Err(e) => CellOutcome::Skipped(e.to_string()),
                Ok(plan) => match run_cell(plan, key, config) {
                    Ok(m) => CellOutcome::Done(m),
                    Err(e) => CellOutcome::Skipped(e.to_string()),
                },
            };
            (key, outcome)
        })
        .collect();

    Ok(EvaluationReport {
        config: config.echo(),
        groups,
        kinds: config.kinds.clone(),
        n_list: config.n_list.clone(),
        cells,
    })
}
