//! Supervised classifiers over selected opcode features.
//!
//! Three model kinds share one interface:
//!
//! * [`ModelKind::Tree`]: a C4.5-style tree. Binary splits on numeric
//!   thresholds (midpoints between adjacent distinct values), chosen by
//!   information gain ratio, grown until a node is pure, too small to split
//!   into two leaves of `min_leaf`, or no split has positive gain. Optional
//!   reduced-error pruning.
//! * [`ModelKind::Forest`]: `n_trees` trees on bootstrap samples, each split
//!   drawn from a fresh uniform subset of `⌈√n⌉` features; majority vote.
//! * [`ModelKind::NbTree`]: the same growth, but nodes with fewer than
//!   `nb_leaf_threshold` samples stop and every leaf holds a Gaussian naive
//!   Bayes table fitted to its samples.
//!
//! Prediction ties resolve to [`Label::Benign`].

mod codec;
mod naive_bayes;
mod tree;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::histogram::OpcodeHistogram;
use crate::opcodes::Opcode;
use crate::seeds;
use crate::selection::FrequencyMode;

pub use codec::{deserialize_model, serialize_model, MODEL_MAGIC, MODEL_VERSION};
pub use naive_bayes::NbTable;
pub use tree::{gain_ratio, ClassDist, Node, NodeKind, Tree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Benign,
    Malicious,
}

impl Label {
    pub fn name(self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Malicious => "malicious",
        }
    }

    pub(crate) fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "benign" | "b" | "0" => Ok(Label::Benign),
            "malicious" | "m" | "1" => Ok(Label::Malicious),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModelKind {
    Tree,
    Forest,
    NbTree,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Tree, ModelKind::Forest, ModelKind::NbTree];

    /// Short column label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Tree => "J48",
            ModelKind::Forest => "RF",
            ModelKind::NbTree => "NBT",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Tree => "tree",
            ModelKind::Forest => "forest",
            ModelKind::NbTree => "nb-tree",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        self as u8
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tree" | "j48" => Ok(ModelKind::Tree),
            "forest" | "rf" => Ok(ModelKind::Forest),
            "nb-tree" | "nbtree" | "nbt" => Ok(ModelKind::NbTree),
            other => Err(format!("unknown classifier kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Hyperparameters {
    pub min_leaf: usize,
    /// Reduced-error pruning for single trees.
    pub prune: bool,
    pub n_trees: usize,
    /// Features tried per forest split; `None` means `⌈√n⌉`.
    pub features_per_split: Option<usize>,
    /// Nb-tree nodes smaller than this become naive Bayes leaves.
    pub nb_leaf_threshold: usize,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            min_leaf: 2,
            prune: false,
            n_trees: 100,
            features_per_split: None,
            nb_leaf_threshold: 30,
        }
    }
}

impl Hyperparameters {
    pub fn describe(&self) -> String {
        format!(
            "min_leaf={} prune={} n_trees={} features_per_split={} nb_leaf_threshold={}",
            self.min_leaf,
            self.prune,
            self.n_trees,
            self.features_per_split
                .map(|k| k.to_string())
                .unwrap_or_else(|| "sqrt".into()),
            self.nb_leaf_threshold
        )
    }
}

/// Opcode values projected onto a feature list, in ranking order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub label: Option<Label>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, label: Option<Label>) -> Self {
        Self { values, label }
    }

    pub fn project(
        hist: &OpcodeHistogram,
        features: &[Opcode],
        mode: FrequencyMode,
        label: Option<Label>,
    ) -> Self {
        let values = features
            .iter()
            .map(|op| mode.value(hist, op.0 as usize))
            .collect();
        Self { values, label }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClassifyError {
    #[error("training data is empty")]
    EmptyData,
    #[error("training data holds a single class")]
    SingleClassData,
    #[error("training vector {index} is unlabeled")]
    Unlabeled { index: usize },
    #[error("vector {index} has {found} values, expected {expected}")]
    InconsistentDimensions {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("vector has {found} values, model expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("feature list is empty or longer than 65535")]
    BadFeatureList,
    #[error("corrupt model: {0}")]
    CorruptModel(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelBody {
    Tree(Tree),
    /// `(per-tree seed, tree)`; the seed drives bootstrap and feature subsets.
    Forest(Vec<(u64, Tree)>),
    NbTree(Tree),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub kind: ModelKind,
    pub features: Vec<Opcode>,
    pub hyper: Hyperparameters,
    pub seed: u64,
    /// How histograms are turned into feature values at prediction time.
    pub mode: FrequencyMode,
    pub body: ModelBody,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: Label,
    /// Support for `label`: leaf probability or vote fraction.
    pub score: f64,
}

impl Prediction {
    pub(crate) fn from_malicious_probability(p: f64) -> Self {
        if p > 0.5 {
            Prediction {
                label: Label::Malicious,
                score: p,
            }
        } else {
            Prediction {
                label: Label::Benign,
                score: 1.0 - p,
            }
        }
    }
}

/// Column-major training set with labels as class indices.
pub(crate) struct Dataset {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
    pub n_features: usize,
}

fn validate(data: &[FeatureVector], n_features: usize) -> Result<Dataset, ClassifyError> {
    if data.is_empty() {
        return Err(ClassifyError::EmptyData);
    }
    if n_features == 0 || n_features > u16::MAX as usize {
        return Err(ClassifyError::BadFeatureList);
    }
    let mut labels = Vec::with_capacity(data.len());
    for (index, v) in data.iter().enumerate() {
        if v.values.len() != n_features {
            return Err(ClassifyError::InconsistentDimensions {
                index,
                expected: n_features,
                found: v.values.len(),
            });
        }
        labels.push(v.label.ok_or(ClassifyError::Unlabeled { index })?);
    }
    let has = |l: Label| labels.contains(&l);
    if !has(Label::Benign) || !has(Label::Malicious) {
        return Err(ClassifyError::SingleClassData);
    }
    Ok(Dataset {
        rows: data.iter().map(|v| v.values.clone()).collect(),
        labels,
        n_features,
    })
}

/// Trains a model. `features` names the opcodes behind each vector position.
pub fn train(
    kind: ModelKind,
    features: &[Opcode],
    data: &[FeatureVector],
    hyper: &Hyperparameters,
    seed: u64,
) -> Result<TrainedModel, ClassifyError> {
    let dataset = validate(data, features.len())?;
    let all: Vec<usize> = (0..dataset.rows.len()).collect();
    let body = match kind {
        ModelKind::Tree => {
            let cfg = tree::GrowConfig::single(hyper);
            let tree = if hyper.prune {
                tree::grow_pruned(&dataset, &all, &cfg, seeds::derive(&[seed, 0x7072_756e]))
            } else {
                tree::grow(&dataset, &all, &cfg, None)
            };
            ModelBody::Tree(tree)
        }
        ModelKind::NbTree => {
            let cfg = tree::GrowConfig::nb_tree(hyper);
            ModelBody::NbTree(tree::grow(&dataset, &all, &cfg, None))
        }
        ModelKind::Forest => {
            let k = hyper
                .features_per_split
                .unwrap_or_else(|| (dataset.n_features as f64).sqrt().ceil() as usize)
                .clamp(1, dataset.n_features);
            let cfg = tree::GrowConfig::forest(hyper, k);
            let n = dataset.rows.len();
            let trees = (0..hyper.n_trees.max(1) as u64)
                .into_par_iter()
                .map(|t| {
                    let tree_seed = seeds::derive(&[seed, t]);
                    let mut rng = seeds::rng(&[tree_seed]);
                    let sample: Vec<usize> = (0..n)
                        .map(|_| rand::Rng::random_range(&mut rng, 0..n))
                        .collect();
                    (
                        tree_seed,
                        tree::grow(&dataset, &sample, &cfg, Some(&mut rng)),
                    )
                })
                .collect();
            ModelBody::Forest(trees)
        }
    };
    Ok(TrainedModel {
        kind,
        features: features.to_vec(),
        hyper: *hyper,
        seed,
        mode: FrequencyMode::RawCount,
        body,
    })
}

impl TrainedModel {
    pub fn with_mode(mut self, mode: FrequencyMode) -> Self {
        self.mode = mode;
        self
    }

    /// Projects `hist` onto the model's features and predicts.
    pub fn predict_histogram(&self, hist: &OpcodeHistogram) -> Prediction {
        let x = FeatureVector::project(hist, &self.features, self.mode, None);
        self.predict_values(&x.values)
            .expect("projection matches the feature count")
    }

    pub fn predict(&self, x: &FeatureVector) -> Result<Prediction, ClassifyError> {
        self.predict_values(&x.values)
    }

    pub fn predict_values(&self, x: &[f64]) -> Result<Prediction, ClassifyError> {
        if x.len() != self.features.len() {
            return Err(ClassifyError::DimensionMismatch {
                expected: self.features.len(),
                found: x.len(),
            });
        }
        Ok(match &self.body {
            ModelBody::Tree(t) | ModelBody::NbTree(t) => {
                Prediction::from_malicious_probability(t.malicious_probability(x))
            }
            ModelBody::Forest(trees) => {
                let votes = trees
                    .iter()
                    .filter(|(_, t)| {
                        Prediction::from_malicious_probability(t.malicious_probability(x)).label
                            == Label::Malicious
                    })
                    .count();
                let total = trees.len();
                if 2 * votes > total {
                    Prediction {
                        label: Label::Malicious,
                        score: votes as f64 / total as f64,
                    }
                } else {
                    Prediction {
                        label: Label::Benign,
                        score: (total - votes) as f64 / total as f64,
                    }
                }
            }
        })
    }

    pub fn trees(&self) -> Vec<&Tree> {
        match &self.body {
            ModelBody::Tree(t) | ModelBody::NbTree(t) => vec![t],
            ModelBody::Forest(trees) => trees.iter().map(|(_, t)| t).collect(),
        }
    }
}
