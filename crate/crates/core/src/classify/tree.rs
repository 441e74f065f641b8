use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::naive_bayes::NbTable;
use super::{Dataset, Hyperparameters, Label};
use crate::seeds;

/// Class counts at a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassDist {
    pub benign: u32,
    pub malicious: u32,
}

impl ClassDist {
    pub fn total(self) -> u32 {
        self.benign + self.malicious
    }

    pub fn add(&mut self, label: Label) {
        match label {
            Label::Benign => self.benign += 1,
            Label::Malicious => self.malicious += 1,
        }
    }

    pub fn is_pure(self) -> bool {
        self.benign == 0 || self.malicious == 0
    }

    pub fn majority(self) -> Label {
        if self.malicious > self.benign {
            Label::Malicious
        } else {
            Label::Benign
        }
    }

    pub fn malicious_probability(self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => f64::from(self.malicious) / f64::from(t),
        }
    }

    fn entropy(self) -> f64 {
        entropy2(f64::from(self.benign), f64::from(self.malicious))
    }
}

fn entropy2(a: f64, b: f64) -> f64 {
    let t = a + b;
    let term = |c: f64| {
        if c > 0.0 {
            -(c / t) * (c / t).log2()
        } else {
            0.0
        }
    };
    if t == 0.0 {
        0.0
    } else {
        term(a) + term(b)
    }
}

/// Information gain and gain ratio of splitting `parent` into `left` and `right`.
/// The ratio is zero when either side is empty.
pub fn gain_ratio(parent: ClassDist, left: ClassDist, right: ClassDist) -> (f64, f64) {
    let n = f64::from(parent.total());
    let (nl, nr) = (f64::from(left.total()), f64::from(right.total()));
    if nl == 0.0 || nr == 0.0 {
        return (0.0, 0.0);
    }
    let gain = parent.entropy() - (nl / n) * left.entropy() - (nr / n) * right.entropy();
    let split_info = entropy2(nl, nr);
    (gain, gain / split_info)
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Leaf,
    /// `x[feature] <= threshold` goes left.
    Split {
        feature: u16,
        threshold: f64,
        left: u32,
        right: u32,
    },
    NbLeaf(NbTable),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub dist: ClassDist,
    pub kind: NodeKind,
}

/// Nodes in pre-order; the root is index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    fn leaf_for(&self, x: &[f64]) -> &Node {
        let mut i = 0usize;
        loop {
            let node = &self.nodes[i];
            match node.kind {
                NodeKind::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[feature as usize] <= threshold {
                        left as usize
                    } else {
                        right as usize
                    };
                }
                _ => return node,
            }
        }
    }

    pub fn malicious_probability(&self, x: &[f64]) -> f64 {
        let node = self.leaf_for(x);
        match &node.kind {
            NodeKind::NbLeaf(table) => table.malicious_probability(x),
            _ => node.dist.malicious_probability(),
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match t.nodes[i].kind {
                NodeKind::Split { left, right, .. } => {
                    1 + go(t, left as usize).max(go(t, right as usize))
                }
                _ => 0,
            }
        }
        go(self, 0)
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.kind, NodeKind::Split { .. }))
            .count()
    }
}

pub(crate) struct GrowConfig {
    min_leaf: usize,
    /// Random feature subset size per split (forest).
    subset: Option<usize>,
    /// Nodes smaller than this become naive Bayes leaves.
    nb_threshold: Option<usize>,
}

impl GrowConfig {
    pub fn single(h: &Hyperparameters) -> Self {
        Self {
            min_leaf: h.min_leaf.max(1),
            subset: None,
            nb_threshold: None,
        }
    }

    pub fn forest(h: &Hyperparameters, k: usize) -> Self {
        Self {
            min_leaf: h.min_leaf.max(1),
            subset: Some(k),
            nb_threshold: None,
        }
    }

    pub fn nb_tree(h: &Hyperparameters) -> Self {
        Self {
            min_leaf: h.min_leaf.max(1),
            subset: None,
            nb_threshold: Some(h.nb_leaf_threshold),
        }
    }
}

struct Candidate {
    ratio: f64,
    feature: usize,
    threshold: f64,
}

fn dist_of(data: &Dataset, idx: &[usize]) -> ClassDist {
    let mut d = ClassDist::default();
    for &i in idx {
        d.add(data.labels[i]);
    }
    d
}

/// Best threshold on one feature, or `None` if no admissible split has
/// positive gain. Earlier thresholds win ties.
fn best_on_feature(
    data: &Dataset,
    idx: &[usize],
    parent: ClassDist,
    feature: usize,
    min_leaf: usize,
    scratch: &mut Vec<(f64, Label)>,
) -> Option<(f64, f64)> {
    scratch.clear();
    scratch.extend(idx.iter().map(|&i| (data.rows[i][feature], data.labels[i])));
    scratch.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = scratch.len();
    let mut left = ClassDist::default();
    let mut best: Option<(f64, f64)> = None;
    for i in 0..n - 1 {
        left.add(scratch[i].1);
        let (lo, hi) = (scratch[i].0, scratch[i + 1].0);
        if lo == hi {
            continue;
        }
        let nl = i + 1;
        if nl < min_leaf || n - nl < min_leaf {
            continue;
        }
        let right = ClassDist {
            benign: parent.benign - left.benign,
            malicious: parent.malicious - left.malicious,
        };
        let (gain, ratio) = gain_ratio(parent, left, right);
        if gain <= 1e-12 {
            continue;
        }
        if best.is_none_or(|(r, _)| ratio > r) {
            let mut t = lo + (hi - lo) / 2.0;
            if t >= hi {
                t = lo;
            }
            best = Some((ratio, t));
        }
    }
    best
}

struct Grower<'a> {
    data: &'a Dataset,
    cfg: &'a GrowConfig,
    rng: Option<&'a mut ChaCha8Rng>,
    nodes: Vec<Node>,
    scratch: Vec<(f64, Label)>,
}

impl Grower<'_> {
    fn leaf(&self, idx: &[usize], dist: ClassDist) -> Node {
        let kind = match self.cfg.nb_threshold {
            Some(_) => NodeKind::NbLeaf(NbTable::fit(self.data, idx)),
            None => NodeKind::Leaf,
        };
        Node { dist, kind }
    }

    fn split_candidates(&mut self) -> Vec<usize> {
        let nf = self.data.n_features;
        match (self.cfg.subset, self.rng.as_deref_mut()) {
            (Some(k), Some(rng)) if k < nf => {
                let mut v = index::sample(rng, nf, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..nf).collect(),
        }
    }

    fn build(&mut self, idx: &mut [usize]) -> u32 {
        let at = self.nodes.len() as u32;
        let dist = dist_of(self.data, idx);
        let n = idx.len();
        let too_small = n < 2 * self.cfg.min_leaf || self.cfg.nb_threshold.is_some_and(|t| n < t);
        if dist.is_pure() || too_small {
            let leaf = self.leaf(idx, dist);
            self.nodes.push(leaf);
            return at;
        }

        let features = self.split_candidates();
        let mut best: Option<Candidate> = None;
        for f in features {
            let found = best_on_feature(
                self.data,
                idx,
                dist,
                f,
                self.cfg.min_leaf,
                &mut self.scratch,
            );
            if let Some((ratio, threshold)) = found {
                if best.as_ref().is_none_or(|b| ratio > b.ratio) {
                    best = Some(Candidate {
                        ratio,
                        feature: f,
                        threshold,
                    });
                }
            }
        }
        let Some(best) = best else {
            let leaf = self.leaf(idx, dist);
            self.nodes.push(leaf);
            return at;
        };

        self.nodes.push(Node {
            dist,
            kind: NodeKind::Leaf,
        });
        let f = best.feature;
        let t = best.threshold;
        let mid = partition(idx, |&i| self.data.rows[i][f] <= t);
        let (l, r) = idx.split_at_mut(mid);
        let left = self.build(l);
        let right = self.build(r);
        self.nodes[at as usize].kind = NodeKind::Split {
            feature: f as u16,
            threshold: t,
            left,
            right,
        };
        at
    }
}

/// Stable in-place partition; returns the count satisfying `pred`.
fn partition(idx: &mut [usize], pred: impl Fn(&usize) -> bool) -> usize {
    let (yes, no): (Vec<usize>, Vec<usize>) = idx.iter().partition(|i| pred(i));
    let k = yes.len();
    idx[..k].copy_from_slice(&yes);
    idx[k..].copy_from_slice(&no);
    k
}

pub(crate) fn grow(
    data: &Dataset,
    sample: &[usize],
    cfg: &GrowConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Tree {
    let mut idx = sample.to_vec();
    let mut g = Grower {
        data,
        cfg,
        rng,
        nodes: Vec::new(),
        scratch: Vec::with_capacity(sample.len()),
    };
    g.build(&mut idx);
    Tree { nodes: g.nodes }
}

/// Grows on a seeded two-thirds of the data and prunes with the rest:
/// a subtree becomes a leaf when that does not increase errors on the
/// held-out third.
pub(crate) fn grow_pruned(data: &Dataset, sample: &[usize], cfg: &GrowConfig, seed: u64) -> Tree {
    if sample.len() < 3 {
        return grow(data, sample, cfg, None);
    }
    let mut shuffled = sample.to_vec();
    let mut rng = seeds::rng(&[seed]);
    for i in (1..shuffled.len()).rev() {
        shuffled.swap(i, rng.random_range(0..=i));
    }
    let cut = shuffled.len() * 2 / 3;
    let (grow_set, prune_set) = shuffled.split_at(cut);
    let mut tree = grow(data, grow_set, cfg, None);
    prune_node(&mut tree, 0, data, prune_set);
    compact(&tree)
}

/// Returns held-out errors of the (possibly pruned) subtree at `i`.
fn prune_node(tree: &mut Tree, i: usize, data: &Dataset, held: &[usize]) -> usize {
    let node = &tree.nodes[i];
    let as_leaf = held
        .iter()
        .filter(|&&s| data.labels[s] != node.dist.majority())
        .count();
    let NodeKind::Split {
        feature,
        threshold,
        left,
        right,
    } = node.kind
    else {
        return as_leaf;
    };
    let (l, r): (Vec<usize>, Vec<usize>) = held
        .iter()
        .partition(|&&s| data.rows[s][feature as usize] <= threshold);
    let subtree =
        prune_node(tree, left as usize, data, &l) + prune_node(tree, right as usize, data, &r);
    if as_leaf <= subtree {
        tree.nodes[i].kind = NodeKind::Leaf;
        as_leaf
    } else {
        subtree
    }
}

/// Drops nodes unreachable from the root and renumbers in pre-order.
fn compact(tree: &Tree) -> Tree {
    fn copy(src: &Tree, i: usize, out: &mut Vec<Node>) -> u32 {
        let at = out.len() as u32;
        out.push(src.nodes[i].clone());
        if let NodeKind::Split {
            feature,
            threshold,
            left,
            right,
        } = src.nodes[i].kind
        {
            let l = copy(src, left as usize, out);
            let r = copy(src, right as usize, out);
            out[at as usize].kind = NodeKind::Split {
                feature,
                threshold,
                left: l,
                right: r,
            };
        }
        at
    }
    let mut out = Vec::new();
    copy(tree, 0, &mut out);
    Tree { nodes: out }
}
