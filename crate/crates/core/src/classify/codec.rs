//! Binary model format.
//!
//! Little-endian throughout:
//!
//! ```text
//! "OPDM" version:u16 kind:u8 seed:u64 mode:u8 (0 raw, 1 relative)
//! min_leaf:u32 prune:u8 n_trees:u32 features_per_split:u32 (0 = sqrt) nb_leaf_threshold:u32
//! n_features:u16 opcode:u8 * n_features
//! tree                          (tree, nb-tree)
//! n:u32 (seed:u64 tree) * n     (forest)
//!
//! tree := n_nodes:u32 node * n_nodes, pre-order
//! node := tag:u8 benign:u32 malicious:u32 body
//!   tag 0 leaf   body empty
//!   tag 1 split  feature:u16 threshold:f64 left:u32 right:u32
//!   tag 2 nb     count_b:u32 count_m:u32 (mean:f64 * F, var:f64 * F) * 2
//! ```

use super::tree::{ClassDist, Node, NodeKind, Tree};
use super::{ClassifyError, Hyperparameters, ModelBody, ModelKind, NbTable, TrainedModel};
use crate::opcodes::Opcode;
use crate::selection::FrequencyMode;

pub const MODEL_MAGIC: &[u8; 4] = b"OPDM";
pub const MODEL_VERSION: u16 = 1;

pub fn serialize_model(model: &TrainedModel) -> Vec<u8> {
    let mut w = Vec::new();
    w.extend_from_slice(MODEL_MAGIC);
    w.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    w.push(model.kind.tag());
    w.extend_from_slice(&model.seed.to_le_bytes());
    w.push(match model.mode {
        FrequencyMode::RawCount => 0,
        FrequencyMode::Relative => 1,
    });
    let h = &model.hyper;
    put_u32(&mut w, h.min_leaf as u32);
    w.push(u8::from(h.prune));
    put_u32(&mut w, h.n_trees as u32);
    put_u32(&mut w, h.features_per_split.unwrap_or(0) as u32);
    put_u32(&mut w, h.nb_leaf_threshold as u32);
    w.extend_from_slice(&(model.features.len() as u16).to_le_bytes());
    w.extend(model.features.iter().map(|op| op.0));
    match &model.body {
        ModelBody::Tree(t) | ModelBody::NbTree(t) => write_tree(&mut w, t),
        ModelBody::Forest(trees) => {
            put_u32(&mut w, trees.len() as u32);
            for (seed, t) in trees {
                w.extend_from_slice(&seed.to_le_bytes());
                write_tree(&mut w, t);
            }
        }
    }
    w
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(w: &mut Vec<u8>, v: f64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn write_tree(w: &mut Vec<u8>, t: &Tree) {
    put_u32(w, t.nodes.len() as u32);
    for n in &t.nodes {
        let tag = match n.kind {
            NodeKind::Leaf => 0,
            NodeKind::Split { .. } => 1,
            NodeKind::NbLeaf(_) => 2,
        };
        w.push(tag);
        put_u32(w, n.dist.benign);
        put_u32(w, n.dist.malicious);
        match &n.kind {
            NodeKind::Leaf => {}
            NodeKind::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                w.extend_from_slice(&feature.to_le_bytes());
                put_f64(w, *threshold);
                put_u32(w, *left);
                put_u32(w, *right);
            }
            NodeKind::NbLeaf(table) => {
                put_u32(w, table.counts[0]);
                put_u32(w, table.counts[1]);
                for c in 0..2 {
                    table.means[c].iter().for_each(|v| put_f64(w, *v));
                    table.variances[c].iter().for_each(|v| put_f64(w, *v));
                }
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> ClassifyError {
    ClassifyError::CorruptModel(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ClassifyError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ClassifyError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ClassifyError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ClassifyError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ClassifyError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ClassifyError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn deserialize_model(bytes: &[u8]) -> Result<TrainedModel, ClassifyError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u16()?;
    if version != MODEL_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let kind = match r.u8()? {
        0 => ModelKind::Tree,
        1 => ModelKind::Forest,
        2 => ModelKind::NbTree,
        k => return Err(corrupt(format!("unknown model kind {k}"))),
    };
    let seed = r.u64()?;
    let mode = match r.u8()? {
        0 => FrequencyMode::RawCount,
        1 => FrequencyMode::Relative,
        m => return Err(corrupt(format!("unknown frequency mode {m}"))),
    };
    let min_leaf = r.u32()? as usize;
    let prune = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(corrupt(format!("bad prune flag {b}"))),
    };
    let n_trees = r.u32()? as usize;
    let fps = r.u32()? as usize;
    let nb_leaf_threshold = r.u32()? as usize;
    let hyper = Hyperparameters {
        min_leaf,
        prune,
        n_trees,
        features_per_split: (fps != 0).then_some(fps),
        nb_leaf_threshold,
    };
    let nf = r.u16()? as usize;
    if nf == 0 {
        return Err(corrupt("empty feature list"));
    }
    let features: Vec<Opcode> = r.take(nf)?.iter().map(|&b| Opcode(b)).collect();

    let allow_nb = kind == ModelKind::NbTree;
    let body = match kind {
        ModelKind::Tree => ModelBody::Tree(read_tree(&mut r, nf, allow_nb)?),
        ModelKind::NbTree => ModelBody::NbTree(read_tree(&mut r, nf, allow_nb)?),
        ModelKind::Forest => {
            let n = r.u32()? as usize;
            if n == 0 {
                return Err(corrupt("forest without trees"));
            }
            // Each tree needs at least a seed and a one-leaf body.
            if n > r.remaining() / 21 {
                return Err(corrupt("tree count exceeds data"));
            }
            let mut trees = Vec::with_capacity(n);
            for _ in 0..n {
                let s = r.u64()?;
                trees.push((s, read_tree(&mut r, nf, false)?));
            }
            ModelBody::Forest(trees)
        }
    };
    if r.remaining() != 0 {
        return Err(corrupt(format!("{} trailing bytes", r.remaining())));
    }
    Ok(TrainedModel {
        kind,
        features,
        hyper,
        seed,
        mode,
        body,
    })
}

fn read_tree(r: &mut Reader<'_>, nf: usize, allow_nb: bool) -> Result<Tree, ClassifyError> {
    let count = r.u32()? as usize;
    if count == 0 {
        return Err(corrupt("tree without nodes"));
    }
    // Smallest node is 9 bytes.
    if count > r.remaining() / 9 {
        return Err(corrupt("node count exceeds data"));
    }
    let mut nodes = Vec::with_capacity(count);
    for i in 0..count {
        let tag = r.u8()?;
        let dist = ClassDist {
            benign: r.u32()?,
            malicious: r.u32()?,
        };
        let kind = match tag {
            0 => NodeKind::Leaf,
            1 => {
                let feature = r.u16()?;
                let threshold = r.f64()?;
                let left = r.u32()?;
                let right = r.u32()?;
                if feature as usize >= nf {
                    return Err(corrupt(format!("node {i}: feature {feature} out of range")));
                }
                if !threshold.is_finite() {
                    return Err(corrupt(format!("node {i}: non-finite threshold")));
                }
                for child in [left, right] {
                    let c = child as usize;
                    if c <= i || c >= count {
                        return Err(corrupt(format!("node {i}: bad child index {child}")));
                    }
                }
                NodeKind::Split {
                    feature,
                    threshold,
                    left,
                    right,
                }
            }
            2 if allow_nb => {
                let counts = [r.u32()?, r.u32()?];
                let mut means: [Vec<f64>; 2] = Default::default();
                let mut variances: [Vec<f64>; 2] = Default::default();
                for c in 0..2 {
                    means[c] = (0..nf).map(|_| r.f64()).collect::<Result<_, _>>()?;
                    variances[c] = (0..nf).map(|_| r.f64()).collect::<Result<_, _>>()?;
                }
                if variances.iter().flatten().any(|v| v.is_nan() || *v <= 0.0) {
                    return Err(corrupt(format!("node {i}: non-positive variance")));
                }
                NodeKind::NbLeaf(NbTable {
                    counts,
                    means,
                    variances,
                })
            }
            t => return Err(corrupt(format!("node {i}: bad tag {t}"))),
        };
        nodes.push(Node { dist, kind });
    }
    Ok(Tree { nodes })
}
