use super::{Dataset, Label};

/// Gaussian naive Bayes fitted to the samples reaching one leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct NbTable {
    /// Sample counts per class, indexed by [`Label`].
    pub counts: [u32; 2],
    pub means: [Vec<f64>; 2],
    /// Per-class variances, already floored.
    pub variances: [Vec<f64>; 2],
}

impl NbTable {
    pub(crate) fn fit(data: &Dataset, idx: &[usize]) -> Self {
        let nf = data.n_features;
        let mut counts = [0u32; 2];
        let mut sums = [vec![0.0; nf], vec![0.0; nf]];
        for &i in idx {
            let c = data.labels[i].index();
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(&data.rows[i]) {
                *s += v;
            }
        }
        let means: [Vec<f64>; 2] = std::array::from_fn(|c| {
            let n = f64::from(counts[c].max(1));
            sums[c].iter().map(|s| s / n).collect()
        });
        let mut sq = [vec![0.0; nf], vec![0.0; nf]];
        for &i in idx {
            let c = data.labels[i].index();
            for ((s, v), m) in sq[c].iter_mut().zip(&data.rows[i]).zip(&means[c]) {
                *s += (v - m) * (v - m);
            }
        }

        // Floor relative to the widest feature spread in the leaf.
        let n_all = idx.len().max(1) as f64;
        let max_var = (0..nf)
            .map(|f| {
                let mean = idx.iter().map(|&i| data.rows[i][f]).sum::<f64>() / n_all;
                idx.iter()
                    .map(|&i| (data.rows[i][f] - mean).powi(2))
                    .sum::<f64>()
                    / n_all
            })
            .fold(0.0f64, f64::max);
        let floor = if max_var > 0.0 { 1e-9 * max_var } else { 1e-9 };

        let variances = std::array::from_fn(|c| {
            let n = f64::from(counts[c].max(1));
            sq[c].iter().map(|s| (s / n).max(floor)).collect()
        });
        Self {
            counts,
            means,
            variances,
        }
    }

    fn log_joint(&self, c: usize, x: &[f64]) -> f64 {
        let total = f64::from(self.counts[0] + self.counts[1]);
        let mut lp = (f64::from(self.counts[c]) / total).ln();
        for ((v, m), var) in x.iter().zip(&self.means[c]).zip(&self.variances[c]) {
            lp += -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (v - m) * (v - m) / (2.0 * var);
        }
        lp
    }

    pub fn malicious_probability(&self, x: &[f64]) -> f64 {
        let b = Label::Benign.index();
        let m = Label::Malicious.index();
        match (self.counts[b], self.counts[m]) {
            (0, 0) => return 0.0,
            (_, 0) => return 0.0,
            (0, _) => return 1.0,
            _ => {}
        }
        let lb = self.log_joint(b, x);
        let lm = self.log_joint(m, x);
        if lb == lm {
            return 0.5;
        }
        let p = 1.0 / (1.0 + (lb - lm).exp());
        if p.is_nan() {
            0.5
        } else {
            p
        }
    }
}
