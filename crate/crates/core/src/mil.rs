//! The multiple-instance aggregation shared by both stages.
//!
//! Given per-instance attention `A` (segments in stage 1, proposals in stage
//! 2) and base class scores `S_base` over `C + 1` classes (the last one is
//! background), the suppressed scores are `S_supp = A ⊙ S_base` row-wise and
//! the video-level predictions are `softmax(top-k mean)` of each.

use crate::error::{Error, Result};
use crate::numerics::{softmax, softmax_backward, topk_count, topk_mean_columns, Matrix, TopKPool};

/// Clamp applied inside `log` of the cross-entropy.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct MilScores {
    pub attention: Vec<f64>,
    pub s_base: Matrix,
    pub s_supp: Matrix,
    pub y_hat_base: Vec<f64>,
    pub y_hat_supp: Vec<f64>,
    pool_base: TopKPool,
    pool_supp: TopKPool,
}

impl MilScores {
    pub fn new(attention: Vec<f64>, s_base: Matrix, k_ratio: f64) -> Result<Self> {
        let n = s_base.rows();
        if n == 0 {
            return Err(Error::invalid("no instances to aggregate"));
        }
        if attention.len() != n {
            return Err(Error::invalid(format!(
                "{} attention weights for {n} instances",
                attention.len()
            )));
        }
        let mut s_supp = s_base.clone();
        for (t, &a) in attention.iter().enumerate() {
            for v in s_supp.row_mut(t) {
                *v *= a;
            }
        }
        let k = topk_count(n, k_ratio);
        let pool_base = topk_mean_columns(&s_base, k)?;
        let pool_supp = topk_mean_columns(&s_supp, k)?;
        let y_hat_base = softmax(&pool_base.values)?;
        let y_hat_supp = softmax(&pool_supp.values)?;
        Ok(Self {
            attention,
            s_base,
            s_supp,
            y_hat_base,
            y_hat_supp,
            pool_base,
            pool_supp,
        })
    }

    pub fn num_instances(&self) -> usize {
        self.s_base.rows()
    }

    pub fn k(&self) -> usize {
        self.pool_base.k
    }

    /// Classification loss against video labels `y` (length `C`).
    pub fn cls_loss(&self, labels: &[u8]) -> Result<f64> {
        let (base, supp) = mil_targets(labels, self.y_hat_base.len())?;
        let mut loss = cross_entropy(&self.y_hat_base, &base);
        if let Some(supp) = supp {
            loss += cross_entropy(&self.y_hat_supp, &supp);
        }
        Ok(loss)
    }

    /// Gradients of `scale · cls_loss` with respect to `A` and `S_base`.
    pub fn cls_loss_backward(&self, labels: &[u8], scale: f64) -> Result<(Vec<f64>, Matrix)> {
        let (base, supp) = mil_targets(labels, self.y_hat_base.len())?;
        let n = self.num_instances();
        let d_pool_base = softmax_backward(&self.y_hat_base, &cross_entropy_grad(&self.y_hat_base, &base, scale));
        let mut d_base = self.pool_base.backward(&d_pool_base, n);
        let mut d_attention = vec![0.0; n];
        if let Some(supp) = supp {
            let d_pool_supp =
                softmax_backward(&self.y_hat_supp, &cross_entropy_grad(&self.y_hat_supp, &supp, scale));
            let d_supp = self.pool_supp.backward(&d_pool_supp, n);
            for t in 0..n {
                let a = self.attention[t];
                let mut da = 0.0;
                for c in 0..d_supp.cols() {
                    let g = d_supp.get(t, c);
                    if g != 0.0 {
                        da += self.s_base.get(t, c) * g;
                        d_base.set(t, c, d_base.get(t, c) + a * g);
                    }
                }
                d_attention[t] = da;
            }
        }
        Ok((d_attention, d_base))
    }
}

/// ℓ1-normalized `[y, 1]` and, when `y` has a positive entry, `[y, 0]`.
pub fn mil_targets(labels: &[u8], num_outputs: usize) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    if labels.len() + 1 != num_outputs {
        return Err(Error::invalid(format!(
            "{} labels for {num_outputs} outputs (expected C + 1)",
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l != 0).count();
    let mut base: Vec<f64> = labels.iter().map(|&l| if l != 0 { 1.0 } else { 0.0 }).collect();
    base.push(1.0);
    let base_norm = (positives + 1) as f64;
    let supp = (positives > 0).then(|| {
        let mut s: Vec<f64> = base[..labels.len()].iter().map(|v| v / positives as f64).collect();
        s.push(0.0);
        s
    });
    for v in &mut base {
        *v /= base_norm;
    }
    Ok((base, supp))
}

/// `−Σ target · log(max(pred, ε))`.
pub fn cross_entropy(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .filter(|(_, &t)| t != 0.0)
        .map(|(&p, &t)| -t * p.max(LOG_EPS).ln())
        .sum()
}

fn cross_entropy_grad(pred: &[f64], target: &[f64], scale: f64) -> Vec<f64> {
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| if t == 0.0 || p < LOG_EPS { 0.0 } else { -scale * t / p })
        .collect()
}

/// Entropy of a probability vector, the minimum of [`cross_entropy`].
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}
