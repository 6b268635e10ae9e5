//! Completeness pseudo-labels from high-attention pseudo instances.

use crate::error::{Error, Result};
use crate::proposals::{interval_iou, nms_greedy, Proposal};

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelSet {
    pub pseudo_instances: Vec<Proposal>,
    /// Max IoU of each proposal against the pseudo instances.
    pub q: Vec<f64>,
}

/// Keeps proposals with `A(i) ≥ γ · max(A)`, runs greedy NMS over them by
/// attention, and labels every proposal with its best IoU against the
/// survivors. Pure function of its inputs; nothing here is differentiated.
pub fn pce_pseudo_labels(
    attention: &[f64],
    proposals: &[Proposal],
    gamma: f64,
    nms_threshold: f64,
) -> Result<PseudoLabelSet> {
    if attention.is_empty() || attention.len() != proposals.len() {
        return Err(Error::invalid(format!(
            "{} attention weights for {} proposals",
            attention.len(),
            proposals.len()
        )));
    }
    let max = attention.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cutoff = gamma * max;
    let confident: Vec<(Proposal, f64)> = proposals
        .iter()
        .zip(attention)
        .filter(|(_, &a)| a >= cutoff)
        .map(|(p, &a)| (*p, a))
        .collect();
    let pseudo_instances: Vec<Proposal> = nms_greedy(&confident, nms_threshold)
        .into_iter()
        .map(|i| confident[i].0)
        .collect();
    let q = proposals
        .iter()
        .map(|p| {
            pseudo_instances
                .iter()
                .map(|g| interval_iou(p, g))
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(PseudoLabelSet { pseudo_instances, q })
}

/// `(1/M) Σ (q − q̂)²`.
pub fn completeness_loss(q: &[f64], q_hat: &[f64]) -> Result<f64> {
    if q.len() != q_hat.len() || q.is_empty() {
        return Err(Error::invalid("completeness targets and predictions differ in length"));
    }
    Ok(q.iter().zip(q_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / q.len() as f64)
}

/// `∂/∂q̂` of [`completeness_loss`]: `2 (q̂ − q) / M`.
pub fn completeness_loss_grad(q: &[f64], q_hat: &[f64]) -> Vec<f64> {
    let m = q.len() as f64;
    q.iter().zip(q_hat).map(|(a, b)| 2.0 * (b - a) / m).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    #[test]
    fn single_proposal() {
        let p = [Proposal::action(2, 5)];
        let set = pce_pseudo_labels(&[0.3], &p, 0.8, 0.0).unwrap();
        assert_eq!(set.pseudo_instances, p.to_vec());
        assert_eq!(set.q, vec![1.0]);
    }

    #[test]
    fn hand_executed_case() {
        let p = [Proposal::action(0, 4), Proposal::action(2, 6), Proposal::action(8, 10)];
        let set = pce_pseudo_labels(&[0.9, 0.85, 0.3], &p, 0.8, 0.0).unwrap();
        assert_eq!(set.pseudo_instances, vec![p[0]]);
        assert_eq!(set.q[0], 1.0);
        assert!((set.q[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(set.q[2], 0.0);
    }

    #[test]
    fn completeness_examples() {
        assert_eq!(completeness_loss(&[0.2, 0.7], &[0.2, 0.7]).unwrap(), 0.0);
        assert_eq!(completeness_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        let q = [0.1, 0.9, 0.4];
        let q_hat = [0.5, 0.2, 0.45];
        let analytic = completeness_loss_grad(&q, &q_hat);
        let fd = finite_diff_grad(|x| completeness_loss(&q, x).unwrap(), &q_hat, 1e-4).unwrap();
        for ((a, n), (qi, qh)) in analytic.iter().zip(&fd).zip(q.iter().zip(&q_hat)) {
            assert!((a - 2.0 * (qh - qi) / 3.0).abs() < 1e-15);
            assert!((a - n).abs() < 1e-9);
        }
    }
}
