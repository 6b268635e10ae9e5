//! Instance-level rank consistency between the RGB and FLOW score streams.
//!
//! Proposals with attention at or above the mean each define a cluster of
//! the proposals overlapping them (IoU > 0, the proposal itself included).
//! Within a cluster, each modality's scores for a ground-truth class are
//! softmax-normalized and the two distributions are tied together with a
//! symmetric KL divergence.

use crate::error::{Error, Result};
use crate::numerics::{log_softmax, Matrix};
use crate::proposals::{interval_iou, Proposal};

/// Member indices of the cluster around each retained proposal.
pub fn irc_clusters(attention: &[f64], proposals: &[Proposal]) -> Vec<Vec<usize>> {
    if attention.is_empty() {
        return Vec::new();
    }
    let mean = attention.iter().sum::<f64>() / attention.len() as f64;
    attention
        .iter()
        .enumerate()
        .filter(|(_, &a)| a >= mean)
        .map(|(r, _)| {
            (0..proposals.len())
                .filter(|&i| i == r || interval_iou(&proposals[i], &proposals[r]) > 0.0)
                .collect()
        })
        .collect()
}

fn gather(s: &Matrix, members: &[usize], class: usize) -> Vec<f64> {
    members.iter().map(|&i| s.get(i, class)).collect()
}

/// Symmetric KL between `softmax(a)` and `softmax(b)` with its gradients
/// with respect to `a` and `b`.
fn symmetric_kl(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let la = log_softmax(a).expect("cluster is nonempty");
    let lb = log_softmax(b).expect("cluster is nonempty");
    let pa: Vec<f64> = la.iter().map(|v| v.exp()).collect();
    let pb: Vec<f64> = lb.iter().map(|v| v.exp()).collect();
    let d: Vec<f64> = la.iter().zip(&lb).map(|(x, y)| x - y).collect();
    let value: f64 = pa.iter().zip(&pb).zip(&d).map(|((x, y), di)| (x - y) * di).sum();
    let mean_a: f64 = pa.iter().zip(&d).map(|(p, di)| p * di).sum();
    let mean_b: f64 = pb.iter().zip(&d).map(|(p, di)| p * di).sum();
    let grad_a = (0..a.len())
        .map(|j| pa[j] * (d[j] - mean_a) + (pa[j] - pb[j]))
        .collect();
    let grad_b = (0..b.len())
        .map(|j| pb[j] * (mean_b - d[j]) + (pb[j] - pa[j]))
        .collect();
    (value, grad_a, grad_b)
}

fn check_shapes(s_rgb: &Matrix, s_flow: &Matrix, gt_classes: &[usize]) -> Result<()> {
    if s_rgb.rows() != s_flow.rows() || s_rgb.cols() != s_flow.cols() {
        return Err(Error::invalid("RGB and FLOW score matrices differ in shape"));
    }
    if gt_classes.iter().any(|&c| c >= s_rgb.cols()) {
        return Err(Error::invalid("ground-truth class out of range"));
    }
    Ok(())
}

/// Loss for fixed clusters, plus `scale`-weighted gradients with respect to
/// both score matrices.
pub fn irc_loss_and_grad(
    s_rgb: &Matrix,
    s_flow: &Matrix,
    clusters: &[Vec<usize>],
    gt_classes: &[usize],
    scale: f64,
) -> Result<(f64, Matrix, Matrix)> {
    check_shapes(s_rgb, s_flow, gt_classes)?;
    let mut d_rgb = Matrix::zeros(s_rgb.rows(), s_rgb.cols());
    let mut d_flow = Matrix::zeros(s_flow.rows(), s_flow.cols());
    if clusters.is_empty() || gt_classes.is_empty() {
        return Ok((0.0, d_rgb, d_flow));
    }
    let weight = 1.0 / (clusters.len() * gt_classes.len()) as f64;
    let mut total = 0.0;
    for members in clusters {
        for &c in gt_classes {
            let (v, g_rgb, g_flow) = symmetric_kl(&gather(s_rgb, members, c), &gather(s_flow, members, c));
            total += v;
            for (k, &i) in members.iter().enumerate() {
                d_rgb.set(i, c, d_rgb.get(i, c) + scale * weight * g_rgb[k]);
                d_flow.set(i, c, d_flow.get(i, c) + scale * weight * g_flow[k]);
            }
        }
    }
    Ok((total * weight, d_rgb, d_flow))
}

/// `(1/|R|) Σ_r mean_c [KL(D_flow ‖ D_rgb) + KL(D_rgb ‖ D_flow)]`, zero when
/// no proposal is retained.
pub fn irc_loss(
    s_rgb: &Matrix,
    s_flow: &Matrix,
    attention: &[f64],
    proposals: &[Proposal],
    gt_classes: &[usize],
) -> Result<f64> {
    if attention.len() != proposals.len() || s_rgb.rows() != proposals.len() {
        return Err(Error::invalid("attention, proposals and scores must agree in length"));
    }
    let clusters = irc_clusters(attention, proposals);
    Ok(irc_loss_and_grad(s_rgb, s_flow, &clusters, gt_classes, 0.0)?.0)
}
