//! Turning model outputs into scored detections.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{GroundTruthInstance, VideoRecord};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Matrix};
use crate::pmil::PmilOutput;
use crate::proposals::{soft_nms, span_iou, Proposal, ProposalKind, ScoredDetection, SoftNmsConfig};
use crate::smil::{smil_score_proposals, SmilOutput};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Classes with `ŷ_supp(c)` below this are not localized.
    pub theta_cls: f64,
    pub soft_nms: SoftNmsConfig,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            theta_cls: 0.2,
            soft_nms: SoftNmsConfig::default(),
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta_cls) {
            return Err(Error::Config(format!("theta_cls {} outside [0, 1]", self.theta_cls)));
        }
        if !(self.soft_nms.sigma > 0.0) || !(self.soft_nms.score_floor >= 0.0) {
            return Err(Error::Config("soft-NMS sigma must be positive and score_floor non-negative".into()));
        }
        Ok(())
    }
}

/// Non-background classes that pass the video-level threshold.
pub fn passing_classes(y_hat_supp: &[f64], theta_cls: f64) -> Vec<usize> {
    let num_classes = y_hat_supp.len().saturating_sub(1);
    (0..num_classes).filter(|&c| y_hat_supp[c] >= theta_cls).collect()
}

fn check_actions(proposals: &[Proposal], rows: usize) -> Result<()> {
    if proposals.len() != rows {
        return Err(Error::invalid(format!("{} proposals for {rows} score rows", proposals.len())));
    }
    if proposals.iter().any(|p| p.kind != ProposalKind::Action) {
        return Err(Error::invalid("inference takes action-kind proposals only"));
    }
    Ok(())
}

fn detection(video: &VideoRecord, class_id: usize, p: &Proposal, score: f64) -> Result<ScoredDetection> {
    Ok(ScoredDetection {
        video_id: video.video_id.clone(),
        class_id,
        start_sec: video.to_seconds(p.start as f64)?,
        end_sec: video.to_seconds(p.end as f64)?,
        score,
    })
}

/// Per passing class, every proposal scored `clamp(S_supp(i, c), 0, 1) · q̂(i)`.
pub fn score_and_filter(
    output: &PmilOutput,
    proposals: &[Proposal],
    video: &VideoRecord,
    theta_cls: f64,
) -> Result<BTreeMap<usize, Vec<ScoredDetection>>> {
    check_actions(proposals, output.mil.num_instances())?;
    let mut out = BTreeMap::new();
    for c in passing_classes(&output.mil.y_hat_supp, theta_cls) {
        let dets = proposals
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let s = output.mil.s_supp.get(i, c).clamp(0.0, 1.0);
                detection(video, c, p, s * output.q_hat[i])
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert(c, dets);
    }
    Ok(out)
}

/// Class-wise soft-NMS over per-class lists of one video.
pub fn suppress_per_class(
    per_class: BTreeMap<usize, Vec<ScoredDetection>>,
    config: &SoftNmsConfig,
) -> Vec<ScoredDetection> {
    let mut out: Vec<ScoredDetection> = per_class
        .into_values()
        .flat_map(|dets| soft_nms(dets, config))
        .collect();
    sort_detections(&mut out);
    out
}

/// Score descending; ties broken by video, class, start, end so the order is
/// a pure function of the set.
pub fn sort_detections(dets: &mut [ScoredDetection]) {
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.video_id.cmp(&b.video_id))
            .then(a.class_id.cmp(&b.class_id))
            .then(a.start_sec.total_cmp(&b.start_sec))
            .then(a.end_sec.total_cmp(&b.end_sec))
    });
}

/// Final stage-2 detections for one video.
pub fn detect(
    output: &PmilOutput,
    proposals: &[Proposal],
    video: &VideoRecord,
    config: &InferenceConfig,
) -> Result<Vec<ScoredDetection>> {
    let per_class = score_and_filter(output, proposals, video, config.theta_cls)?;
    Ok(suppress_per_class(per_class, &config.soft_nms))
}

/// Stage-1 baseline: Outer-Inner contrast on the suppressed CAS, squashed to
/// (0, 1) with a sigmoid so the ranking is kept intact.
pub fn smil_detect(
    output: &SmilOutput,
    proposals: &[Proposal],
    video: &VideoRecord,
    config: &InferenceConfig,
) -> Result<Vec<ScoredDetection>> {
    if proposals.iter().any(|p| p.kind != ProposalKind::Action) {
        return Err(Error::invalid("inference takes action-kind proposals only"));
    }
    let mut per_class = BTreeMap::new();
    for c in passing_classes(&output.y_hat_supp, config.theta_cls) {
        let scores = smil_score_proposals(output, proposals, c)?;
        let dets = proposals
            .iter()
            .zip(scores)
            .map(|(p, s)| detection(video, c, p, sigmoid(s)))
            .collect::<Result<Vec<_>>>()?;
        per_class.insert(c, dets);
    }
    Ok(suppress_per_class(per_class, &config.soft_nms))
}

/// `M × C` matrix of the best IoU of each proposal against the ground-truth
/// instances of each class (0 where a class has none).
pub fn gt_oracle_scores(
    proposals: &[Proposal],
    video: &VideoRecord,
    num_classes: usize,
) -> Result<Matrix> {
    let mut out = Matrix::zeros(proposals.len(), num_classes);
    for (i, p) in proposals.iter().enumerate() {
        let (s, e) = (video.to_seconds(p.start as f64)?, video.to_seconds(p.end as f64)?);
        for g in &video.instances {
            if g.class_id >= num_classes {
                return Err(Error::invalid(format!("ground-truth class {} out of range", g.class_id)));
            }
            let iou = span_iou(s, e, g.start_sec, g.end_sec);
            if iou > out.get(i, g.class_id) {
                out.set(i, g.class_id, iou);
            }
        }
    }
    Ok(out)
}

/// Upper-bound detections: proposals scored by IoU with the ground truth of
/// each class present in the video.
pub fn gt_detect(
    proposals: &[Proposal],
    video: &VideoRecord,
    num_classes: usize,
    config: &InferenceConfig,
) -> Result<Vec<ScoredDetection>> {
    let scores = gt_oracle_scores(proposals, video, num_classes)?;
    let classes: Vec<usize> = {
        let mut c: Vec<usize> = video.instances.iter().map(|g: &GroundTruthInstance| g.class_id).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    let mut per_class = BTreeMap::new();
    for c in classes {
        let dets = proposals
            .iter()
            .enumerate()
            .map(|(i, p)| detection(video, c, p, scores.get(i, c)))
            .collect::<Result<Vec<_>>>()?;
        per_class.insert(c, dets);
    }
    Ok(suppress_per_class(per_class, &config.soft_nms))
}

/// Min-max normalizes scores per class over the whole list. A class whose
/// scores are all equal maps to 1.
pub fn normalize_per_class(dets: &[ScoredDetection]) -> Vec<ScoredDetection> {
    let mut range: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for d in dets {
        let r = range.entry(d.class_id).or_insert((f64::INFINITY, f64::NEG_INFINITY));
        r.0 = r.0.min(d.score);
        r.1 = r.1.max(d.score);
    }
    dets.iter()
        .map(|d| {
            let (lo, hi) = range[&d.class_id];
            let score = if hi > lo { (d.score - lo) / (hi - lo) } else { 1.0 };
            ScoredDetection { score, ..d.clone() }
        })
        .collect()
}

/// Union of the two normalized sources followed by soft-NMS per
/// (video, class).
pub fn fuse_detections(
    dets_smil: &[ScoredDetection],
    dets_pmil: &[ScoredDetection],
    config: &SoftNmsConfig,
) -> Vec<ScoredDetection> {
    let mut groups: BTreeMap<(String, usize), Vec<ScoredDetection>> = BTreeMap::new();
    for d in normalize_per_class(dets_smil)
        .into_iter()
        .chain(normalize_per_class(dets_pmil))
    {
        groups.entry((d.video_id.clone(), d.class_id)).or_default().push(d);
    }
    let mut out: Vec<ScoredDetection> = groups
        .into_values()
        .flat_map(|g| soft_nms(g, config))
        .collect();
    sort_detections(&mut out);
    out
}
