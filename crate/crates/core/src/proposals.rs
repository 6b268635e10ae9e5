//! Temporal interval algorithms: IoU, attention thresholding, candidate
//! generation, greedy NMS and Gaussian soft-NMS.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalKind {
    Action,
    Background,
}

/// Half-open span `[start, end)` of segment indices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub start: usize,
    pub end: usize,
    pub kind: ProposalKind,
    pub source_threshold: f64,
}

impl Proposal {
    pub fn new(start: usize, end: usize, kind: ProposalKind, source_threshold: f64) -> Self {
        debug_assert!(start < end, "empty proposal [{start}, {end})");
        Self {
            start,
            end,
            kind,
            source_threshold,
        }
    }

    pub fn action(start: usize, end: usize) -> Self {
        Self::new(start, end, ProposalKind::Action, 0.0)
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn iou(&self, other: &Proposal) -> f64 {
        interval_iou(self, other)
    }
}

/// Exact IoU of two integer spans.
pub fn interval_iou(a: &Proposal, b: &Proposal) -> f64 {
    let inter = a.end.min(b.end).saturating_sub(a.start.max(b.start));
    if inter == 0 {
        return 0.0;
    }
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// IoU of real-valued spans; zero when either span is degenerate.
pub fn span_iou(a_start: f64, a_end: f64, b_start: f64, b_end: f64) -> f64 {
    let inter = (a_end.min(b_end) - a_start.max(b_start)).max(0.0);
    let union = (a_end - a_start) + (b_end - b_start) - inter;
    if inter <= 0.0 || union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThresholdMode {
    Above,
    Below,
}

/// Maximal runs where `A(t) > θ` (or `< θ`), dropping runs shorter than `min_len`.
pub fn threshold_regions(
    attention: &[f64],
    theta: f64,
    mode: ThresholdMode,
    min_len: usize,
) -> Vec<(usize, usize)> {
    let hit = |a: f64| match mode {
        ThresholdMode::Above => a > theta,
        ThresholdMode::Below => a < theta,
    };
    let mut runs = Vec::new();
    let mut open: Option<usize> = None;
    for (t, &a) in attention.iter().enumerate() {
        match (hit(a), open) {
            (true, None) => open = Some(t),
            (false, Some(s)) => {
                runs.push((s, t));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(s) = open {
        runs.push((s, attention.len()));
    }
    runs.retain(|(s, e)| e - s >= min_len.max(1));
    runs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CandidateConfig {
    pub theta_act: Vec<f64>,
    pub theta_bkg: Vec<f64>,
    pub include_background: bool,
    pub min_len: usize,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        Self {
            theta_act: (1..=9).map(|i| i as f64 / 10.0).collect(),
            theta_bkg: vec![0.3, 0.5, 0.7],
            include_background: true,
            min_len: 1,
        }
    }
}

impl CandidateConfig {
    pub fn validate(&self) -> Result<()> {
        for &t in self.theta_act.iter().chain(&self.theta_bkg) {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::invalid(format!("threshold {t} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Multi-threshold candidates, deduplicated on `(start, end, kind)` keeping
/// the lowest source threshold, sorted by `(start, end, kind)`.
pub fn generate_candidates(attention: &[f64], config: &CandidateConfig) -> Vec<Proposal> {
    let mut unique: BTreeMap<(usize, usize, ProposalKind), f64> = BTreeMap::new();
    let mut add = |thresholds: &[f64], mode: ThresholdMode, kind: ProposalKind| {
        for &theta in thresholds {
            for (s, e) in threshold_regions(attention, theta, mode, config.min_len) {
                unique
                    .entry((s, e, kind))
                    .and_modify(|t| *t = t.min(theta))
                    .or_insert(theta);
            }
        }
    };
    add(&config.theta_act, ThresholdMode::Above, ProposalKind::Action);
    if config.include_background {
        add(&config.theta_bkg, ThresholdMode::Below, ProposalKind::Background);
    }
    unique
        .into_iter()
        .map(|((s, e, kind), theta)| Proposal::new(s, e, kind, theta))
        .collect()
}

/// Descending score, then earlier start, then earlier end.
fn rank_order(a: (f64, f64, f64), b: (f64, f64, f64)) -> Ordering {
    b.0.total_cmp(&a.0)
        .then(a.1.total_cmp(&b.1))
        .then(a.2.total_cmp(&b.2))
}

/// Greedy NMS over `(proposal, score)` pairs. Returns indices into `items`
/// in selection order; anything with IoU above `overlap_threshold` against a
/// kept item is discarded.
pub fn nms_greedy(items: &[(Proposal, f64)], overlap_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        let key = |i: usize| (items[i].1, items[i].0.start as f64, items[i].0.end as f64);
        rank_order(key(a), key(b)).then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let p = &items[i].0;
        if kept.iter().all(|&k| interval_iou(&items[k].0, p) <= overlap_threshold) {
            kept.push(i);
        }
    }
    kept
}

/// A scored temporal detection in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredDetection {
    pub video_id: String,
    pub class_id: usize,
    pub start_sec: f64,
    pub end_sec: f64,
    pub score: f64,
}

impl ScoredDetection {
    pub fn iou(&self, other: &ScoredDetection) -> f64 {
        span_iou(self.start_sec, self.end_sec, other.start_sec, other.end_sec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoftNmsConfig {
    pub sigma: f64,
    pub score_floor: f64,
}

impl Default for SoftNmsConfig {
    fn default() -> Self {
        Self {
            sigma: 0.3,
            score_floor: 1e-4,
        }
    }
}

/// Gaussian soft-NMS for detections of one video and class: the best
/// remaining detection is frozen and every other score is multiplied by
/// `exp(-IoU² / σ)`; detections falling below `score_floor` are dropped.
pub fn soft_nms(dets: Vec<ScoredDetection>, config: &SoftNmsConfig) -> Vec<ScoredDetection> {
    let mut remaining: Vec<ScoredDetection> = dets
        .into_iter()
        .filter(|d| d.score >= config.score_floor)
        .collect();
    let mut out = Vec::with_capacity(remaining.len());
    while !remaining.is_empty() {
        let best = (0..remaining.len())
            .min_by(|&a, &b| {
                let key = |d: &ScoredDetection| (d.score, d.start_sec, d.end_sec);
                rank_order(key(&remaining[a]), key(&remaining[b])).then(a.cmp(&b))
            })
            .expect("nonempty");
        let chosen = remaining.swap_remove(best);
        for d in remaining.iter_mut() {
            let iou = chosen.iou(d);
            d.score *= (-(iou * iou) / config.sigma).exp();
        }
        remaining.retain(|d| d.score >= config.score_floor);
        out.push(chosen);
    }
    // selection order is already non-increasing in final score; keep it stable
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// Per-video candidate list as exchanged between the two stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoProposals {
    pub video_id: String,
    #[serde(rename = "T")]
    pub num_segments: usize,
    pub proposals: Vec<Proposal>,
}

impl VideoProposals {
    pub fn actions(&self) -> Vec<Proposal> {
        self.proposals
            .iter()
            .filter(|p| p.kind == ProposalKind::Action)
            .copied()
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.proposals {
            if p.start >= p.end || p.end > self.num_segments {
                return Err(Error::Dataset(format!(
                    "video `{}`: proposal [{}, {}) outside [0, {})",
                    self.video_id, p.start, p.end, self.num_segments
                )));
            }
        }
        Ok(())
    }
}

pub fn write_proposal_file(path: impl AsRef<Path>, lists: &[VideoProposals]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(lists)?)?;
    Ok(())
}

pub fn read_proposal_file(path: impl AsRef<Path>) -> Result<Vec<VideoProposals>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Dataset(format!("cannot read proposals {}: {e}", path.display())))?;
    let lists: Vec<VideoProposals> = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("invalid proposal file {}: {e}", path.display())))?;
    for l in &lists {
        l.validate()?;
    }
    Ok(lists)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(s: usize, e: usize) -> Proposal {
        Proposal::action(s, e)
    }

    fn det(s: f64, e: f64, score: f64) -> ScoredDetection {
        ScoredDetection {
            video_id: "v".into(),
            class_id: 0,
            start_sec: s,
            end_sec: e,
            score,
        }
    }

    #[test]
    fn iou_examples() {
        assert_eq!(interval_iou(&p(3, 9), &p(3, 9)), 1.0);
        assert_eq!(interval_iou(&p(0, 4), &p(4, 8)), 0.0);
        assert!((interval_iou(&p(0, 4), &p(2, 6)) - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn threshold_examples() {
        let a = vec![0.9; 7];
        assert_eq!(threshold_regions(&a, 0.5, ThresholdMode::Above, 1), vec![(0, 7)]);
        assert!(threshold_regions(&a, 0.5, ThresholdMode::Below, 1).is_empty());
        let a = [0.9, 0.8, 0.2, 0.7, 0.9];
        assert_eq!(
            threshold_regions(&a, 0.5, ThresholdMode::Above, 1),
            vec![(0, 2), (3, 5)]
        );
        assert_eq!(threshold_regions(&a, 0.5, ThresholdMode::Above, 3), vec![]);
    }

    #[test]
    fn candidate_examples() {
        let cfg = CandidateConfig::default();
        let c = generate_candidates(&[0.95; 10], &cfg);
        assert_eq!(c.len(), 1);
        assert_eq!((c[0].start, c[0].end, c[0].kind), (0, 10, ProposalKind::Action));
        assert!((c[0].source_threshold - 0.1).abs() < 1e-12);

        let c = generate_candidates(&[0.0; 10], &cfg);
        assert_eq!(c.len(), 1);
        assert_eq!((c[0].start, c[0].end, c[0].kind), (0, 10, ProposalKind::Background));
        assert!((c[0].source_threshold - 0.3).abs() < 1e-12);

        let no_bg = CandidateConfig {
            include_background: false,
            ..cfg
        };
        let a = [0.05, 0.2, 0.6, 0.9, 0.4, 0.1];
        assert!(generate_candidates(&a, &no_bg)
            .iter()
            .all(|p| p.kind == ProposalKind::Action));
    }

    #[test]
    fn nms_examples() {
        assert_eq!(nms_greedy(&[(p(1, 3), 0.4)], 0.0), vec![0]);
        assert_eq!(nms_greedy(&[(p(0, 4), 0.8), (p(0, 4), 0.9)], 0.0), vec![1]);
        let items = [(p(0, 4), 0.9), (p(2, 6), 0.8), (p(8, 10), 0.7)];
        assert_eq!(nms_greedy(&items, 0.2), vec![0, 2]);
    }

    #[test]
    fn soft_nms_examples() {
        let one = vec![det(0.0, 1.0, 0.7)];
        assert_eq!(soft_nms(one.clone(), &SoftNmsConfig::default()), one);

        let out = soft_nms(
            vec![det(0.0, 1.0, 0.6), det(2.0, 3.0, 0.8)],
            &SoftNmsConfig::default(),
        );
        assert_eq!(out, vec![det(2.0, 3.0, 0.8), det(0.0, 1.0, 0.6)]);

        let out = soft_nms(
            vec![det(1.0, 4.0, 0.9), det(1.0, 4.0, 1.0)],
            &SoftNmsConfig::default(),
        );
        assert_eq!(out[0].score, 1.0);
        let expected = 0.9 * (-1.0f64 / 0.3).exp();
        assert!((out[1].score - expected).abs() < 1e-15);
        assert!((out[1].score - 0.0321).abs() < 1e-4);
    }

    #[test]
    fn proposal_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let lists = vec![VideoProposals {
            video_id: "v".into(),
            num_segments: 8,
            proposals: vec![p(0, 3), Proposal::new(3, 8, ProposalKind::Background, 0.5)],
        }];
        write_proposal_file(&path, &lists).unwrap();
        assert_eq!(read_proposal_file(&path).unwrap(), lists);

        let bad = vec![VideoProposals {
            video_id: "v".into(),
            num_segments: 2,
            proposals: vec![p(0, 3)],
        }];
        write_proposal_file(&path, &bad).unwrap();
        assert!(read_proposal_file(&path).is_err());
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in 0usize..50, la in 1usize..20, b in 0usize..50, lb in 1usize..20) {
            let (x, y) = (p(a, a + la), p(b, b + lb));
            let v = interval_iou(&x, &y);
            prop_assert_eq!(v, interval_iou(&y, &x));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v == 1.0, a == b && la == lb);
        }

        #[test]
        fn candidates_monotone_in_threshold(a in prop::collection::vec(0.0f64..1.0, 1..40)) {
            let cfg = CandidateConfig { include_background: false, ..CandidateConfig::default() };
            let ths = cfg.theta_act.clone();
            for (i, &hi) in ths.iter().enumerate() {
                for &lo in &ths[..i] {
                    for (s, e) in threshold_regions(&a, hi, ThresholdMode::Above, 1) {
                        let lower = threshold_regions(&a, lo, ThresholdMode::Above, 1);
                        prop_assert!(lower.iter().any(|&(ls, le)| ls <= s && e <= le));
                    }
                }
            }
        }

        #[test]
        fn soft_nms_never_increases_scores(
            raw in prop::collection::vec((0.0f64..20.0, 0.5f64..6.0, 0.01f64..1.0), 1..12)
        ) {
            let dets: Vec<ScoredDetection> = raw.iter().map(|&(s, l, sc)| det(s, s + l, sc)).collect();
            let out = soft_nms(dets.clone(), &SoftNmsConfig::default());
            for d in &out {
                let orig = dets.iter().find(|o| o.start_sec == d.start_sec && o.end_sec == d.end_sec && o.score >= d.score);
                prop_assert!(orig.is_some());
            }
        }
    }
}
