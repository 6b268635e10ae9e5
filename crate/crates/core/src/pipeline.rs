//! End-to-end orchestration: train stage 1, generate candidates, train
//! stage 2, detect and evaluate. Shared by the command-line tool and the
//! test suites.

use std::collections::HashMap;

use log::info;

use crate::config::RunConfig;
use crate::data::{Dataset, SegmentFeatures, VideoRecord};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::infer::{detect, fuse_detections, gt_detect, smil_detect, sort_detections};
use crate::pmil::{pmil_forward, train_pmil, PmilParams, PmilTrained, PmilVideo, ProposalInputs};
use crate::proposals::{generate_candidates, ScoredDetection, VideoProposals};
use crate::smil::{smil_forward, train_smil_on, SmilParams, SmilTrained};
use crate::synthetic::SyntheticVideo;

/// A set of videos with features in memory.
#[derive(Clone, Debug)]
pub struct Split {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub records: Vec<VideoRecord>,
    pub features: Vec<SegmentFeatures>,
}

impl Split {
    pub fn from_dataset(dataset: &Dataset) -> Result<Self> {
        Ok(Self {
            num_classes: dataset.num_classes,
            class_names: dataset.class_names.clone(),
            records: dataset.videos.clone(),
            features: dataset.load_all_features()?,
        })
    }

    pub fn from_synthetic(videos: &[SyntheticVideo], num_classes: usize) -> Result<Self> {
        Ok(Self {
            num_classes,
            class_names: (0..num_classes).map(|c| format!("action_{c}")).collect(),
            records: videos.iter().map(|v| v.record.clone()).collect(),
            features: videos
                .iter()
                .map(|v| SegmentFeatures::new(v.rgb.clone(), v.flow.clone()))
                .collect::<Result<_>>()?,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub fn train_stage1(split: &Split, config: &RunConfig) -> Result<SmilTrained> {
    let labels: Vec<Vec<u8>> = split.records.iter().map(|v| v.labels.clone()).collect();
    let ids: Vec<String> = split.records.iter().map(|v| v.video_id.clone()).collect();
    let trained = train_smil_on(&split.features, &labels, &ids, split.num_classes, &config.smil_config())?;
    if let Some(last) = trained.log.last() {
        info!("stage 1 finished: epoch {} mean loss {:.5} {:?}", last.epoch, last.mean_loss, last.parts);
    }
    Ok(trained)
}

/// Candidates from the stage-1 attention of every video.
pub fn generate_proposals(params: &SmilParams, split: &Split, config: &RunConfig) -> Result<Vec<VideoProposals>> {
    split
        .records
        .iter()
        .zip(&split.features)
        .map(|(record, feats)| {
            let out = smil_forward(params, feats, config.smil.k_ratio)?;
            Ok(VideoProposals {
                video_id: record.video_id.clone(),
                num_segments: record.num_segments,
                proposals: generate_candidates(&out.attention, &config.proposals),
            })
        })
        .collect()
}

fn proposals_by_id<'a>(split: &Split, proposals: &'a [VideoProposals]) -> Result<Vec<&'a VideoProposals>> {
    let index: HashMap<&str, &VideoProposals> = proposals.iter().map(|p| (p.video_id.as_str(), p)).collect();
    split
        .records
        .iter()
        .map(|r| {
            let p = index
                .get(r.video_id.as_str())
                .copied()
                .ok_or_else(|| Error::Dataset(format!("no proposals for video `{}`", r.video_id)))?;
            if p.num_segments != r.num_segments {
                return Err(Error::Dataset(format!(
                    "proposals for `{}` assume T={}, manifest says {}",
                    r.video_id, p.num_segments, r.num_segments
                )));
            }
            Ok(p)
        })
        .collect()
}

pub fn train_stage2(split: &Split, proposals: &[VideoProposals], config: &RunConfig) -> Result<PmilTrained> {
    let matched = proposals_by_id(split, proposals)?;
    let videos: Vec<PmilVideo> = split
        .records
        .iter()
        .zip(&split.features)
        .zip(&matched)
        .map(|((r, f), p)| PmilVideo {
            video_id: &r.video_id,
            features: f,
            proposals: &p.proposals,
            labels: &r.labels,
        })
        .collect();
    let trained = train_pmil(&videos, split.num_classes, &config.pmil_config())?;
    if let Some(last) = trained.log.last() {
        info!("stage 2 finished: epoch {} mean loss {:.5} {:?}", last.epoch, last.mean_loss, last.parts);
    }
    Ok(trained)
}

/// How candidate proposals are scored at test time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scoring {
    Pmil,
    Smil,
    Gt,
    Fuse,
}

impl Scoring {
    pub fn as_str(self) -> &'static str {
        match self {
            Scoring::Pmil => "pmil",
            Scoring::Smil => "smil",
            Scoring::Gt => "gt",
            Scoring::Fuse => "fuse",
        }
    }
}

impl std::str::FromStr for Scoring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pmil" => Ok(Scoring::Pmil),
            "smil" => Ok(Scoring::Smil),
            "gt" => Ok(Scoring::Gt),
            "fuse" => Ok(Scoring::Fuse),
            other => Err(Error::Config(format!("unknown scoring `{other}` (pmil, smil, gt or fuse)"))),
        }
    }
}

/// Trained models available to [`infer`].
#[derive(Clone, Copy, Debug, Default)]
pub struct Models<'a> {
    pub smil: Option<&'a SmilParams>,
    pub pmil: Option<&'a PmilParams>,
}

fn pmil_detections(params: &PmilParams, split: &Split, matched: &[&VideoProposals], config: &RunConfig) -> Result<Vec<ScoredDetection>> {
    if params.scfe_mode != config.pmil.scfe_mode {
        return Err(Error::Config(format!(
            "checkpoint uses feature mode `{}`, config asks for `{}`",
            params.scfe_mode.as_str(),
            config.pmil.scfe_mode.as_str()
        )));
    }
    let mut out = Vec::new();
    for ((record, feats), p) in split.records.iter().zip(&split.features).zip(matched) {
        let actions = p.actions();
        if actions.is_empty() {
            continue;
        }
        let inputs = ProposalInputs::build(feats, &actions, config.pmil.alpha, &config.pmil.roi_bins, params.scfe_mode)?;
        let output = pmil_forward(params, &inputs, config.pmil.k_ratio)?;
        out.extend(detect(&output, &actions, record, &config.inference)?);
    }
    Ok(out)
}

fn smil_detections(params: &SmilParams, split: &Split, matched: &[&VideoProposals], config: &RunConfig) -> Result<Vec<ScoredDetection>> {
    let mut out = Vec::new();
    for ((record, feats), p) in split.records.iter().zip(&split.features).zip(matched) {
        let actions = p.actions();
        if actions.is_empty() {
            continue;
        }
        let output = smil_forward(params, feats, config.smil.k_ratio)?;
        out.extend(smil_detect(&output, &actions, record, &config.inference)?);
    }
    Ok(out)
}

/// Detections for every video of `split`, sorted by score.
pub fn infer(
    scoring: Scoring,
    models: Models<'_>,
    split: &Split,
    proposals: &[VideoProposals],
    config: &RunConfig,
) -> Result<Vec<ScoredDetection>> {
    let matched = proposals_by_id(split, proposals)?;
    let need_smil = || models.smil.ok_or_else(|| Error::invalid(format!("`{}` scoring needs a stage-1 model", scoring.as_str())));
    let need_pmil = || models.pmil.ok_or_else(|| Error::invalid(format!("`{}` scoring needs a stage-2 model", scoring.as_str())));
    let mut dets = match scoring {
        Scoring::Pmil => pmil_detections(need_pmil()?, split, &matched, config)?,
        Scoring::Smil => smil_detections(need_smil()?, split, &matched, config)?,
        Scoring::Fuse => {
            let s = smil_detections(need_smil()?, split, &matched, config)?;
            let p = pmil_detections(need_pmil()?, split, &matched, config)?;
            fuse_detections(&s, &p, &config.inference.soft_nms)
        }
        Scoring::Gt => {
            let mut out = Vec::new();
            for (record, p) in split.records.iter().zip(&matched) {
                out.extend(gt_detect(&p.actions(), record, split.num_classes, &config.inference)?);
            }
            out
        }
    };
    sort_detections(&mut dets);
    Ok(dets)
}

pub fn evaluate_split(dets: &[ScoredDetection], split: &Split, config: &RunConfig) -> Result<EvalReport> {
    evaluate(dets, &split.records, &split.class_names, &config.eval.iou_thresholds)
}
