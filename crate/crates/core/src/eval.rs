//! mAP at temporal IoU thresholds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::VideoRecord;
use crate::error::{Error, Result};
use crate::infer::sort_detections;
use crate::proposals::{span_iou, ScoredDetection};

pub const DEFAULT_IOU_THRESHOLDS: [f64; 7] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];

/// Averaging bands reported alongside per-threshold mAP.
pub const DEFAULT_BANDS: [(f64, f64); 3] = [(0.1, 0.5), (0.3, 0.7), (0.1, 0.7)];

/// Non-interpolated AP of one class. `dets` must be sorted by score
/// descending; each is `(video_id, start, end)`. Ground truth is
/// `(video_id, start, end)` as well. Each detection is matched to the
/// unmatched ground truth of its video with the highest IoU (lowest index on
/// ties) and counts as a true positive if that IoU reaches the threshold.
pub fn average_precision(dets: &[(&str, f64, f64)], gt: &[(&str, f64, f64)], iou_threshold: f64) -> f64 {
    if gt.is_empty() {
        return 0.0;
    }
    let mut used = vec![false; gt.len()];
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (k, &(video, s, e)) in dets.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, &(gv, gs, ge)) in gt.iter().enumerate() {
            if used[j] || gv != video {
                continue;
            }
            let iou = span_iou(s, e, gs, ge);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, iou)) = best {
            if iou >= iou_threshold {
                used[j] = true;
                tp += 1;
                ap += tp as f64 / (k + 1) as f64;
            }
        }
    }
    ap / gt.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub class_name: String,
    pub num_gt: usize,
    pub num_detections: usize,
    /// One AP per IoU threshold.
    pub ap: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandAverage {
    pub name: String,
    pub low: f64,
    pub high: f64,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    /// Mean AP over classes with ground truth, one per threshold.
    pub map: Vec<f64>,
    pub per_class: Vec<ClassAp>,
    pub bands: Vec<BandAverage>,
    pub num_detections: usize,
    pub num_ground_truth: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
}

impl EvalReport {
    pub fn band(&self, name: &str) -> Option<f64> {
        self.bands.iter().find(|b| b.name == name).map(|b| b.map)
    }

    /// Mean over every evaluated threshold.
    pub fn average_map(&self) -> f64 {
        self.map.iter().sum::<f64>() / self.map.len() as f64
    }

    /// Plain-text table: one column per threshold, then the bands.
    pub fn to_table(&self) -> String {
        let mut header = String::from("mAP@IoU (%)");
        let mut row = String::from("           ");
        for t in &self.iou_thresholds {
            let _ = write!(header, " | {t:>5.2}");
        }
        for m in &self.map {
            let _ = write!(row, " | {:>5.1}", 100.0 * m);
        }
        for b in &self.bands {
            let _ = write!(header, " | AVG({})", b.name);
            let w = b.name.len() + 5;
            let _ = write!(row, " | {:>w$.1}", 100.0 * b.map);
        }
        format!("{header}\n{row}\n")
    }
}

fn band_name(low: f64, high: f64) -> String {
    format!("{low:.1}:{high:.1}")
}

/// Evaluates detections against the ground truth of `videos`. Detections of
/// videos outside the set are an error.
pub fn evaluate(
    dets: &[ScoredDetection],
    videos: &[VideoRecord],
    class_names: &[String],
    iou_thresholds: &[f64],
) -> Result<EvalReport> {
    if iou_thresholds.is_empty() || iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(Error::Eval("IoU thresholds must lie in (0, 1]".into()));
    }
    let num_classes = class_names.len();
    let known: BTreeMap<&str, &VideoRecord> = videos.iter().map(|v| (v.video_id.as_str(), v)).collect();
    let mut gt: Vec<Vec<(&str, f64, f64)>> = vec![Vec::new(); num_classes];
    for v in videos {
        for g in &v.instances {
            if g.class_id >= num_classes {
                return Err(Error::Eval(format!("ground-truth class {} out of range", g.class_id)));
            }
            gt[g.class_id].push((v.video_id.as_str(), g.start_sec, g.end_sec));
        }
    }
    let num_ground_truth: usize = gt.iter().map(Vec::len).sum();
    if num_ground_truth == 0 {
        return Err(Error::Eval("no ground-truth instances to evaluate against".into()));
    }
    let mut sorted = dets.to_vec();
    sort_detections(&mut sorted);
    let mut per_class_dets: Vec<Vec<(&str, f64, f64)>> = vec![Vec::new(); num_classes];
    for d in &sorted {
        if !known.contains_key(d.video_id.as_str()) {
            return Err(Error::Eval(format!("detection for unknown video `{}`", d.video_id)));
        }
        if d.class_id >= num_classes {
            return Err(Error::Eval(format!("detection class {} out of range", d.class_id)));
        }
        per_class_dets[d.class_id].push((d.video_id.as_str(), d.start_sec, d.end_sec));
    }

    let per_class: Vec<ClassAp> = (0..num_classes)
        .map(|c| ClassAp {
            class_id: c,
            class_name: class_names[c].clone(),
            num_gt: gt[c].len(),
            num_detections: per_class_dets[c].len(),
            ap: iou_thresholds
                .iter()
                .map(|&t| average_precision(&per_class_dets[c], &gt[c], t))
                .collect(),
        })
        .collect();
    let scored: Vec<&ClassAp> = per_class.iter().filter(|c| c.num_gt > 0).collect();
    let map: Vec<f64> = (0..iou_thresholds.len())
        .map(|i| scored.iter().map(|c| c.ap[i]).sum::<f64>() / scored.len() as f64)
        .collect();
    let bands = DEFAULT_BANDS
        .iter()
        .filter_map(|&(low, high)| {
            let members: Vec<f64> = iou_thresholds
                .iter()
                .zip(&map)
                .filter(|(t, _)| **t >= low - 1e-9 && **t <= high + 1e-9)
                .map(|(_, m)| *m)
                .collect();
            (!members.is_empty()).then(|| BandAverage {
                name: band_name(low, high),
                low,
                high,
                map: members.iter().sum::<f64>() / members.len() as f64,
            })
        })
        .collect();
    Ok(EvalReport {
        iou_thresholds: iou_thresholds.to_vec(),
        map,
        per_class,
        bands,
        num_detections: dets.len(),
        num_ground_truth,
        fingerprint: None,
    })
}

/// On-disk detection entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub video_id: String,
    pub class_id: usize,
    pub class_name: String,
    pub start_sec: f64,
    pub end_sec: f64,
    pub score: f64,
}

pub fn write_detections(path: impl AsRef<Path>, dets: &[ScoredDetection], class_names: &[String]) -> Result<()> {
    let records = dets
        .iter()
        .map(|d| {
            let class_name = class_names
                .get(d.class_id)
                .ok_or_else(|| Error::invalid(format!("class {} has no name", d.class_id)))?
                .clone();
            Ok(DetectionRecord {
                video_id: d.video_id.clone(),
                class_id: d.class_id,
                class_name,
                start_sec: d.start_sec,
                end_sec: d.end_sec,
                score: d.score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    fs::write(path, serde_json::to_string_pretty(&records)? + "\n")?;
    Ok(())
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<ScoredDetection>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Dataset(format!("cannot read detections {}: {e}", path.display())))?;
    let records: Vec<DetectionRecord> = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("invalid detection file {}: {e}", path.display())))?;
    Ok(records
        .into_iter()
        .map(|r| ScoredDetection {
            video_id: r.video_id,
            class_id: r.class_id,
            start_sec: r.start_sec,
            end_sec: r.end_sec,
            score: r.score,
        })
        .collect())
}

pub fn write_report(path: impl AsRef<Path>, report: &EvalReport) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(report)? + "\n")?;
    Ok(())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Dataset(format!("cannot read report {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("invalid report {}: {e}", path.display())))
}
