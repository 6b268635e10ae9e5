//! Dataset manifest, on-disk feature files and ground truth.
//!
//! A dataset is a JSON manifest plus two raw feature files per video
//! (`<video_id>.rgb.f32`, `<video_id>.flow.f32`), each holding `T × D`
//! little-endian `f32` values in row-major order. Feature paths in the
//! manifest are resolved relative to the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_SEGMENT_FRAMES: u32 = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub class_id: usize,
    pub start_sec: f64,
    pub end_sec: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    #[serde(rename = "T")]
    pub num_segments: usize,
    pub fps: f64,
    pub segment_frames: u32,
    pub labels: Vec<u8>,
    pub instances: Vec<GroundTruthInstance>,
    pub rgb_path: String,
    pub flow_path: String,
}

impl VideoRecord {
    pub fn to_segments(&self, t_sec: f64) -> Result<f64> {
        seconds_to_segments(t_sec, self.fps, self.segment_frames)
    }

    pub fn to_seconds(&self, t_seg: f64) -> Result<f64> {
        segments_to_seconds(t_seg, self.fps, self.segment_frames)
    }

    /// Classes with a positive video-level label.
    pub fn positive_classes(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != 0)
            .map(|(c, _)| c)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    #[serde(rename = "C")]
    pub num_classes: usize,
    #[serde(rename = "D")]
    pub feature_dim: usize,
    pub class_names: Vec<String>,
    pub videos: Vec<VideoRecord>,
}

/// Per-segment features for both modalities, `T × D` each.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentFeatures {
    pub rgb: Matrix,
    pub flow: Matrix,
}

impl SegmentFeatures {
    pub fn new(rgb: Matrix, flow: Matrix) -> Result<Self> {
        if rgb.rows() != flow.rows() || rgb.cols() != flow.cols() {
            return Err(Error::invalid(format!(
                "modalities disagree in shape: rgb {}x{}, flow {}x{}",
                rgb.rows(),
                rgb.cols(),
                flow.rows(),
                flow.cols()
            )));
        }
        if !rgb.is_finite() || !flow.is_finite() {
            return Err(Error::invalid("segment features contain non-finite values"));
        }
        Ok(Self { rgb, flow })
    }

    pub fn num_segments(&self) -> usize {
        self.rgb.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.rgb.cols()
    }

    /// RGB ‖ FLOW along the feature axis, `T × 2D`.
    pub fn fused(&self) -> Matrix {
        Matrix::hconcat(&[&self.rgb, &self.flow]).expect("modalities share T")
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub class_names: Vec<String>,
    pub videos: Vec<VideoRecord>,
}

impl Dataset {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn video(&self, video_id: &str) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }

    pub fn load_features(&self, video: &VideoRecord) -> Result<SegmentFeatures> {
        let load = |rel: &str| -> Result<Matrix> {
            let path = self.root.join(rel);
            let bytes = fs::read(&path).map_err(|e| Error::Load {
                video: video.video_id.clone(),
                reason: format!("{}: {e}", path.display()),
            })?;
            decode_features(&bytes, video.num_segments, self.feature_dim).map_err(|reason| {
                Error::Load {
                    video: video.video_id.clone(),
                    reason: format!("{}: {reason}", path.display()),
                }
            })
        };
        SegmentFeatures::new(load(&video.rgb_path)?, load(&video.flow_path)?).map_err(|e| {
            Error::Load {
                video: video.video_id.clone(),
                reason: e.to_string(),
            }
        })
    }

    pub fn load_all_features(&self) -> Result<Vec<SegmentFeatures>> {
        self.videos.iter().map(|v| self.load_features(v)).collect()
    }
}

fn decode_features(bytes: &[u8], rows: usize, cols: usize) -> std::result::Result<Matrix, String> {
    let expected = 4 * rows * cols;
    if bytes.len() != expected {
        return Err(format!(
            "feature file has {} bytes, expected {expected} (4·{rows}·{cols})",
            bytes.len()
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Matrix::from_vec(rows, cols, data).map_err(|e| e.to_string())
}

/// Serializes a matrix as little-endian `f32`, row-major.
pub fn encode_features(m: &Matrix) -> Vec<u8> {
    m.data()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

/// Reads and validates a manifest. Feature files are checked for existence
/// and byte length but not read.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| {
        Error::Dataset(format!("cannot read manifest {}: {e}", manifest_path.display()))
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("invalid manifest {}: {e}", manifest_path.display())))?;
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    validate_manifest(&manifest, &root)?;
    Ok(Dataset {
        root,
        num_classes: manifest.num_classes,
        feature_dim: manifest.feature_dim,
        class_names: manifest.class_names,
        videos: manifest.videos,
    })
}

fn validate_manifest(m: &Manifest, root: &Path) -> Result<()> {
    if m.version != MANIFEST_VERSION {
        return Err(Error::Dataset(format!(
            "unsupported manifest version {} (expected {MANIFEST_VERSION})",
            m.version
        )));
    }
    if m.class_names.len() != m.num_classes {
        return Err(Error::Dataset(format!(
            "{} class names for C={}",
            m.class_names.len(),
            m.num_classes
        )));
    }
    let mut seen = HashSet::new();
    for v in &m.videos {
        let fail = |reason: String| Error::Load {
            video: v.video_id.clone(),
            reason,
        };
        if !seen.insert(v.video_id.as_str()) {
            return Err(fail("duplicate video_id".into()));
        }
        if v.num_segments == 0 {
            return Err(fail("T must be at least 1".into()));
        }
        if !(v.fps > 0.0) || v.segment_frames == 0 {
            return Err(fail("fps and segment_frames must be positive".into()));
        }
        if v.labels.len() != m.num_classes || v.labels.iter().any(|&l| l > 1) {
            return Err(fail(format!("labels must be a binary vector of length {}", m.num_classes)));
        }
        for inst in &v.instances {
            if inst.class_id >= m.num_classes {
                return Err(fail(format!("instance class {} out of range", inst.class_id)));
            }
            if !(inst.start_sec >= 0.0 && inst.end_sec > inst.start_sec) {
                return Err(fail(format!(
                    "instance [{}, {}) is not a valid span",
                    inst.start_sec, inst.end_sec
                )));
            }
        }
        if !v.instances.is_empty() {
            for c in 0..m.num_classes {
                let has = v.instances.iter().any(|i| i.class_id == c);
                if has != (v.labels[c] == 1) {
                    return Err(fail(format!("label for class {c} disagrees with instances")));
                }
            }
        }
        let expected = 4 * v.num_segments as u64 * m.feature_dim as u64;
        for rel in [&v.rgb_path, &v.flow_path] {
            let path = root.join(rel);
            let meta = fs::metadata(&path).map_err(|e| fail(format!("{}: {e}", path.display())))?;
            if meta.len() != expected {
                return Err(fail(format!(
                    "{} has {} bytes, expected {expected}",
                    path.display(),
                    meta.len()
                )));
            }
        }
    }
    Ok(())
}

/// `t_seg = t_sec · fps / segment_frames`.
pub fn seconds_to_segments(t_sec: f64, fps: f64, segment_frames: u32) -> Result<f64> {
    if !(fps > 0.0) || segment_frames == 0 {
        return Err(Error::invalid("fps and segment_frames must be positive"));
    }
    if t_sec < 0.0 {
        return Err(Error::invalid(format!("negative time {t_sec}")));
    }
    Ok(t_sec * fps / segment_frames as f64)
}

/// Inverse of [`seconds_to_segments`].
pub fn segments_to_seconds(t_seg: f64, fps: f64, segment_frames: u32) -> Result<f64> {
    if !(fps > 0.0) || segment_frames == 0 {
        return Err(Error::invalid("fps and segment_frames must be positive"));
    }
    if t_seg < 0.0 {
        return Err(Error::invalid(format!("negative segment coordinate {t_seg}")));
    }
    Ok(t_seg * segment_frames as f64 / fps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_manifest(dir: &Path, videos: Vec<VideoRecord>, c: usize, d: usize) -> PathBuf {
        let m = Manifest {
            version: MANIFEST_VERSION,
            num_classes: c,
            feature_dim: d,
            class_names: (0..c).map(|i| format!("class{i}")).collect(),
            videos,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&m).unwrap()).unwrap();
        path
    }

    fn record(id: &str, t: usize) -> VideoRecord {
        VideoRecord {
            video_id: id.into(),
            num_segments: t,
            fps: 25.0,
            segment_frames: 16,
            labels: vec![1, 0],
            instances: vec![GroundTruthInstance {
                class_id: 0,
                start_sec: 0.64,
                end_sec: 2.56,
            }],
            rgb_path: format!("{id}.rgb.f32"),
            flow_path: format!("{id}.flow.f32"),
        }
    }

    #[test]
    fn empty_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), vec![], 2, 4);
        assert!(load_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn one_video_with_160_byte_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix::from_vec(10, 4, (0..40).map(|i| i as f64 * 0.5).collect()).unwrap();
        let bytes = encode_features(&m);
        assert_eq!(bytes.len(), 160);
        fs::write(dir.path().join("v0.rgb.f32"), &bytes).unwrap();
        fs::write(dir.path().join("v0.flow.f32"), &bytes).unwrap();
        let path = write_manifest(dir.path(), vec![record("v0", 10)], 2, 4);
        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.len(), 1);
        let feats = ds.load_features(&ds.videos[0]).unwrap();
        assert_eq!(feats.rgb, m);
        assert_eq!(feats.fused().cols(), 8);
    }

    #[test]
    fn truncated_file_names_video() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("vid7.rgb.f32"), vec![0u8; 160]).unwrap();
        fs::write(dir.path().join("vid7.flow.f32"), vec![0u8; 156]).unwrap();
        let path = write_manifest(dir.path(), vec![record("vid7", 10)], 2, 4);
        let err = load_dataset(&path).unwrap_err();
        assert!(matches!(&err, Error::Load { video, .. } if video == "vid7"), "{err}");
    }

    #[test]
    fn missing_file_and_duplicates_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), vec![record("gone", 10)], 2, 4);
        assert!(matches!(load_dataset(&path), Err(Error::Load { .. })));

        fs::write(dir.path().join("a.rgb.f32"), vec![0u8; 160]).unwrap();
        fs::write(dir.path().join("a.flow.f32"), vec![0u8; 160]).unwrap();
        let path = write_manifest(dir.path(), vec![record("a", 10), record("a", 10)], 2, 4);
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn inconsistent_labels_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.rgb.f32"), vec![0u8; 160]).unwrap();
        fs::write(dir.path().join("a.flow.f32"), vec![0u8; 160]).unwrap();
        let mut r = record("a", 10);
        r.labels = vec![1, 1];
        let path = write_manifest(dir.path(), vec![r], 2, 4);
        assert!(load_dataset(&path).is_err());
    }

    #[test]
    fn time_conversion() {
        assert_eq!(seconds_to_segments(0.0, 30.0, 16).unwrap(), 0.0);
        assert_eq!(seconds_to_segments(8.0, 30.0, 16).unwrap(), 15.0);
        assert!(seconds_to_segments(-1.0, 30.0, 16).is_err());
        assert!(seconds_to_segments(1.0, 0.0, 16).is_err());
        for x in [0.0, 0.3, 7.77, 123.456] {
            let sec = segments_to_seconds(x, 29.97, 16).unwrap();
            let back = seconds_to_segments(sec, 29.97, 16).unwrap();
            assert!((back - x).abs() < 1e-9);
        }
    }
}
