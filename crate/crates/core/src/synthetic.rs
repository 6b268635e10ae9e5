//! Synthetic two-modality datasets for desk-scale end-to-end runs.
//!
//! Every segment inside an action instance carries a class-agnostic
//! "actionness" direction plus its class prototype. Only the central
//! `core_fraction` of each instance carries the prototype at full strength;
//! the remaining segments carry it at `periphery_strength`, so they look like
//! action but are hard to classify on their own. Background segments are
//! pure noise. RGB and FLOW use independent prototypes and noise.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    encode_features, segments_to_seconds, GroundTruthInstance, Manifest, VideoRecord,
    DEFAULT_SEGMENT_FRAMES, MANIFEST_VERSION,
};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const TRAIN_MANIFEST: &str = "manifest.json";
pub const TEST_MANIFEST: &str = "test_manifest.json";

/// Generator settings. Ranges are inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    #[serde(default)]
    pub num_test_videos: usize,
    #[serde(rename = "C")]
    pub num_classes: usize,
    #[serde(rename = "D")]
    pub feature_dim: usize,
    pub t_range: (usize, usize),
    pub instances_range: (usize, usize),
    pub instance_len_range: (usize, usize),
    pub separation: f64,
    pub noise_sigma: f64,
    pub core_fraction: f64,
    #[serde(default = "default_periphery_strength")]
    pub periphery_strength: f64,
    #[serde(default = "default_actionness")]
    pub actionness: f64,
    #[serde(default = "default_fps")]
    pub fps: f64,
    /// AR(1) coefficient of the noise along time; the marginal standard
    /// deviation stays `noise_sigma`.
    #[serde(default)]
    pub temporal_correlation: f64,
    pub seed: u64,
}


fn default_periphery_strength() -> f64 {
    0.2
}

fn default_actionness() -> f64 {
    2.0
}

fn default_fps() -> f64 {
    25.0
}

impl SyntheticSpec {
    /// A small three-class setup whose classes are well separated.
    pub fn small(num_videos: usize, num_test_videos: usize, seed: u64) -> Self {
        Self {
            num_videos,
            num_test_videos,
            num_classes: 3,
            feature_dim: 32,
            t_range: (48, 96),
            instances_range: (1, 3),
            instance_len_range: (6, 18),
            separation: 4.0,
            noise_sigma: 0.5,
            core_fraction: 0.4,
            periphery_strength: default_periphery_strength(),
            actionness: default_actionness(),
            fps: default_fps(),
            temporal_correlation: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (usize, usize)| lo <= hi;
        if self.num_classes == 0 || self.feature_dim == 0 {
            return Err(Error::invalid("C and D must be positive"));
        }
        if !range_ok(self.t_range) || self.t_range.0 == 0 {
            return Err(Error::invalid("t_range must be a nonempty range of positive lengths"));
        }
        if !range_ok(self.instances_range) || self.instances_range.1 == 0 {
            return Err(Error::invalid("instances_range must allow at least one instance"));
        }
        if !range_ok(self.instance_len_range) || self.instance_len_range.0 == 0 {
            return Err(Error::invalid("instance_len_range must be a nonempty positive range"));
        }
        if self.instance_len_range.0 > self.t_range.0 {
            return Err(Error::invalid("shortest video cannot hold the shortest instance"));
        }
        if !(self.core_fraction > 0.0 && self.core_fraction <= 1.0) {
            return Err(Error::invalid("core_fraction must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.temporal_correlation) {
            return Err(Error::invalid("temporal_correlation must lie in [0, 1)"));
        }
        if !(self.noise_sigma >= 0.0) || !self.separation.is_finite() || !(self.fps > 0.0) {
            return Err(Error::invalid("noise_sigma, separation and fps must be finite and valid"));
        }
        Ok(())
    }
}

/// Per-class directions used by the generator, exposed for calibration tests.
#[derive(Clone, Debug)]
pub struct Prototypes {
    /// `[modality][class]`, modality 0 = RGB, 1 = FLOW.
    pub class: [Vec<Vec<f64>>; 2],
    pub actionness: [Vec<f64>; 2],
}

/// One generated video held in memory.
#[derive(Clone, Debug)]
pub struct SyntheticVideo {
    pub record: VideoRecord,
    pub rgb: Matrix,
    pub flow: Matrix,
    /// Instances in segment coordinates: `(class, start, end)`.
    pub segments: Vec<(usize, usize, usize)>,
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn make_prototypes(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Prototypes {
    let mut draw_modality = || -> (Vec<Vec<f64>>, Vec<f64>) {
        let class = (0..spec.num_classes)
            .map(|_| {
                unit_vector(rng, spec.feature_dim)
                    .into_iter()
                    .map(|x| x * spec.separation)
                    .collect()
            })
            .collect();
        let act = unit_vector(rng, spec.feature_dim)
            .into_iter()
            .map(|x| x * spec.actionness)
            .collect();
        (class, act)
    };
    let (rgb_c, rgb_a) = draw_modality();
    let (flow_c, flow_a) = draw_modality();
    Prototypes {
        class: [rgb_c, flow_c],
        actionness: [rgb_a, flow_a],
    }
}

/// Non-overlapping instance placement with at least one background segment
/// between neighbours.
fn place_instances(spec: &SyntheticSpec, t: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let wanted = rng.random_range(spec.instances_range.0..=spec.instances_range.1).max(1);
    let mut lens: Vec<usize> = (0..wanted)
        .map(|_| rng.random_range(spec.instance_len_range.0..=spec.instance_len_range.1).min(t))
        .collect();
    while lens.len() > 1 && lens.iter().sum::<usize>() + (lens.len() - 1) > t {
        lens.pop();
    }
    let used: usize = lens.iter().sum::<usize>() + lens.len() - 1;
    let mut free = t - used;
    // split the free segments into len+1 gaps
    let mut gaps = vec![0usize; lens.len() + 1];
    while free > 0 {
        let g = rng.random_range(0..gaps.len());
        gaps[g] += 1;
        free -= 1;
    }
    let mut spans = Vec::with_capacity(lens.len());
    let mut cursor = gaps[0];
    for (i, &len) in lens.iter().enumerate() {
        spans.push((cursor, cursor + len));
        cursor += len + 1 + gaps[i + 1];
    }
    spans
}

fn generate_video(
    spec: &SyntheticSpec,
    protos: &Prototypes,
    video_id: String,
    rng: &mut ChaCha8Rng,
) -> SyntheticVideo {
    let t = rng.random_range(spec.t_range.0..=spec.t_range.1);
    let d = spec.feature_dim;
    let spans = place_instances(spec, t, rng);

    let mut classes: Vec<usize> = (0..spec.num_classes).collect();
    classes.shuffle(rng);
    let n_video_classes = if spec.num_classes > 1 && rng.random_bool(0.2) { 2 } else { 1 };
    let video_classes = &classes[..n_video_classes];

    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
    let mut feats = [Matrix::zeros(t, d), Matrix::zeros(t, d)];
    let rho = spec.temporal_correlation;
    let innovation = (1.0 - rho * rho).sqrt();
    for m in feats.iter_mut() {
        for v in m.data_mut() {
            *v = noise.sample(rng);
        }
        for seg in 1..t {
            for j in 0..d {
                let prev = m.get(seg - 1, j);
                let cur = m.get(seg, j);
                m.set(seg, j, rho * prev + innovation * cur);
            }
        }
    }

    let mut segments = Vec::with_capacity(spans.len());
    for (i, &(s, e)) in spans.iter().enumerate() {
        let class = if i < video_classes.len() {
            video_classes[i]
        } else {
            video_classes[rng.random_range(0..video_classes.len())]
        };
        let len = e - s;
        let core_len = ((len as f64 * spec.core_fraction).round() as usize).clamp(1, len);
        let core_start = s + (len - core_len) / 2;
        for seg in s..e {
            let strength = if seg >= core_start && seg < core_start + core_len {
                1.0
            } else {
                spec.periphery_strength
            };
            for (modality, m) in feats.iter_mut().enumerate() {
                let row = m.row_mut(seg);
                for j in 0..d {
                    row[j] += protos.actionness[modality][j] + strength * protos.class[modality][class][j];
                }
            }
        }
        segments.push((class, s, e));
    }
    segments.sort_by_key(|&(c, s, e)| (s, e, c));

    let mut labels = vec![0u8; spec.num_classes];
    let instances = segments
        .iter()
        .map(|&(c, s, e)| {
            labels[c] = 1;
            GroundTruthInstance {
                class_id: c,
                start_sec: segments_to_seconds(s as f64, spec.fps, DEFAULT_SEGMENT_FRAMES).expect("valid"),
                end_sec: segments_to_seconds(e as f64, spec.fps, DEFAULT_SEGMENT_FRAMES).expect("valid"),
            }
        })
        .collect();
    let [rgb, flow] = feats;
    SyntheticVideo {
        record: VideoRecord {
            rgb_path: format!("features/{video_id}.rgb.f32"),
            flow_path: format!("features/{video_id}.flow.f32"),
            video_id,
            num_segments: t,
            fps: spec.fps,
            segment_frames: DEFAULT_SEGMENT_FRAMES,
            labels,
            instances,
        },
        // f32 round trip so in-memory values equal what the loader will see
        rgb: rgb.map(|v| v as f32 as f64),
        flow: flow.map(|v| v as f32 as f64),
        segments,
    }
}

/// Generated splits held in memory.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub prototypes: Prototypes,
    pub train: Vec<SyntheticVideo>,
    pub test: Vec<SyntheticVideo>,
}

pub fn generate_in_memory(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes = make_prototypes(spec, &mut rng);
    let train = (0..spec.num_videos)
        .map(|i| generate_video(spec, &prototypes, format!("train_{i:04}"), &mut rng))
        .collect();
    let test = (0..spec.num_test_videos)
        .map(|i| generate_video(spec, &prototypes, format!("test_{i:04}"), &mut rng))
        .collect();
    Ok(SyntheticData {
        prototypes,
        train,
        test,
    })
}

/// Paths written by [`generate_synthetic`].
#[derive(Clone, Debug)]
pub struct GeneratedPaths {
    pub train_manifest: PathBuf,
    pub test_manifest: Option<PathBuf>,
}

/// Writes `manifest.json` (and `test_manifest.json` when test videos are
/// requested) plus a `features/` directory under `out_dir`.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: impl AsRef<Path>) -> Result<GeneratedPaths> {
    let out_dir = out_dir.as_ref();
    let data = generate_in_memory(spec)?;
    fs::create_dir_all(out_dir.join("features"))?;
    let class_names: Vec<String> = (0..spec.num_classes).map(|c| format!("action_{c}")).collect();
    let write_split = |videos: &[SyntheticVideo], name: &str| -> Result<PathBuf> {
        for v in videos {
            fs::write(out_dir.join(&v.record.rgb_path), encode_features(&v.rgb))?;
            fs::write(out_dir.join(&v.record.flow_path), encode_features(&v.flow))?;
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            num_classes: spec.num_classes,
            feature_dim: spec.feature_dim,
            class_names: class_names.clone(),
            videos: videos.iter().map(|v| v.record.clone()).collect(),
        };
        let path = out_dir.join(name);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(path)
    };
    let train_manifest = write_split(&data.train, TRAIN_MANIFEST)?;
    let test_manifest = if spec.num_test_videos > 0 {
        Some(write_split(&data.test, TEST_MANIFEST)?)
    } else {
        None
    };
    Ok(GeneratedPaths {
        train_manifest,
        test_manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_dataset;

    #[test]
    fn zero_videos_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let paths = generate_synthetic(&SyntheticSpec::small(0, 0, 1), dir.path()).unwrap();
        assert!(load_dataset(paths.train_manifest).unwrap().is_empty());
        assert!(paths.test_manifest.is_none());
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::small(3, 1, 99);
        generate_synthetic(&spec, a.path()).unwrap();
        generate_synthetic(&spec, b.path()).unwrap();
        for name in ["features/train_0002.rgb.f32", "features/test_0000.flow.f32", TRAIN_MANIFEST] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
    }

    #[test]
    fn loader_round_trip_and_label_consistency() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::small(6, 2, 5);
        let paths = generate_synthetic(&spec, dir.path()).unwrap();
        let mem = generate_in_memory(&spec).unwrap();
        let ds = load_dataset(&paths.train_manifest).unwrap();
        assert_eq!(ds.feature_dim, spec.feature_dim);
        for (rec, v) in ds.videos.iter().zip(&mem.train) {
            assert_eq!(rec, &v.record);
            let feats = ds.load_features(rec).unwrap();
            assert_eq!(feats.rgb, v.rgb);
            assert_eq!(feats.flow, v.flow);
            for c in 0..spec.num_classes {
                let has = rec.instances.iter().any(|i| i.class_id == c);
                assert_eq!(has, rec.labels[c] == 1);
            }
            for w in v.segments.windows(2) {
                assert!(w[0].2 < w[1].1, "instances must not overlap");
            }
        }
        assert_eq!(load_dataset(paths.test_manifest.unwrap()).unwrap().len(), 2);
    }

    #[test]
    fn nearest_prototype_separates_instances() {
        let mut spec = SyntheticSpec::small(60, 0, 2024);
        spec.separation = 4.0;
        spec.noise_sigma = 0.5;
        let data = generate_in_memory(&spec).unwrap();
        let (mut correct, mut total) = (0usize, 0usize);
        for v in &data.train {
            for &(class, s, e) in &v.segments {
                let mean: Vec<f64> = (0..spec.feature_dim)
                    .map(|j| (s..e).map(|t| v.rgb.get(t, j)).sum::<f64>() / (e - s) as f64)
                    .collect();
                let best = (0..spec.num_classes)
                    .max_by(|&a, &b| {
                        let da: f64 = mean.iter().zip(&data.prototypes.class[0][a]).map(|(x, p)| x * p).sum();
                        let db: f64 = mean.iter().zip(&data.prototypes.class[0][b]).map(|(x, p)| x * p).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                if best == class {
                    correct += e - s;
                }
                total += e - s;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc >= 0.95, "nearest-prototype segment accuracy {acc}");
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = SyntheticSpec::small(1, 0, 0);
        s.core_fraction = 0.0;
        assert!(s.validate().is_err());
        let mut s = SyntheticSpec::small(1, 0, 0);
        s.t_range = (10, 5);
        assert!(s.validate().is_err());
    }
}
