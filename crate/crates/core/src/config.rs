//! Run configuration: one JSON document with full defaulting, validation,
//! ablation switches and a content fingerprint.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::DEFAULT_IOU_THRESHOLDS;
use crate::infer::InferenceConfig;
use crate::pmil::{PmilTrainConfig, ScfeMode};
use crate::proposals::CandidateConfig;
use crate::smil::SmilTrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub iou_thresholds: Vec<f64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            iou_thresholds: DEFAULT_IOU_THRESHOLDS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataPaths,
    pub smil: SmilTrainConfig,
    pub proposals: CandidateConfig,
    pub pmil: PmilTrainConfig,
    pub inference: InferenceConfig,
    pub eval: EvalSettings,
}

/// Defaults taken from the published method, as dotted key paths.
pub const PUBLISHED_DEFAULTS: &[&str] = &[
    "smil.adam.lr",
    "smil.batch_size",
    "proposals.theta_act",
    "proposals.theta_bkg",
    "pmil.adam.lr",
    "pmil.batch_size",
    "pmil.alpha",
    "pmil.roi_bins",
    "pmil.pce.gamma",
    "pmil.lambda_comp",
    "pmil.lambda_irc",
    "inference.theta_cls",
];

/// A switch flipped relative to the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    ScfeMode(ScfeMode),
    NoPce,
    NoIrc,
    NoBackground,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_pce" => Ok(Ablation::NoPce),
            "no_irc" => Ok(Ablation::NoIrc),
            "no_background" => Ok(Ablation::NoBackground),
            _ => match s.strip_prefix("scfe_mode=") {
                Some(mode) => Ok(Ablation::ScfeMode(mode.parse().map_err(|e: Error| Error::Config(e.to_string()))?)),
                None => Err(Error::Config(format!(
                    "unknown ablation `{s}` (expected scfe_mode=<contrast|concat|no_extend>, no_pce, no_irc or no_background)"
                ))),
            },
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        Self::from_value(value)
    }

    /// Accepts a plain config or an emitted resolved config (the
    /// `published_defaults` annotation is ignored).
    pub fn from_value(mut value: Value) -> Result<Self> {
        if let Some(obj) = value.as_object_mut() {
            obj.remove("published_defaults");
        }
        let config: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn apply_ablation(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::ScfeMode(mode) => self.pmil.scfe_mode = mode,
            Ablation::NoPce => self.pmil.enable_pce = false,
            Ablation::NoIrc => self.pmil.enable_irc = false,
            Ablation::NoBackground => {
                self.proposals.include_background = false;
                self.pmil.include_background = false;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit_open = |name: &str, v: f64| -> Result<()> {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must lie in (0, 1)")))
            }
        };
        let non_negative = |name: &str, v: f64| -> Result<()> {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must be a finite non-negative number")))
            }
        };
        let positive = |name: &str, v: f64| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must be positive")))
            }
        };
        self.proposals
            .validate()
            .map_err(|e| Error::Config(format!("proposals: {e}")))?;
        for (name, adam) in [("smil", &self.smil.adam), ("pmil", &self.pmil.adam)] {
            positive(&format!("{name}.adam.lr"), adam.lr)?;
            positive(&format!("{name}.adam.eps"), adam.eps)?;
            if !(0.0..1.0).contains(&adam.beta1) || !(0.0..1.0).contains(&adam.beta2) {
                return Err(Error::Config(format!("{name}.adam betas must lie in [0, 1)")));
            }
        }
        for (name, batch, hidden, k) in [
            ("smil", self.smil.batch_size, self.smil.hidden, self.smil.k_ratio),
            ("pmil", self.pmil.batch_size, self.pmil.hidden, self.pmil.k_ratio),
        ] {
            if batch == 0 || hidden == 0 {
                return Err(Error::Config(format!("{name}: batch_size and hidden must be positive")));
            }
            if !(k > 0.0 && k <= 1.0) {
                return Err(Error::Config(format!("{name}.k_ratio = {k} must lie in (0, 1]")));
            }
        }
        non_negative("smil.lambda_norm", self.smil.lambda_norm)?;
        non_negative("pmil.lambda_comp", self.pmil.lambda_comp)?;
        non_negative("pmil.lambda_irc", self.pmil.lambda_irc)?;
        non_negative("pmil.alpha", self.pmil.alpha)?;
        unit_open("pmil.pce.gamma", self.pmil.pce.gamma)?;
        if !(0.0..1.0).contains(&self.pmil.pce.nms_threshold) {
            return Err(Error::Config("pmil.pce.nms_threshold must lie in [0, 1)".into()));
        }
        let bins = &self.pmil.roi_bins;
        if bins.inner == 0 || (self.pmil.scfe_mode != ScfeMode::NoExtend && (bins.left == 0 || bins.right == 0)) {
            return Err(Error::Config("pmil.roi_bins must be positive".into()));
        }
        self.inference.validate()?;
        positive("inference.soft_nms.sigma", self.inference.soft_nms.sigma)?;
        if self.eval.iou_thresholds.is_empty() {
            return Err(Error::Config("eval.iou_thresholds is empty".into()));
        }
        for &t in &self.eval.iou_thresholds {
            unit_open("eval.iou_thresholds", t)?;
        }
        Ok(())
    }

    /// Stage-1 trainer settings with the run seed.
    pub fn smil_config(&self) -> SmilTrainConfig {
        SmilTrainConfig {
            seed: self.seed,
            ..self.smil.clone()
        }
    }

    /// Stage-2 trainer settings with the run seed; the background switch
    /// follows the proposal settings.
    pub fn pmil_config(&self) -> PmilTrainConfig {
        PmilTrainConfig {
            seed: self.seed.wrapping_add(0x5eed),
            include_background: self.pmil.include_background && self.proposals.include_background,
            ..self.pmil.clone()
        }
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// The config as JSON with a `published_defaults` section listing which
    /// keys carry published values and whether they are still at them.
    pub fn resolved_json(&self) -> Value {
        let mut value = serde_json::to_value(self).expect("config serializes");
        let defaults = serde_json::to_value(RunConfig::default()).expect("config serializes");
        let annotations: serde_json::Map<String, Value> = PUBLISHED_DEFAULTS
            .iter()
            .map(|key| {
                let published = lookup(&defaults, key).cloned().unwrap_or(Value::Null);
                let current = lookup(&value, key).cloned().unwrap_or(Value::Null);
                let status = json!({ "published": published, "overridden": published != current });
                (key.to_string(), status)
            })
            .collect();
        value
            .as_object_mut()
            .expect("object")
            .insert("published_defaults".into(), Value::Object(annotations));
        value
    }
}

fn lookup<'a>(value: &'a Value, dotted: &str) -> Option<&'a Value> {
    dotted.split('.').try_fold(value, |v, k| v.get(k))
}

/// Sidecar written next to every command output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputMeta {
    pub command: String,
    pub fingerprint: String,
    pub config: Value,
}

pub fn meta_path(output: impl AsRef<Path>) -> PathBuf {
    let output = output.as_ref();
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    output.with_file_name(name)
}

pub fn write_meta(output: impl AsRef<Path>, command: &str, config: &RunConfig) -> Result<()> {
    let meta = OutputMeta {
        command: command.to_string(),
        fingerprint: config.fingerprint(),
        config: config.resolved_json(),
    };
    fs::write(meta_path(output), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

pub fn read_meta(output: impl AsRef<Path>) -> Result<OutputMeta> {
    let path = meta_path(output);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("invalid {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.smil.adam.lr, 5e-5);
        assert_eq!(c.pmil.lambda_comp, 20.0);
        assert_eq!(c.inference.theta_cls, 0.2);
    }

    #[test]
    fn partial_override_and_fingerprint() {
        let c = RunConfig::from_json(r#"{"seed": 3, "pmil": {"pce": {"gamma": 0.7}}}"#).unwrap();
        assert_eq!(c.pmil.pce.gamma, 0.7);
        assert_eq!(c.pmil.pce.nms_threshold, 0.0);
        assert_ne!(c.fingerprint(), RunConfig::default().fingerprint());
        assert_eq!(c.fingerprint(), c.clone().fingerprint());
        assert_eq!(c.fingerprint().len(), 64);
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = RunConfig::default();
        c.pmil.lambda_irc = 1.0;
        let v = c.resolved_json();
        assert_eq!(v["published_defaults"]["pmil.lambda_irc"]["overridden"], json!(true));
        assert_eq!(v["published_defaults"]["pmil.lambda_comp"]["overridden"], json!(false));
        assert_eq!(RunConfig::from_value(v).unwrap(), c);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for doc in [
            r#"{"pmil": {"lambda_comp": -1}}"#,
            r#"{"inference": {"theta_cls": 2}}"#,
            r#"{"eval": {"iou_thresholds": []}}"#,
            r#"{"proposals": {"theta_act": [1.5]}}"#,
            r#"{"smil": {"batch_size": 0}}"#,
            r#"{"pmil": {"scfe_mode": "bogus"}}"#,
            "[1, 2]",
        ] {
            assert!(matches!(RunConfig::from_json(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn ablations_parse_and_apply() {
        let mut c = RunConfig::default();
        for a in ["scfe_mode=concat", "no_pce", "no_irc", "no_background"] {
            c.apply_ablation(a.parse().unwrap());
        }
        assert_eq!(c.pmil.scfe_mode, ScfeMode::Concat);
        assert!(!c.pmil.enable_pce && !c.pmil.enable_irc);
        assert!(!c.pmil_config().include_background);
        assert!("scfe_mode".parse::<Ablation>().is_err());
    }

    #[test]
    fn meta_sidecar_path() {
        assert_eq!(meta_path("out/dets.json"), PathBuf::from("out/dets.json.meta.json"));
    }
}
