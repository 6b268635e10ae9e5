//! Segment-based MIL (stage 1): a class-agnostic attention branch and a
//! classification branch over concatenated RGB‖FLOW segment features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::AdamConfig;
use crate::data::{Dataset, SegmentFeatures};
use crate::error::{Error, Result};
use crate::mil::MilScores;
use crate::nn::{Mlp2, OutputActivation, Parameters};
use crate::numerics::Matrix;
use crate::proposals::Proposal;
use crate::train::{run_epochs, EpochLog, LoopSettings, LossBreakdown};

pub type SmilOutput = MilScores;

#[derive(Clone, Debug, PartialEq)]
pub struct SmilParams {
    pub attention_head: Mlp2,
    pub classification_head: Mlp2,
}

impl SmilParams {
    /// `d_model` is the fused feature width (2·D).
    pub fn new(seed: u64, d_model: usize, hidden: usize, num_classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            attention_head: Mlp2::new(&mut rng, d_model, hidden, 1, OutputActivation::Sigmoid),
            classification_head: Mlp2::new(&mut rng, d_model, hidden, num_classes + 1, OutputActivation::Identity),
        }
    }

    pub fn zeros(d_model: usize, hidden: usize, num_classes: usize) -> Self {
        Self {
            attention_head: Mlp2::zeros(d_model, hidden, 1, OutputActivation::Sigmoid),
            classification_head: Mlp2::zeros(d_model, hidden, num_classes + 1, OutputActivation::Identity),
        }
    }

    pub fn d_model(&self) -> usize {
        self.attention_head.d_in()
    }

    pub fn num_classes(&self) -> usize {
        self.classification_head.d_out() - 1
    }

    pub fn validate(&self) -> Result<()> {
        self.attention_head.validate()?;
        self.classification_head.validate()?;
        if self.attention_head.d_out() != 1
            || self.classification_head.d_in() != self.attention_head.d_in()
            || self.classification_head.d_out() < 2
            || self.attention_head.output_activation != OutputActivation::Sigmoid
        {
            return Err(Error::invalid("inconsistent stage-1 head shapes"));
        }
        Ok(())
    }
}

impl Parameters for SmilParams {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        self.attention_head.named_blocks("attention", &mut out);
        self.classification_head.named_blocks("classification", &mut out);
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.attention_head.blocks_mut_into(&mut out);
        self.classification_head.blocks_mut_into(&mut out);
        out
    }

    fn zeros_like(&self) -> Self {
        Self {
            attention_head: self.attention_head.zeros_like(),
            classification_head: self.classification_head.zeros_like(),
        }
    }
}

pub fn smil_forward(params: &SmilParams, feats: &SegmentFeatures, k_ratio: f64) -> Result<SmilOutput> {
    forward_fused(params, &feats.fused(), k_ratio)
}

fn forward_fused(params: &SmilParams, x: &Matrix, k_ratio: f64) -> Result<SmilOutput> {
    let attention = params.attention_head.forward(x)?.into_data();
    let s_base = params.classification_head.forward(x)?;
    MilScores::new(attention, s_base, k_ratio)
}

pub fn smil_cls_loss(output: &SmilOutput, labels: &[u8]) -> Result<f64> {
    output.cls_loss(labels)
}

/// `(1/T) Σ |A(t)|`.
pub fn sparsity_loss(attention: &[f64]) -> f64 {
    attention.iter().map(|a| a.abs()).sum::<f64>() / attention.len().max(1) as f64
}

pub fn smil_total_loss(output: &SmilOutput, labels: &[u8], lambda_norm: f64) -> Result<f64> {
    Ok(smil_cls_loss(output, labels)? + lambda_norm * sparsity_loss(&output.attention))
}

/// Loss and parameter gradients of [`smil_total_loss`] on fused features `x`.
pub fn smil_loss_and_grad(
    params: &SmilParams,
    x: &Matrix,
    labels: &[u8],
    k_ratio: f64,
    lambda_norm: f64,
) -> Result<(LossBreakdown, SmilParams)> {
    let (att_out, att_cache) = params.attention_head.forward_cached(x)?;
    let (s_base, cls_cache) = params.classification_head.forward_cached(x)?;
    let out = MilScores::new(att_out.into_data(), s_base, k_ratio)?;
    let cls = out.cls_loss(labels)?;
    let sparsity = sparsity_loss(&out.attention);

    let (mut d_attention, d_base) = out.cls_loss_backward(labels, 1.0)?;
    let t = d_attention.len() as f64;
    for (d, a) in d_attention.iter_mut().zip(&out.attention) {
        *d += lambda_norm * a.signum() / t;
    }
    let mut grads = params.zeros_like();
    params.attention_head.backward(
        x,
        &att_cache,
        &Matrix::column_vector(&d_attention),
        &mut grads.attention_head,
        false,
    )?;
    params
        .classification_head
        .backward(x, &cls_cache, &d_base, &mut grads.classification_head, false)?;
    Ok((
        LossBreakdown {
            total: cls + lambda_norm * sparsity,
            parts: vec![("cls", cls), ("sparsity", sparsity)],
        },
        grads,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmilTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub lambda_norm: f64,
    pub k_ratio: f64,
    pub hidden: usize,
    /// Supplied by the run configuration.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SmilTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 10,
            adam: AdamConfig::default(),
            lambda_norm: 0.8,
            k_ratio: 1.0 / 8.0,
            hidden: 512,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SmilTrained {
    pub params: SmilParams,
    pub log: Vec<EpochLog>,
}

/// Trains from a fresh seeded initialization.
pub fn train_smil(dataset: &Dataset, config: &SmilTrainConfig) -> Result<SmilTrained> {
    let feats = dataset.load_all_features()?;
    let labels: Vec<Vec<u8>> = dataset.videos.iter().map(|v| v.labels.clone()).collect();
    let ids: Vec<String> = dataset.videos.iter().map(|v| v.video_id.clone()).collect();
    train_smil_on(&feats, &labels, &ids, dataset.num_classes, config)
}

/// In-memory variant of [`train_smil`].
pub fn train_smil_on(
    feats: &[SegmentFeatures],
    labels: &[Vec<u8>],
    video_ids: &[String],
    num_classes: usize,
    config: &SmilTrainConfig,
) -> Result<SmilTrained> {
    if feats.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if labels.iter().any(|l| l.len() != num_classes) {
        return Err(Error::invalid("every training video needs a label vector of length C"));
    }
    let d_model = 2 * feats[0].feature_dim();
    let mut params = SmilParams::new(config.seed, d_model, config.hidden, num_classes);
    let fused: Vec<Matrix> = feats.iter().map(SegmentFeatures::fused).collect();
    let log = run_epochs(
        &mut params,
        video_ids,
        LoopSettings {
            epochs: config.epochs,
            batch_size: config.batch_size,
            adam: &config.adam,
            seed: config.seed.wrapping_add(1),
        },
        |p, v, _epoch| smil_loss_and_grad(p, &fused[v], &labels[v], config.k_ratio, config.lambda_norm),
    )?;
    Ok(SmilTrained { params, log })
}

/// Width of the outer margin on each side: a quarter of the proposal length,
/// at least one segment.
pub fn outer_margin(len: usize) -> usize {
    ((len as f64) * 0.25).ceil().max(1.0) as usize
}

/// Outer-Inner contrast of one CAS column: mean inside the proposal minus the
/// mean over the margins on both sides (clamped to the video). When both
/// margins are clamped away the outer term is 0.
pub fn outer_inner_score(cas: &[f64], p: &Proposal) -> Result<f64> {
    let t = cas.len();
    if p.end <= p.start {
        return Err(Error::invalid(format!("degenerate proposal [{}, {})", p.start, p.end)));
    }
    if p.end > t {
        return Err(Error::invalid(format!("proposal [{}, {}) exceeds T={t}", p.start, p.end)));
    }
    let inner = cas[p.start..p.end].iter().sum::<f64>() / p.len() as f64;
    let m = outer_margin(p.len());
    let left = p.start.saturating_sub(m)..p.start;
    let right = p.end..(p.end + m).min(t);
    let count = left.len() + right.len();
    let outer = if count == 0 {
        0.0
    } else {
        (cas[left].iter().sum::<f64>() + cas[right].iter().sum::<f64>()) / count as f64
    };
    Ok(inner - outer)
}

/// Outer-Inner scores of `proposals` on the suppressed CAS column `class_id`.
pub fn smil_score_proposals(output: &SmilOutput, proposals: &[Proposal], class_id: usize) -> Result<Vec<f64>> {
    if class_id >= output.s_supp.cols() {
        return Err(Error::invalid(format!("class {class_id} out of range")));
    }
    let cas = output.s_supp.column(class_id);
    proposals.iter().map(|p| outer_inner_score(&cas, p)).collect()
}
