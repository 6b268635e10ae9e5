//! Proposal-based MIL (stage 2).
//!
//! Candidate proposals are turned into features by the surrounding
//! contrastive extractor ([`roi`]), then scored by three heads on the fused
//! RGB‖FLOW stream: attention, completeness and classification. Two extra
//! classification branches, one per modality, only feed the rank-consistency
//! loss ([`irc`]). Completeness targets come from [`pce`].

pub mod irc;
pub mod pce;
pub mod roi;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::AdamConfig;
use crate::data::SegmentFeatures;
use crate::error::{Error, Result};
use crate::mil::MilScores;
use crate::nn::{Mlp2, Mlp2Cache, OutputActivation, Parameters, ReluLinear};
use crate::numerics::Matrix;
use crate::proposals::{Proposal, ProposalKind};
use crate::train::{run_epochs, EpochLog, LoopSettings, LossBreakdown};

pub use irc::{irc_clusters, irc_loss, irc_loss_and_grad};
pub use pce::{completeness_loss, completeness_loss_grad, pce_pseudo_labels, PseudoLabelSet};
pub use roi::{extract_region_features, roi_align_1d, scfe_input, RegionFeatures, RoiBins, ScfeMode};

#[derive(Clone, Debug, PartialEq)]
pub struct PmilParams {
    pub scfe_mode: ScfeMode,
    pub scfe_fused: ReluLinear,
    pub scfe_rgb: ReluLinear,
    pub scfe_flow: ReluLinear,
    pub attention_head: Mlp2,
    pub completeness_head: Mlp2,
    pub cls_fused: Mlp2,
    pub cls_rgb: Mlp2,
    pub cls_flow: Mlp2,
}

impl PmilParams {
    /// `feature_dim` is the per-modality width D.
    pub fn new(seed: u64, feature_dim: usize, hidden: usize, num_classes: usize, scfe_mode: ScfeMode) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (df, d) = (2 * feature_dim, feature_dim);
        let k = num_classes + 1;
        Self {
            scfe_mode,
            scfe_fused: ReluLinear::new(&mut rng, scfe_mode.input_dim(df), df),
            scfe_rgb: ReluLinear::new(&mut rng, scfe_mode.input_dim(d), d),
            scfe_flow: ReluLinear::new(&mut rng, scfe_mode.input_dim(d), d),
            attention_head: Mlp2::new(&mut rng, df, hidden, 1, OutputActivation::Sigmoid),
            completeness_head: Mlp2::new(&mut rng, df, hidden, 1, OutputActivation::Sigmoid),
            cls_fused: Mlp2::new(&mut rng, df, hidden, k, OutputActivation::Identity),
            cls_rgb: Mlp2::new(&mut rng, d, hidden, k, OutputActivation::Identity),
            cls_flow: Mlp2::new(&mut rng, d, hidden, k, OutputActivation::Identity),
        }
    }

    pub fn zeros(feature_dim: usize, hidden: usize, num_classes: usize, scfe_mode: ScfeMode) -> Self {
        let (df, d) = (2 * feature_dim, feature_dim);
        let k = num_classes + 1;
        Self {
            scfe_mode,
            scfe_fused: ReluLinear::zeros(scfe_mode.input_dim(df), df),
            scfe_rgb: ReluLinear::zeros(scfe_mode.input_dim(d), d),
            scfe_flow: ReluLinear::zeros(scfe_mode.input_dim(d), d),
            attention_head: Mlp2::zeros(df, hidden, 1, OutputActivation::Sigmoid),
            completeness_head: Mlp2::zeros(df, hidden, 1, OutputActivation::Sigmoid),
            cls_fused: Mlp2::zeros(df, hidden, k, OutputActivation::Identity),
            cls_rgb: Mlp2::zeros(d, hidden, k, OutputActivation::Identity),
            cls_flow: Mlp2::zeros(d, hidden, k, OutputActivation::Identity),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.scfe_rgb.d_out()
    }

    pub fn num_classes(&self) -> usize {
        self.cls_fused.d_out() - 1
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.feature_dim();
        let df = 2 * d;
        let k = self.cls_fused.d_out();
        for head in [
            &self.attention_head,
            &self.completeness_head,
            &self.cls_fused,
            &self.cls_rgb,
            &self.cls_flow,
        ] {
            head.validate()?;
        }
        let ok = self.scfe_fused.d_in() == self.scfe_mode.input_dim(df)
            && self.scfe_fused.d_out() == df
            && self.scfe_rgb.d_in() == self.scfe_mode.input_dim(d)
            && self.scfe_flow.d_in() == self.scfe_mode.input_dim(d)
            && self.scfe_flow.d_out() == d
            && self.scfe_fused.bias.len() == df
            && self.scfe_rgb.bias.len() == d
            && self.scfe_flow.bias.len() == d
            && self.attention_head.d_in() == df
            && self.attention_head.d_out() == 1
            && self.completeness_head.d_in() == df
            && self.completeness_head.d_out() == 1
            && self.cls_fused.d_in() == df
            && self.cls_rgb.d_in() == d
            && self.cls_flow.d_in() == d
            && self.cls_rgb.d_out() == k
            && self.cls_flow.d_out() == k
            && k >= 2;
        if !ok {
            return Err(Error::invalid("inconsistent stage-2 parameter shapes"));
        }
        Ok(())
    }
}

impl Parameters for PmilParams {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        self.scfe_fused.named_blocks("scfe_fused", &mut out);
        self.scfe_rgb.named_blocks("scfe_rgb", &mut out);
        self.scfe_flow.named_blocks("scfe_flow", &mut out);
        self.attention_head.named_blocks("attention", &mut out);
        self.completeness_head.named_blocks("completeness", &mut out);
        self.cls_fused.named_blocks("cls_fused", &mut out);
        self.cls_rgb.named_blocks("cls_rgb", &mut out);
        self.cls_flow.named_blocks("cls_flow", &mut out);
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.scfe_fused.blocks_mut_into(&mut out);
        self.scfe_rgb.blocks_mut_into(&mut out);
        self.scfe_flow.blocks_mut_into(&mut out);
        self.attention_head.blocks_mut_into(&mut out);
        self.completeness_head.blocks_mut_into(&mut out);
        self.cls_fused.blocks_mut_into(&mut out);
        self.cls_rgb.blocks_mut_into(&mut out);
        self.cls_flow.blocks_mut_into(&mut out);
        out
    }

    fn zeros_like(&self) -> Self {
        let relu = |l: &ReluLinear| ReluLinear::zeros(l.d_in(), l.d_out());
        Self {
            scfe_mode: self.scfe_mode,
            scfe_fused: relu(&self.scfe_fused),
            scfe_rgb: relu(&self.scfe_rgb),
            scfe_flow: relu(&self.scfe_flow),
            attention_head: self.attention_head.zeros_like(),
            completeness_head: self.completeness_head.zeros_like(),
            cls_fused: self.cls_fused.zeros_like(),
            cls_rgb: self.cls_rgb.zeros_like(),
            cls_flow: self.cls_flow.zeros_like(),
        }
    }
}

/// SCFE layer inputs for every proposal of one video, one matrix per stream.
#[derive(Clone, Debug)]
pub struct ProposalInputs {
    pub proposals: Vec<Proposal>,
    pub fused: Matrix,
    pub rgb: Matrix,
    pub flow: Matrix,
}

impl ProposalInputs {
    /// Region features are computed per modality; the fused stream's regions
    /// are their concatenation, since RoIAlign and max-pooling act per
    /// feature dimension.
    pub fn build(
        feats: &SegmentFeatures,
        proposals: &[Proposal],
        alpha: f64,
        bins: &RoiBins,
        mode: ScfeMode,
    ) -> Result<Self> {
        if proposals.is_empty() {
            return Err(Error::invalid("a video needs at least one proposal"));
        }
        let mut rows_f = Vec::with_capacity(proposals.len());
        let mut rows_r = Vec::with_capacity(proposals.len());
        let mut rows_l = Vec::with_capacity(proposals.len());
        for p in proposals {
            let r = extract_region_features(&feats.rgb, p, alpha, bins)?;
            let l = extract_region_features(&feats.flow, p, alpha, bins)?;
            let cat = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().chain(b).copied().collect() };
            let fused = RegionFeatures {
                left: cat(&r.left, &l.left),
                inner: cat(&r.inner, &l.inner),
                right: cat(&r.right, &l.right),
            };
            rows_f.push(scfe_input(&fused, mode));
            rows_r.push(scfe_input(&r, mode));
            rows_l.push(scfe_input(&l, mode));
        }
        Ok(Self {
            proposals: proposals.to_vec(),
            fused: Matrix::from_rows(&rows_f)?,
            rgb: Matrix::from_rows(&rows_r)?,
            flow: Matrix::from_rows(&rows_l)?,
        })
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }
}

/// One SCFE layer applied to a single region triple.
pub fn scfe_forward(layer: &ReluLinear, regions: &RegionFeatures, mode: ScfeMode) -> Result<Vec<f64>> {
    let input = Matrix::from_rows(&[scfe_input(regions, mode)])?;
    Ok(layer.forward(&input)?.into_data())
}

#[derive(Clone, Debug)]
pub struct PmilOutput {
    pub mil: MilScores,
    pub q_hat: Vec<f64>,
    pub s_base_rgb: Matrix,
    pub s_base_flow: Matrix,
}

impl PmilOutput {
    pub fn attention(&self) -> &[f64] {
        &self.mil.attention
    }
}

struct PmilCache {
    x_fused: Matrix,
    x_rgb: Matrix,
    x_flow: Matrix,
    attention: Mlp2Cache,
    completeness: Mlp2Cache,
    cls_fused: Mlp2Cache,
    cls_rgb: Mlp2Cache,
    cls_flow: Mlp2Cache,
}

fn forward_cached(params: &PmilParams, inputs: &ProposalInputs, k_ratio: f64) -> Result<(PmilOutput, PmilCache)> {
    if inputs.is_empty() {
        return Err(Error::invalid("P-MIL forward needs at least one proposal"));
    }
    let x_fused = params.scfe_fused.forward(&inputs.fused)?;
    let x_rgb = params.scfe_rgb.forward(&inputs.rgb)?;
    let x_flow = params.scfe_flow.forward(&inputs.flow)?;
    let (a, attention) = params.attention_head.forward_cached(&x_fused)?;
    let (q, completeness) = params.completeness_head.forward_cached(&x_fused)?;
    let (s_base, cls_fused) = params.cls_fused.forward_cached(&x_fused)?;
    let (s_base_rgb, cls_rgb) = params.cls_rgb.forward_cached(&x_rgb)?;
    let (s_base_flow, cls_flow) = params.cls_flow.forward_cached(&x_flow)?;
    let output = PmilOutput {
        mil: MilScores::new(a.into_data(), s_base, k_ratio)?,
        q_hat: q.into_data(),
        s_base_rgb,
        s_base_flow,
    };
    let cache = PmilCache {
        x_fused,
        x_rgb,
        x_flow,
        attention,
        completeness,
        cls_fused,
        cls_rgb,
        cls_flow,
    };
    Ok((output, cache))
}

pub fn pmil_forward(params: &PmilParams, inputs: &ProposalInputs, k_ratio: f64) -> Result<PmilOutput> {
    Ok(forward_cached(params, inputs, k_ratio)?.0)
}

pub fn pmil_cls_loss(output: &PmilOutput, labels: &[u8]) -> Result<f64> {
    output.mil.cls_loss(labels)
}

/// Weights of the stage-2 objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmilLossWeights {
    pub lambda_comp: f64,
    pub lambda_irc: f64,
    pub warmup_weight: f64,
    pub enable_pce: bool,
    pub enable_irc: bool,
}

impl Default for PmilLossWeights {
    fn default() -> Self {
        Self {
            lambda_comp: 20.0,
            lambda_irc: 2.0,
            warmup_weight: 1.0,
            enable_pce: true,
            enable_irc: true,
        }
    }
}

/// `L_cls + w · (λ_comp · L_comp + λ_IRC · L_IRC)`.
pub fn pmil_total_loss(l_cls: f64, l_comp: f64, l_irc: f64, weights: &PmilLossWeights) -> f64 {
    let mut refine = 0.0;
    if weights.enable_pce {
        refine += weights.lambda_comp * l_comp;
    }
    if weights.enable_irc {
        refine += weights.lambda_irc * l_irc;
    }
    l_cls + weights.warmup_weight * refine
}

/// Labels consumed by the stage-2 objective. The pseudo-labels and clusters
/// are constants from the loss's point of view.
#[derive(Clone, Debug)]
pub struct PmilTargets {
    pub labels: Vec<u8>,
    pub pseudo: Option<PseudoLabelSet>,
    pub clusters: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PceSettings {
    pub gamma: f64,
    pub nms_threshold: f64,
}

impl Default for PceSettings {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            nms_threshold: 0.0,
        }
    }
}

impl PmilTargets {
    /// Builds pseudo-labels and clusters from the current attention.
    pub fn from_output(
        output: &PmilOutput,
        proposals: &[Proposal],
        labels: &[u8],
        pce: &PceSettings,
        weights: &PmilLossWeights,
    ) -> Result<Self> {
        let pseudo = if weights.enable_pce {
            Some(pce_pseudo_labels(output.attention(), proposals, pce.gamma, pce.nms_threshold)?)
        } else {
            None
        };
        let clusters = if weights.enable_irc {
            irc_clusters(output.attention(), proposals)
        } else {
            Vec::new()
        };
        Ok(Self {
            labels: labels.to_vec(),
            pseudo,
            clusters,
        })
    }

    fn gt_classes(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != 0)
            .map(|(c, _)| c)
            .collect()
    }
}

/// Evaluates the stage-2 objective for fixed targets.
pub fn pmil_loss(output: &PmilOutput, targets: &PmilTargets, weights: &PmilLossWeights) -> Result<LossBreakdown> {
    let cls = output.mil.cls_loss(&targets.labels)?;
    let comp = match (&targets.pseudo, weights.enable_pce) {
        (Some(p), true) => completeness_loss(&p.q, &output.q_hat)?,
        _ => 0.0,
    };
    let irc = if weights.enable_irc {
        irc_loss_and_grad(
            &output.s_base_rgb,
            &output.s_base_flow,
            &targets.clusters,
            &targets.gt_classes(),
            0.0,
        )?
        .0
    } else {
        0.0
    };
    Ok(LossBreakdown {
        total: pmil_total_loss(cls, comp, irc, weights),
        parts: vec![("cls", cls), ("comp", comp), ("irc", irc)],
    })
}

/// Loss and parameter gradients for fixed targets.
pub fn pmil_loss_and_grad(
    params: &PmilParams,
    inputs: &ProposalInputs,
    targets: &PmilTargets,
    weights: &PmilLossWeights,
    k_ratio: f64,
) -> Result<(LossBreakdown, PmilParams)> {
    let (output, cache) = forward_cached(params, inputs, k_ratio)?;
    backward(params, inputs, &output, &cache, targets, weights)
}

fn backward(
    params: &PmilParams,
    inputs: &ProposalInputs,
    output: &PmilOutput,
    cache: &PmilCache,
    targets: &PmilTargets,
    weights: &PmilLossWeights,
) -> Result<(LossBreakdown, PmilParams)> {
    let loss = pmil_loss(output, targets, weights)?;
    let mut grads = params.zeros_like();
    let m = inputs.len();

    let (d_attention, d_base) = output.mil.cls_loss_backward(&targets.labels, 1.0)?;
    let mut dx_fused = params
        .attention_head
        .backward(
            &cache.x_fused,
            &cache.attention,
            &Matrix::column_vector(&d_attention),
            &mut grads.attention_head,
            true,
        )?
        .expect("requested");

    if let (Some(pseudo), true) = (&targets.pseudo, weights.enable_pce) {
        let scale = weights.warmup_weight * weights.lambda_comp;
        let dq: Vec<f64> = completeness_loss_grad(&pseudo.q, &output.q_hat)
            .into_iter()
            .map(|g| scale * g)
            .collect();
        let dx = params
            .completeness_head
            .backward(
                &cache.x_fused,
                &cache.completeness,
                &Matrix::column_vector(&dq),
                &mut grads.completeness_head,
                true,
            )?
            .expect("requested");
        add_into(&mut dx_fused, &dx);
    }

    let dx = params
        .cls_fused
        .backward(&cache.x_fused, &cache.cls_fused, &d_base, &mut grads.cls_fused, true)?
        .expect("requested");
    add_into(&mut dx_fused, &dx);
    params
        .scfe_fused
        .backward(&inputs.fused, &cache.x_fused, &dx_fused, &mut grads.scfe_fused)?;

    if weights.enable_irc {
        let scale = weights.warmup_weight * weights.lambda_irc;
        let (_, d_rgb, d_flow) = irc_loss_and_grad(
            &output.s_base_rgb,
            &output.s_base_flow,
            &targets.clusters,
            &targets.gt_classes(),
            scale,
        )?;
        let dx_rgb = params
            .cls_rgb
            .backward(&cache.x_rgb, &cache.cls_rgb, &d_rgb, &mut grads.cls_rgb, true)?
            .expect("requested");
        params
            .scfe_rgb
            .backward(&inputs.rgb, &cache.x_rgb, &dx_rgb, &mut grads.scfe_rgb)?;
        let dx_flow = params
            .cls_flow
            .backward(&cache.x_flow, &cache.cls_flow, &d_flow, &mut grads.cls_flow, true)?
            .expect("requested");
        params
            .scfe_flow
            .backward(&inputs.flow, &cache.x_flow, &dx_flow, &mut grads.scfe_flow)?;
    }
    debug_assert_eq!(dx_fused.rows(), m);
    Ok((loss, grads))
}

fn add_into(dst: &mut Matrix, src: &Matrix) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

/// `min(1, epoch / warmup_epochs)`; a zero-length warmup is always 1.
pub fn warmup_weight(epoch: usize, warmup_epochs: usize) -> f64 {
    if warmup_epochs == 0 {
        1.0
    } else {
        (epoch as f64 / warmup_epochs as f64).min(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PmilTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub hidden: usize,
    pub k_ratio: f64,
    pub alpha: f64,
    pub roi_bins: RoiBins,
    pub scfe_mode: ScfeMode,
    pub pce: PceSettings,
    pub lambda_comp: f64,
    pub lambda_irc: f64,
    /// Epochs over which the refinement weight ramps to 1; `None` means half
    /// of `epochs`.
    pub warmup_epochs: Option<usize>,
    pub enable_pce: bool,
    pub enable_irc: bool,
    /// Train on background-kind proposals too.
    pub include_background: bool,
    /// Supplied by the run configuration.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PmilTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 10,
            adam: AdamConfig::default(),
            hidden: 512,
            k_ratio: 1.0 / 8.0,
            alpha: 0.25,
            roi_bins: RoiBins::default(),
            scfe_mode: ScfeMode::Contrast,
            pce: PceSettings::default(),
            lambda_comp: 20.0,
            lambda_irc: 2.0,
            warmup_epochs: None,
            enable_pce: true,
            enable_irc: true,
            include_background: true,
            seed: 0,
        }
    }
}

impl PmilTrainConfig {
    pub fn loss_weights(&self, epoch: usize) -> PmilLossWeights {
        let warm = self.warmup_epochs.unwrap_or(self.epochs / 2);
        PmilLossWeights {
            lambda_comp: self.lambda_comp,
            lambda_irc: self.lambda_irc,
            warmup_weight: warmup_weight(epoch, warm),
            enable_pce: self.enable_pce,
            enable_irc: self.enable_irc,
        }
    }
}

/// One training video for stage 2.
#[derive(Clone, Debug)]
pub struct PmilVideo<'a> {
    pub video_id: &'a str,
    pub features: &'a SegmentFeatures,
    pub proposals: &'a [Proposal],
    pub labels: &'a [u8],
}

#[derive(Clone, Debug)]
pub struct PmilTrained {
    pub params: PmilParams,
    pub log: Vec<EpochLog>,
    pub skipped: Vec<String>,
}

pub fn train_pmil(videos: &[PmilVideo<'_>], num_classes: usize, config: &PmilTrainConfig) -> Result<PmilTrained> {
    let mut prepared = Vec::new();
    let mut skipped = Vec::new();
    for v in videos {
        if v.labels.len() != num_classes {
            return Err(Error::invalid(format!("video `{}` has a malformed label vector", v.video_id)));
        }
        let props: Vec<Proposal> = v
            .proposals
            .iter()
            .filter(|p| config.include_background || p.kind == ProposalKind::Action)
            .copied()
            .collect();
        if props.is_empty() {
            warn!("video `{}` has no candidate proposals; skipped", v.video_id);
            skipped.push(v.video_id.to_string());
            continue;
        }
        let inputs = ProposalInputs::build(v.features, &props, config.alpha, &config.roi_bins, config.scfe_mode)?;
        prepared.push((v.video_id.to_string(), inputs, v.labels.to_vec()));
    }
    if prepared.is_empty() && config.epochs > 0 {
        return Err(Error::invalid("no training video has candidate proposals"));
    }
    let feature_dim = videos
        .first()
        .map(|v| v.features.feature_dim())
        .ok_or_else(|| Error::invalid("cannot train on an empty dataset"))?;
    let mut params = PmilParams::new(config.seed, feature_dim, config.hidden, num_classes, config.scfe_mode);
    let ids: Vec<String> = prepared.iter().map(|(id, _, _)| id.clone()).collect();
    let log = run_epochs(
        &mut params,
        &ids,
        LoopSettings {
            epochs: config.epochs,
            batch_size: config.batch_size,
            adam: &config.adam,
            seed: config.seed.wrapping_add(1),
        },
        |p, v, epoch| {
            let (_, inputs, labels) = &prepared[v];
            let weights = config.loss_weights(epoch);
            let (output, cache) = forward_cached(p, inputs, config.k_ratio)?;
            let targets = PmilTargets::from_output(&output, &inputs.proposals, labels, &config.pce, &weights)?;
            backward(p, inputs, &output, &cache, &targets, &weights)
        },
    )?;
    Ok(PmilTrained { params, log, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, softmax};
    use rand::Rng;

    fn random_feats(rng: &mut ChaCha8Rng, t: usize, d: usize) -> SegmentFeatures {
        let mut m = || Matrix::from_vec(t, d, (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let rgb = m();
        let flow = m();
        SegmentFeatures::new(rgb, flow).unwrap()
    }

    fn sample_proposals() -> Vec<Proposal> {
        vec![
            Proposal::action(0, 4),
            Proposal::action(2, 6),
            Proposal::action(3, 5),
            Proposal::new(6, 10, ProposalKind::Background, 0.3),
            Proposal::action(8, 11),
        ]
    }

    #[test]
    fn zero_params_give_neutral_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feats = random_feats(&mut rng, 12, 3);
        let params = PmilParams::zeros(3, 4, 2, ScfeMode::Contrast);
        let inputs = ProposalInputs::build(&feats, &sample_proposals(), 0.25, &RoiBins::default(), ScfeMode::Contrast).unwrap();
        let out = pmil_forward(&params, &inputs, 0.125).unwrap();
        assert!(out.attention().iter().all(|&a| a == 0.5));
        assert!(out.q_hat.iter().all(|&q| q == 0.5));
        assert!(out.mil.y_hat_base.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        assert!(out.mil.y_hat_supp.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn single_proposal_uses_its_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats = random_feats(&mut rng, 8, 3);
        let params = PmilParams::new(4, 3, 5, 2, ScfeMode::Contrast);
        let inputs = ProposalInputs::build(&feats, &[Proposal::action(2, 5)], 0.25, &RoiBins::default(), ScfeMode::Contrast).unwrap();
        let out = pmil_forward(&params, &inputs, 0.125).unwrap();
        assert_eq!(out.mil.k(), 1);
        assert_eq!(out.mil.y_hat_base, softmax(out.mil.s_base.row(0)).unwrap());
        assert!(pmil_forward(
            &params,
            &ProposalInputs {
                proposals: vec![],
                fused: Matrix::zeros(0, 18),
                rgb: Matrix::zeros(0, 9),
                flow: Matrix::zeros(0, 9)
            },
            0.125
        )
        .is_err());
    }

    #[test]
    fn scfe_forward_examples() {
        let layer = ReluLinear::zeros(6, 2);
        let r = RegionFeatures {
            left: vec![1.0, 2.0],
            inner: vec![3.0, -1.0],
            right: vec![0.5, 0.5],
        };
        assert_eq!(scfe_forward(&layer, &r, ScfeMode::Contrast).unwrap(), vec![0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = ReluLinear::new(&mut rng, 6, 2);
        let got = scfe_forward(&layer, &r, ScfeMode::Contrast).unwrap();
        let input = [2.0, -3.0, 3.0, -1.0, 2.5, -1.5];
        for j in 0..2 {
            let mut acc = layer.bias[j];
            for (i, v) in input.iter().enumerate() {
                acc += v * layer.weight.get(i, j);
            }
            assert!((got[j] - acc.max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut w = PmilLossWeights {
            warmup_weight: 0.0,
            ..PmilLossWeights::default()
        };
        assert_eq!(pmil_total_loss(0.5, 0.01, 0.02, &w), 0.5);
        w.warmup_weight = 1.0;
        assert!((pmil_total_loss(0.5, 0.01, 0.02, &w) - 0.74).abs() < 1e-15);
        assert_eq!(warmup_weight(0, 10), 0.0);
        assert_eq!(warmup_weight(5, 10), 0.5);
        assert_eq!(warmup_weight(15, 10), 1.0);
        assert_eq!(warmup_weight(0, 0), 1.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let feats = random_feats(&mut rng, 12, 3);
        let props = sample_proposals();
        for mode in [ScfeMode::Contrast, ScfeMode::Concat, ScfeMode::NoExtend] {
            let mut params = PmilParams::new(17, 3, 5, 2, mode);
            // biases start at zero; move off that point so no ReLU row is
            // entirely dead and the top-k selection has no ties
            let flat: Vec<f64> = params.flatten().iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
            params.set_flat(&flat);
            let inputs = ProposalInputs::build(&feats, &props, 0.25, &RoiBins::default(), mode).unwrap();
            let weights = PmilLossWeights {
                warmup_weight: 0.7,
                ..PmilLossWeights::default()
            };
            let out = pmil_forward(&params, &inputs, 0.4).unwrap();
            let targets = PmilTargets::from_output(&out, &props, &[1, 0], &PceSettings::default(), &weights).unwrap();
            let (_, grads) = pmil_loss_and_grad(&params, &inputs, &targets, &weights, 0.4).unwrap();
            let fd = finite_diff_grad(
                |flat| {
                    let mut p = params.clone();
                    p.set_flat(flat);
                    let out = pmil_forward(&p, &inputs, 0.4).unwrap();
                    pmil_loss(&out, &targets, &weights).unwrap().total
                },
                &params.flatten(),
                1e-5,
            )
            .unwrap();
            for (a, n) in grads.flatten().iter().zip(&fd) {
                assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "{mode:?}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats = random_feats(&mut rng, 12, 3);
        let props = sample_proposals();
        let cfg = PmilTrainConfig {
            epochs: 0,
            hidden: 4,
            seed: 5,
            ..PmilTrainConfig::default()
        };
        let videos = [PmilVideo {
            video_id: "v",
            features: &feats,
            proposals: &props,
            labels: &[1, 0],
        }];
        let trained = train_pmil(&videos, 2, &cfg).unwrap();
        assert_eq!(trained.params, PmilParams::new(5, 3, 4, 2, ScfeMode::Contrast));
    }

    #[test]
    fn videos_without_proposals_are_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats = random_feats(&mut rng, 12, 3);
        let props = sample_proposals();
        let cfg = PmilTrainConfig {
            epochs: 1,
            hidden: 4,
            ..PmilTrainConfig::default()
        };
        let videos = [
            PmilVideo {
                video_id: "empty",
                features: &feats,
                proposals: &[],
                labels: &[1, 0],
            },
            PmilVideo {
                video_id: "full",
                features: &feats,
                proposals: &props,
                labels: &[1, 0],
            },
        ];
        let trained = train_pmil(&videos, 2, &cfg).unwrap();
        assert_eq!(trained.skipped, vec!["empty".to_string()]);
    }

    #[test]
    fn refinement_terms_do_not_reach_attention_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let feats = random_feats(&mut rng, 12, 3);
        let props = sample_proposals();
        let params = PmilParams::new(2, 3, 6, 2, ScfeMode::Contrast);
        let inputs = ProposalInputs::build(&feats, &props, 0.25, &RoiBins::default(), ScfeMode::Contrast).unwrap();
        let full = PmilLossWeights::default();
        let out = pmil_forward(&params, &inputs, 0.125).unwrap();
        let targets = PmilTargets::from_output(&out, &props, &[0, 1], &PceSettings::default(), &full).unwrap();
        let (_, g_full) = pmil_loss_and_grad(&params, &inputs, &targets, &full, 0.125).unwrap();
        let cls_only = PmilLossWeights {
            enable_pce: false,
            enable_irc: false,
            ..full
        };
        let (_, g_cls) = pmil_loss_and_grad(&params, &inputs, &targets, &cls_only, 0.125).unwrap();
        assert_eq!(g_full.attention_head, g_cls.attention_head);
        assert_eq!(g_full.cls_fused, g_cls.cls_fused);
    }

    #[test]
    fn zero_weights_match_disabled_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats: Vec<SegmentFeatures> = (0..3).map(|_| random_feats(&mut rng, 12, 3)).collect();
        let props = sample_proposals();
        let labels = [[1u8, 0], [0, 1], [1, 1]];
        let videos: Vec<PmilVideo> = feats
            .iter()
            .zip(&labels)
            .map(|(f, l)| PmilVideo {
                video_id: "v",
                features: f,
                proposals: &props,
                labels: l,
            })
            .collect();
        let base = PmilTrainConfig {
            epochs: 3,
            batch_size: 2,
            hidden: 6,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            ..PmilTrainConfig::default()
        };
        let zero = PmilTrainConfig {
            lambda_comp: 0.0,
            lambda_irc: 0.0,
            ..base.clone()
        };
        let off = PmilTrainConfig {
            enable_pce: false,
            enable_irc: false,
            ..base.clone()
        };
        let a = train_pmil(&videos, 2, &zero).unwrap();
        let b = train_pmil(&videos, 2, &off).unwrap();
        assert_eq!(a.params.flatten(), b.params.flatten());
        let c = train_pmil(&videos, 2, &base).unwrap();
        assert_ne!(a.params.flatten(), c.params.flatten());
    }
}
