//! Mini-batch Adam loop shared by both stages.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::nn::Parameters;

/// Loss of one video split into named terms; `total` is what is optimized.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub parts: Vec<(&'static str, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub parts: BTreeMap<String, f64>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LoopSettings<'a> {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: &'a AdamConfig,
    pub seed: u64,
}

/// Runs `epochs` passes over `video_ids`. `per_video(params, video, epoch)`
/// returns that video's loss and parameter gradient; batch gradients are the
/// mean over the batch, reduced in a fixed order so results do not depend on
/// thread scheduling.
pub(crate) fn run_epochs<P, F>(
    params: &mut P,
    video_ids: &[String],
    settings: LoopSettings<'_>,
    per_video: F,
) -> Result<Vec<EpochLog>>
where
    P: Parameters + Send + Sync,
    F: Fn(&P, usize, usize) -> Result<(LossBreakdown, P)> + Sync,
{
    if settings.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut state = AdamState::new(params);
    let mut order: Vec<usize> = (0..video_ids.len()).collect();
    let mut logs = Vec::with_capacity(settings.epochs);

    for epoch in 0..settings.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut part_sums: BTreeMap<String, f64> = BTreeMap::new();
        for batch in order.chunks(settings.batch_size) {
            let current: &P = params;
            let results: Vec<Result<(LossBreakdown, P)>> = batch
                .par_iter()
                .map(|&v| per_video(current, v, epoch))
                .collect();
            let mut grad_sum = params.zeros_like();
            for (&v, res) in batch.iter().zip(results) {
                let (loss, grads) = res?;
                if !loss.total.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss at epoch {epoch} on video `{}`",
                        video_ids[v]
                    )));
                }
                loss_sum += loss.total;
                for (name, value) in loss.parts {
                    *part_sums.entry(name.to_string()).or_default() += value;
                }
                grad_sum.add_scaled(&grads, 1.0);
            }
            let mut mean_grad = params.zeros_like();
            mean_grad.add_scaled(&grad_sum, 1.0 / batch.len() as f64);
            adam_step(params, &mean_grad, &mut state, settings.adam).map_err(|e| match e {
                Error::Training(msg) => Error::Training(format!("epoch {epoch}: {msg}")),
                other => other,
            })?;
        }
        let n = video_ids.len().max(1) as f64;
        logs.push(EpochLog {
            epoch,
            mean_loss: loss_sum / n,
            parts: part_sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
        });
    }
    Ok(logs)
}
