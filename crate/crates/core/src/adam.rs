//! Bias-corrected Adam over any [`Parameters`] value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Parameters;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new<P: Parameters>(params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .blocks()
            .iter()
            .map(|(_, b)| vec![0.0; b.len()])
            .collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
        }
    }
}

/// One Adam update in place. Gradients are checked for finiteness before any
/// parameter is touched, so a failed step leaves `params` and `state` intact.
pub fn adam_step<P: Parameters>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    let grad_blocks = grads.blocks();
    if grad_blocks.len() != state.first_moment.len() {
        return Err(Error::invalid(format!(
            "optimizer state has {} blocks, gradients have {}",
            state.first_moment.len(),
            grad_blocks.len()
        )));
    }
    for ((name, g), m) in grad_blocks.iter().zip(&state.first_moment) {
        if g.len() != m.len() {
            return Err(Error::invalid(format!(
                "block `{name}`: gradient length {} vs state length {}",
                g.len(),
                m.len()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient in parameter block `{name}`"
            )));
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let bias1 = 1.0 - config.beta1.powi(t);
    let bias2 = 1.0 - config.beta2.powi(t);

    let param_blocks = params.blocks_mut();
    if param_blocks.len() != grad_blocks.len() {
        return Err(Error::invalid("parameter and gradient block counts differ"));
    }
    for (((p, (_, g)), m), v) in param_blocks
        .into_iter()
        .zip(&grad_blocks)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p[i] -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug, PartialEq)]
    struct Flat(Vec<f64>);

    impl Parameters for Flat {
        fn blocks(&self) -> Vec<(String, &[f64])> {
            vec![("flat".into(), &self.0)]
        }
        fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
        fn zeros_like(&self) -> Self {
            Flat(vec![0.0; self.0.len()])
        }
    }

    /// Reference Adam recurrence on plain slices.
    fn oracle(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: i32, c: &AdamConfig) {
        for i in 0..p.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let mh = m[i] / (1.0 - c.beta1.powi(t));
            let vh = v[i] / (1.0 - c.beta2.powi(t));
            p[i] -= c.lr * mh / (vh.sqrt() + c.eps);
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Flat(vec![1.0, -2.0]);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &Flat(vec![0.0, 0.0]), &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p, Flat(vec![1.0, -2.0]));
        assert_eq!(s.first_moment, vec![vec![0.0, 0.0]]);
        assert_eq!(s.second_moment, vec![vec![0.0, 0.0]]);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Flat(vec![0.0]);
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        adam_step(&mut p, &Flat(vec![1.0]), &mut s, &cfg).unwrap();
        // m̂ = 1, v̂ = 1 → step = 0.1 / (1 + 1e-8)
        assert!((p.0[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn matches_reference_recurrence() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let g = [0.3, -1.2, 4.0];
        let mut p = Flat(vec![1.0, 2.0, -0.5]);
        let mut s = AdamState::new(&p);
        let (mut rp, mut rm, mut rv) = (p.0.clone(), vec![0.0; 3], vec![0.0; 3]);
        for t in 1..=2 {
            adam_step(&mut p, &Flat(g.to_vec()), &mut s, &cfg).unwrap();
            oracle(&mut rp, &g, &mut rm, &mut rv, t, &cfg);
        }
        for (a, b) in p.0.iter().zip(&rp) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(s.step_count, 2);
    }

    #[test]
    fn deterministic() {
        let cfg = AdamConfig::default();
        let run = || {
            let mut p = Flat(vec![0.5, -0.25]);
            let mut s = AdamState::new(&p);
            for _ in 0..5 {
                adam_step(&mut p, &Flat(vec![0.7, -0.1]), &mut s, &cfg).unwrap();
            }
            (p, s)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut p = Flat(vec![1.0]);
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &Flat(vec![f64::NAN]), &mut s, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("flat"));
        assert_eq!(p.0, vec![1.0]);
        assert_eq!(s.step_count, 0);
    }
}
