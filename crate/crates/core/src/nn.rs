//! Fully-connected building blocks with hand-written backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Matrix};

/// A model whose trainable state is a fixed list of named `f64` blocks.
///
/// Gradients are represented by a value of the same type, so the optimizer
/// and the finite-difference oracle can walk parameters and gradients in
/// lockstep.
pub trait Parameters {
    fn blocks(&self) -> Vec<(String, &[f64])>;
    fn blocks_mut(&mut self) -> Vec<&mut [f64]>;
    fn zeros_like(&self) -> Self;

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.blocks()
            .into_iter()
            .flat_map(|(_, b)| b.iter().copied())
            .collect()
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for block in self.blocks_mut() {
            let n = block.len();
            block.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    /// `self += scale · other`.
    fn add_scaled(&mut self, other: &Self, scale: f64)
    where
        Self: Sized,
    {
        let src: Vec<Vec<f64>> = other.blocks().into_iter().map(|(_, b)| b.to_vec()).collect();
        for (dst, src) in self.blocks_mut().into_iter().zip(&src) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Sigmoid,
    Identity,
}

/// Uniform in `[-1/√fan_in, 1/√fan_in]`.
pub fn init_uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let bound = 1.0 / (rows.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape is consistent by construction")
}

fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    let mut out = x.matmul(w)?;
    out.add_row_vector(b)?;
    Ok(out)
}

fn relu_in_place(m: &mut Matrix) {
    for v in m.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Two fully-connected layers, ReLU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp2 {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub output_activation: OutputActivation,
}

/// Activations saved by [`Mlp2::forward_cached`].
#[derive(Clone, Debug)]
pub struct Mlp2Cache {
    hidden: Matrix,
    output: Matrix,
}

impl Mlp2 {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        output_activation: OutputActivation,
    ) -> Self {
        Self {
            w1: init_uniform(rng, d_in, hidden),
            b1: vec![0.0; hidden],
            w2: init_uniform(rng, hidden, d_out),
            b2: vec![0.0; d_out],
            output_activation,
        }
    }

    pub fn zeros(d_in: usize, hidden: usize, d_out: usize, output_activation: OutputActivation) -> Self {
        Self {
            w1: Matrix::zeros(d_in, hidden),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, d_out),
            b2: vec![0.0; d_out],
            output_activation,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w2.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.b1.len() != self.w1.cols()
            || self.w2.rows() != self.w1.cols()
            || self.b2.len() != self.w2.cols()
        {
            return Err(Error::invalid(format!(
                "inconsistent mlp shapes: w1 {}x{}, b1 {}, w2 {}x{}, b2 {}",
                self.w1.rows(),
                self.w1.cols(),
                self.b1.len(),
                self.w2.rows(),
                self.w2.cols(),
                self.b2.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, Mlp2Cache)> {
        if x.cols() != self.d_in() {
            return Err(Error::invalid(format!(
                "mlp expects {} input features, got {}",
                self.d_in(),
                x.cols()
            )));
        }
        let mut hidden = affine(x, &self.w1, &self.b1)?;
        relu_in_place(&mut hidden);
        let mut output = affine(&hidden, &self.w2, &self.b2)?;
        if self.output_activation == OutputActivation::Sigmoid {
            for v in output.data_mut() {
                *v = sigmoid(*v);
            }
        }
        let cache = Mlp2Cache {
            hidden,
            output: output.clone(),
        };
        Ok((output, cache))
    }

    /// Accumulates parameter gradients into `grads` given `d_out = ∂L/∂output`.
    /// Returns `∂L/∂x` when `want_dx` is set.
    pub fn backward(
        &self,
        x: &Matrix,
        cache: &Mlp2Cache,
        d_out: &Matrix,
        grads: &mut Mlp2,
        want_dx: bool,
    ) -> Result<Option<Matrix>> {
        let mut d_pre2 = d_out.clone();
        if self.output_activation == OutputActivation::Sigmoid {
            for (d, y) in d_pre2.data_mut().iter_mut().zip(cache.output.data()) {
                *d *= y * (1.0 - y);
            }
        }
        accumulate(&mut grads.w2, &cache.hidden.t_matmul(&d_pre2)?);
        accumulate_vec(&mut grads.b2, &d_pre2.column_sums());

        let mut d_hidden = d_pre2.matmul_t(&self.w2)?;
        for (d, h) in d_hidden.data_mut().iter_mut().zip(cache.hidden.data()) {
            if *h <= 0.0 {
                *d = 0.0;
            }
        }
        accumulate(&mut grads.w1, &x.t_matmul(&d_hidden)?);
        accumulate_vec(&mut grads.b1, &d_hidden.column_sums());

        if want_dx {
            Ok(Some(d_hidden.matmul_t(&self.w1)?))
        } else {
            Ok(None)
        }
    }

    pub(crate) fn named_blocks<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        out.push((format!("{prefix}.w1"), self.w1.data()));
        out.push((format!("{prefix}.b1"), &self.b1));
        out.push((format!("{prefix}.w2"), self.w2.data()));
        out.push((format!("{prefix}.b2"), &self.b2));
    }

    pub(crate) fn blocks_mut_into<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.w1.data_mut());
        out.push(&mut self.b1);
        out.push(self.w2.data_mut());
        out.push(&mut self.b2);
    }
}

impl Parameters for Mlp2 {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        self.named_blocks("mlp", &mut out);
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.blocks_mut_into(&mut out);
        out
    }

    fn zeros_like(&self) -> Self {
        Mlp2::zeros(self.d_in(), self.hidden(), self.d_out(), self.output_activation)
    }
}

/// A single fully-connected layer followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ReluLinear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl ReluLinear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: init_uniform(rng, d_in, d_out),
            bias: vec![0.0; d_out],
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(d_in, d_out),
            bias: vec![0.0; d_out],
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.d_in() {
            return Err(Error::invalid(format!(
                "linear layer expects {} input features, got {}",
                self.d_in(),
                x.cols()
            )));
        }
        let mut out = affine(x, &self.weight, &self.bias)?;
        relu_in_place(&mut out);
        Ok(out)
    }

    /// `output` is the (post-ReLU) result of [`ReluLinear::forward`] on `x`.
    pub fn backward(&self, x: &Matrix, output: &Matrix, d_out: &Matrix, grads: &mut ReluLinear) -> Result<()> {
        let mut d_pre = d_out.clone();
        for (d, y) in d_pre.data_mut().iter_mut().zip(output.data()) {
            if *y <= 0.0 {
                *d = 0.0;
            }
        }
        accumulate(&mut grads.weight, &x.t_matmul(&d_pre)?);
        accumulate_vec(&mut grads.bias, &d_pre.column_sums());
        Ok(())
    }

    pub(crate) fn named_blocks<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        out.push((format!("{prefix}.weight"), self.weight.data()));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn blocks_mut_into<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.weight.data_mut());
        out.push(&mut self.bias);
    }
}

fn accumulate(dst: &mut Matrix, src: &Matrix) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn accumulate_vec(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
