//! Task-aware attention: a dynamic two-piece ReLU whose coefficients are
//! predicted from the global context of the stacked feature.

use rand::Rng;

use super::StackedFeature;
use crate::error::{Error, Result};
use crate::layers::{join, Parameters};
use crate::ops::activation::{hard_sigmoid, hard_sigmoid_grad};
use crate::ops::{fully_connected, fully_connected_backward};
use crate::tensor::Tensor;

pub const DEFAULT_REDUCTION: usize = 4;
pub const DEFAULT_LAMBDA_A: f64 = 1.0;
pub const DEFAULT_LAMBDA_B: f64 = 0.5;

/// Resting coefficients `(α¹, β¹, α², β²)`, i.e. a plain ReLU.
pub const DEFAULT_COEFFS: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

#[derive(Clone, Debug, PartialEq)]
pub struct DyReluParams {
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
    pub lambda_a: f64,
    pub lambda_b: f64,
}

impl DyReluParams {
    pub fn hidden(channels: usize, reduction: usize) -> usize {
        (channels / reduction.max(1)).max(1)
    }

    pub fn init(channels: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        let hidden = Self::hidden(channels, reduction);
        let b1 = 1.0 / (channels as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        Self {
            fc1_weight: Tensor::uniform(&[hidden, channels], -b1, b1, rng),
            fc1_bias: Tensor::zeros(&[hidden]),
            fc2_weight: Tensor::uniform(&[4, hidden], -b2, b2, rng),
            fc2_bias: Tensor::zeros(&[4]),
            lambda_a: DEFAULT_LAMBDA_A,
            lambda_b: DEFAULT_LAMBDA_B,
        }
    }

    pub fn zeros(channels: usize, reduction: usize) -> Self {
        let hidden = Self::hidden(channels, reduction);
        Self {
            fc1_weight: Tensor::zeros(&[hidden, channels]),
            fc1_bias: Tensor::zeros(&[hidden]),
            fc2_weight: Tensor::zeros(&[4, hidden]),
            fc2_bias: Tensor::zeros(&[4]),
            lambda_a: DEFAULT_LAMBDA_A,
            lambda_b: DEFAULT_LAMBDA_B,
        }
    }

    pub fn channels(&self) -> usize {
        self.fc1_weight.shape()[1]
    }

    fn scales(&self) -> [f64; 4] {
        [self.lambda_a, self.lambda_b, self.lambda_a, self.lambda_b]
    }
}

impl Parameters for DyReluParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "fc1.weight"), &self.fc1_weight);
        f(&join(prefix, "fc1.bias"), &self.fc1_bias);
        f(&join(prefix, "fc2.weight"), &self.fc2_weight);
        f(&join(prefix, "fc2.bias"), &self.fc2_bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "fc1.weight"), &mut self.fc1_weight);
        f(&join(prefix, "fc1.bias"), &mut self.fc1_bias);
        f(&join(prefix, "fc2.weight"), &mut self.fc2_weight);
        f(&join(prefix, "fc2.bias"), &mut self.fc2_bias);
    }
}

/// Intermediates of the hyper-function.
struct Hyper {
    context: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    coeffs: [f64; 4],
}

fn hyper(f: &StackedFeature, p: &DyReluParams) -> Result<Hyper> {
    let c = f.channels();
    if p.channels() != c {
        return Err(Error::ShapeMismatch {
            op: "task_attention",
            dim: "channels",
            expected: p.channels(),
            got: c,
        });
    }
    let rows = f.levels() * f.positions();
    let mut context = vec![0.0; c];
    for row in f.tensor().data().chunks(c) {
        for (a, v) in context.iter_mut().zip(row) {
            *a += v;
        }
    }
    context.iter_mut().for_each(|v| *v /= rows as f64);
    let hidden_pre = fully_connected(&context, &p.fc1_weight, &p.fc1_bias)?;
    let hidden: Vec<f64> = hidden_pre.iter().map(|v| v.max(0.0)).collect();
    let logits = fully_connected(&hidden, &p.fc2_weight, &p.fc2_bias)?;
    let scales = p.scales();
    let mut coeffs = DEFAULT_COEFFS;
    for i in 0..4 {
        coeffs[i] += scales[i] * (2.0 * hard_sigmoid(logits[i]) - 1.0);
    }
    Ok(Hyper {
        context,
        hidden_pre,
        hidden,
        logits,
        coeffs,
    })
}

/// The `(α¹, β¹, α², β²)` predicted for `f`.
pub fn dyrelu_coefficients(f: &StackedFeature, p: &DyReluParams) -> Result<[f64; 4]> {
    Ok(hyper(f, p)?.coeffs)
}

/// `max(α¹·x + β¹, α²·x + β²)` elementwise.
pub fn apply_dyrelu(f: &StackedFeature, coeffs: [f64; 4]) -> Result<StackedFeature> {
    let [a1, b1, a2, b2] = coeffs;
    f.with_data(f.tensor().map(|x| (a1 * x + b1).max(a2 * x + b2)))
}

pub fn task_attention(f: &StackedFeature, p: &DyReluParams) -> Result<StackedFeature> {
    apply_dyrelu(f, hyper(f, p)?.coeffs)
}

pub fn task_attention_backward(
    f: &StackedFeature,
    p: &DyReluParams,
    dy: &StackedFeature,
    grads: &mut DyReluParams,
) -> Result<StackedFeature> {
    let h = hyper(f, p)?;
    let [a1, b1, a2, b2] = h.coeffs;
    let c = f.channels();
    let mut dcoeffs = [0.0; 4];
    let mut dx: Vec<f64> = Vec::with_capacity(f.tensor().numel());
    for (&x, &g) in f.tensor().data().iter().zip(dy.tensor().data()) {
        if a1 * x + b1 >= a2 * x + b2 {
            dcoeffs[0] += g * x;
            dcoeffs[1] += g;
            dx.push(g * a1);
        } else {
            dcoeffs[2] += g * x;
            dcoeffs[3] += g;
            dx.push(g * a2);
        }
    }
    let scales = p.scales();
    let dlogits: Vec<f64> = (0..4)
        .map(|i| dcoeffs[i] * scales[i] * 2.0 * hard_sigmoid_grad(h.logits[i]))
        .collect();
    let (dhidden, dw2, db2) = fully_connected_backward(&h.hidden, &p.fc2_weight, &dlogits)?;
    grads.fc2_weight.accumulate(&dw2)?;
    grads.fc2_bias.accumulate(&db2)?;
    let dpre: Vec<f64> = dhidden
        .iter()
        .zip(&h.hidden_pre)
        .map(|(d, &z)| if z > 0.0 { *d } else { 0.0 })
        .collect();
    let (dctx, dw1, db1) = fully_connected_backward(&h.context, &p.fc1_weight, &dpre)?;
    grads.fc1_weight.accumulate(&dw1)?;
    grads.fc1_bias.accumulate(&db1)?;
    let rows = (f.levels() * f.positions()) as f64;
    for row in dx.chunks_mut(c) {
        for (v, d) in row.iter_mut().zip(&dctx) {
            *v += d / rows;
        }
    }
    f.with_data(Tensor::new(f.tensor().shape(), dx)?)
}
