//! Scale-aware attention: one hard-sigmoid gate per level, computed from the
//! level means through a linear map across the level axis.

use rand::Rng;

use super::StackedFeature;
use crate::error::{Error, Result};
use crate::layers::{join, Parameters};
use crate::ops::activation::{hard_sigmoid, hard_sigmoid_grad};
use crate::tensor::Tensor;

/// Linear map `[S_L × S_L]` plus bias, the 1×1 convolution over levels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleAttnParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Intermediates of the gate computation.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleGates {
    pub means: Vec<f64>,
    pub logits: Vec<f64>,
    pub gates: Vec<f64>,
}

impl ScaleAttnParams {
    pub fn zeros(levels: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[levels, levels]),
            bias: Tensor::zeros(&[levels]),
        }
    }

    pub fn init(levels: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (levels as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[levels, levels], -bound, bound, rng),
            bias: Tensor::zeros(&[levels]),
        }
    }

    fn check(&self, levels: usize) -> Result<()> {
        if self.weight.shape() != [levels, levels] || self.bias.shape() != [levels] {
            return Err(Error::ShapeMismatch {
                op: "scale_attention",
                dim: "levels",
                expected: levels,
                got: self.bias.numel(),
            });
        }
        Ok(())
    }
}

impl Parameters for ScaleAttnParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

pub fn scale_gates(f: &StackedFeature, p: &ScaleAttnParams) -> Result<ScaleGates> {
    let levels = f.levels();
    p.check(levels)?;
    let per_level = f.positions() * f.channels();
    let means: Vec<f64> = f
        .tensor()
        .data()
        .chunks(per_level)
        .map(|c| c.iter().sum::<f64>() / per_level as f64)
        .collect();
    let logits: Vec<f64> = (0..levels)
        .map(|l| {
            p.bias.data()[l]
                + (0..levels)
                    .map(|j| p.weight.data()[l * levels + j] * means[j])
                    .sum::<f64>()
        })
        .collect();
    let gates = logits.iter().map(|&z| hard_sigmoid(z)).collect();
    Ok(ScaleGates {
        means,
        logits,
        gates,
    })
}

pub fn scale_attention(f: &StackedFeature, p: &ScaleAttnParams) -> Result<StackedFeature> {
    let g = scale_gates(f, p)?;
    let per_level = f.positions() * f.channels();
    let mut out = f.tensor().clone();
    for (chunk, gate) in out.data_mut().chunks_mut(per_level).zip(&g.gates) {
        chunk.iter_mut().for_each(|v| *v *= gate);
    }
    f.with_data(out)
}

pub fn scale_attention_backward(
    f: &StackedFeature,
    p: &ScaleAttnParams,
    dy: &StackedFeature,
    grads: &mut ScaleAttnParams,
) -> Result<StackedFeature> {
    let g = scale_gates(f, p)?;
    let levels = f.levels();
    let per_level = f.positions() * f.channels();
    let x = f.tensor().data();
    let d = dy.tensor().data();
    let dlogit: Vec<f64> = (0..levels)
        .map(|l| {
            let r = l * per_level..(l + 1) * per_level;
            let dgate: f64 = x[r.clone()].iter().zip(&d[r]).map(|(a, b)| a * b).sum();
            dgate * hard_sigmoid_grad(g.logits[l])
        })
        .collect();
    let mut dmean = vec![0.0; levels];
    for l in 0..levels {
        grads.bias.data_mut()[l] += dlogit[l];
        for j in 0..levels {
            grads.weight.data_mut()[l * levels + j] += dlogit[l] * g.means[j];
            dmean[j] += p.weight.data()[l * levels + j] * dlogit[l];
        }
    }
    let mut dx = vec![0.0; x.len()];
    for l in 0..levels {
        let spread = dmean[l] / per_level as f64;
        for i in l * per_level..(l + 1) * per_level {
            dx[i] = g.gates[l] * d[i] + spread;
        }
    }
    f.with_data(Tensor::new(f.tensor().shape(), dx)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::concat_levels;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_halve_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = concat_levels(&Tensor::uniform(&[3, 2, 2], -1.0, 1.0, &mut rng)).unwrap();
        let y = scale_attention(&f, &ScaleAttnParams::zeros(2)).unwrap();
        assert_eq!(y.tensor(), &f.tensor().scale(0.5));
    }

    #[test]
    fn large_bias_saturates_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = StackedFeature::from_levels(&[
            Tensor::uniform(&[3, 2, 2], -1.0, 1.0, &mut rng),
            Tensor::uniform(&[3, 2, 2], -1.0, 1.0, &mut rng),
        ])
        .unwrap();
        let min_mean = scale_gates(&f, &ScaleAttnParams::zeros(2))
            .unwrap()
            .means
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        let mut p = ScaleAttnParams::zeros(2);
        p.weight = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        p.bias.fill(1.0 - min_mean);
        let y = scale_attention(&f, &p).unwrap();
        assert_eq!(y.tensor(), f.tensor());
    }
}
