use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

/// Inference-mode batch normalization with stored statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub scale: Tensor,
    pub shift: Tensor,
    pub mean: Tensor,
    pub var: Tensor,
    pub eps: f64,
}

impl BatchNorm {
    /// scale 1, shift 0, mean 0, var 1.
    pub fn identity(channels: usize) -> Self {
        Self {
            scale: Tensor::full(&[channels], 1.0),
            shift: Tensor::zeros(&[channels]),
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], 1.0),
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.numel()
    }

    fn validate(&self, c: usize) -> Result<()> {
        for (name, t) in [
            ("scale length", &self.scale),
            ("shift length", &self.shift),
            ("mean length", &self.mean),
            ("var length", &self.var),
        ] {
            if t.numel() != c {
                return Err(Error::ShapeMismatch {
                    op: "batchnorm",
                    dim: name,
                    expected: c,
                    got: t.numel(),
                });
            }
        }
        if let Some(i) = self.var.data().iter().position(|&v| v < 0.0) {
            return Err(Error::invalid(
                "batchnorm",
                format!("negative variance in channel {i}"),
            ));
        }
        Ok(())
    }

    /// Per-channel `(gain, offset)` so that `y = gain * x + offset`.
    fn affine(&self) -> Vec<(f64, f64)> {
        (0..self.channels())
            .map(|c| {
                let inv = 1.0 / (self.var.data()[c] + self.eps).sqrt();
                let gain = self.scale.data()[c] * inv;
                (gain, self.shift.data()[c] - self.mean.data()[c] * gain)
            })
            .collect()
    }
}

pub fn batchnorm_inference(x: &Tensor, bn: &BatchNorm) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("batchnorm")?;
    bn.validate(c)?;
    let aff = bn.affine();
    let mut out = x.data().to_vec();
    for (plane, chunk) in out.chunks_mut(h * w).enumerate() {
        let (gain, offset) = aff[plane % c];
        chunk.iter_mut().for_each(|v| *v = *v * gain + offset);
    }
    debug_assert_eq!(out.len(), n * c * h * w);
    Tensor::new(x.shape(), out)
}

/// Returns `(dx, dscale, dshift)`; running statistics are not trained.
pub fn batchnorm_backward(
    x: &Tensor,
    bn: &BatchNorm,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [_, c, h, w] = x.dims4("batchnorm backward")?;
    bn.validate(c)?;
    x.expect_same_shape("batchnorm backward", dy)?;
    let mut dx = vec![0.0; x.numel()];
    let mut dscale = vec![0.0; c];
    let mut dshift = vec![0.0; c];
    for (plane, (xs, gs)) in x
        .data()
        .chunks(h * w)
        .zip(dy.data().chunks(h * w))
        .enumerate()
    {
        let ch = plane % c;
        let inv = 1.0 / (bn.var.data()[ch] + bn.eps).sqrt();
        let gain = bn.scale.data()[ch] * inv;
        for (i, (&xv, &g)) in xs.iter().zip(gs).enumerate() {
            dx[plane * h * w + i] = g * gain;
            dscale[ch] += g * (xv - bn.mean.data()[ch]) * inv;
            dshift[ch] += g;
        }
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(&[c], dscale)?,
        Tensor::new(&[c], dshift)?,
    ))
}
