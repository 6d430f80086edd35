//! Coordinate attention: directional pooling, a shared squeeze over the
//! concatenated row/column descriptors, and separable sigmoid gates.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{join, ConvLayers, Parameters};
use crate::ops::{
    activation, activation_backward, batchnorm_backward, batchnorm_inference, concat, conv2d,
    conv2d_backward, directional_pool, directional_pool_backward, sigmoid, split, Activation,
    BatchNorm, ConvParams,
};
use crate::tensor::Tensor;

pub const DEFAULT_RATIO: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct CAParams {
    pub squeeze: ConvParams,
    pub squeeze_bn: BatchNorm,
    pub expand_h: ConvParams,
    pub expand_w: ConvParams,
    pub ratio: usize,
}

fn check_ratio(channels: usize, ratio: usize) -> Result<()> {
    if ratio == 0 || !channels.is_multiple_of(ratio) {
        return Err(Error::invalid(
            "coord_attention",
            format!("reduction ratio {ratio} does not divide {channels} channels"),
        ));
    }
    Ok(())
}

impl CAParams {
    pub fn init(channels: usize, ratio: usize, rng: &mut impl Rng) -> Result<Self> {
        check_ratio(channels, ratio)?;
        let mid = channels / ratio;
        Ok(Self {
            squeeze: ConvParams::fan_in_uniform(channels, mid, 1, 1, 1, rng),
            squeeze_bn: BatchNorm::identity(mid),
            expand_h: ConvParams::fan_in_uniform(mid, channels, 1, 1, 1, rng),
            expand_w: ConvParams::fan_in_uniform(mid, channels, 1, 1, 1, rng),
            ratio,
        })
    }

    /// Zero convolutions and identity normalisation.
    pub fn zeros(channels: usize, ratio: usize) -> Result<Self> {
        check_ratio(channels, ratio)?;
        let mid = channels / ratio;
        Ok(Self {
            squeeze: ConvParams::zeros(channels, mid, 1, 1, 1),
            squeeze_bn: BatchNorm::identity(mid),
            expand_h: ConvParams::zeros(mid, channels, 1, 1, 1),
            expand_w: ConvParams::zeros(mid, channels, 1, 1, 1),
            ratio,
        })
    }

    pub fn channels(&self) -> usize {
        self.squeeze.in_channels()
    }
}

impl ConvLayers for CAParams {
    fn conv_layers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvParams)>) {
        self.squeeze.conv_layers(&join(prefix, "squeeze"), out);
        self.expand_h.conv_layers(&join(prefix, "expand_h"), out);
        self.expand_w.conv_layers(&join(prefix, "expand_w"), out);
    }
}

impl Parameters for CAParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.squeeze.visit(&join(prefix, "squeeze"), f);
        self.squeeze_bn.visit(&join(prefix, "squeeze_bn"), f);
        self.expand_h.visit(&join(prefix, "expand_h"), f);
        self.expand_w.visit(&join(prefix, "expand_w"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.squeeze.visit_mut(&join(prefix, "squeeze"), f);
        self.squeeze_bn.visit_mut(&join(prefix, "squeeze_bn"), f);
        self.expand_h.visit_mut(&join(prefix, "expand_h"), f);
        self.expand_w.visit_mut(&join(prefix, "expand_w"), f);
    }
}

pub fn coord_embed(x: &Tensor) -> Result<(Tensor, Tensor)> {
    directional_pool(x)
}

/// `q_w` as `[N, C, W, 1]` so both descriptors share the spatial axis.
fn column(q_w: &Tensor) -> Result<Tensor> {
    let [n, c, _, w] = q_w.dims4("coord_generate")?;
    q_w.clone().reshape(&[n, c, w, 1])
}

struct Generated {
    stacked: Tensor,
    squeezed: Tensor,
    normed: Tensor,
    f_h: Tensor,
    f_w: Tensor,
    logit_h: Tensor,
    logit_w: Tensor,
}

fn generate(q_h: &Tensor, q_w: &Tensor, p: &CAParams) -> Result<Generated> {
    let [n, c, h, _] = q_h.dims4("coord_generate")?;
    let [_, _, _, w] = q_w.dims4("coord_generate")?;
    if q_w.shape()[..2] != [n, c] || q_h.shape()[3] != 1 || q_w.shape()[2] != 1 {
        return Err(Error::invalid(
            "coord_generate",
            "q_h must be [N, C, H, 1] and q_w [N, C, 1, W] from the same input",
        ));
    }
    check_ratio(c, p.ratio)?;
    let stacked = concat(&[q_h, &column(q_w)?], 2)?;
    let squeezed = conv2d(&stacked, &p.squeeze)?;
    let normed = batchnorm_inference(&squeezed, &p.squeeze_bn)?;
    let act = activation(Activation::Relu, &normed);
    let parts = split(&act, 2, &[h, w])?;
    let mid = act.shape()[1];
    let f_h = parts[0].clone();
    let f_w = parts[1].clone().reshape(&[n, mid, 1, w])?;
    let logit_h = conv2d(&f_h, &p.expand_h)?;
    let logit_w = conv2d(&f_w, &p.expand_w)?;
    Ok(Generated {
        stacked,
        squeezed,
        normed,
        f_h,
        f_w,
        logit_h,
        logit_w,
    })
}

/// Gates `g_h` `[N, C, H, 1]` and `g_w` `[N, C, 1, W]`, each in (0, 1).
pub fn coord_generate(q_h: &Tensor, q_w: &Tensor, p: &CAParams) -> Result<(Tensor, Tensor)> {
    let g = generate(q_h, q_w, p)?;
    Ok((g.logit_h.map(sigmoid), g.logit_w.map(sigmoid)))
}

/// Returns `(dq_h, dq_w)`.
pub fn coord_generate_backward(
    q_h: &Tensor,
    q_w: &Tensor,
    p: &CAParams,
    dg_h: &Tensor,
    dg_w: &Tensor,
    grads: &mut CAParams,
) -> Result<(Tensor, Tensor)> {
    let g = generate(q_h, q_w, p)?;
    let [n, c, h, _] = q_h.dims4("coord_generate backward")?;
    let w = q_w.shape()[3];
    let sig_back = |logit: &Tensor, dg: &Tensor| {
        logit.zip_map(dg, |z, d| {
            let s = sigmoid(z);
            d * s * (1.0 - s)
        })
    };
    let rh = conv2d_backward(&g.f_h, &p.expand_h, &sig_back(&g.logit_h, dg_h)?)?;
    let rw = conv2d_backward(&g.f_w, &p.expand_w, &sig_back(&g.logit_w, dg_w)?)?;
    grads.expand_h.weight.accumulate(&rh.dweight)?;
    grads.expand_h.bias.accumulate(&rh.dbias)?;
    grads.expand_w.weight.accumulate(&rw.dweight)?;
    grads.expand_w.bias.accumulate(&rw.dbias)?;

    let mid = g.f_h.shape()[1];
    let dact = concat(&[&rh.dx, &rw.dx.reshape(&[n, mid, w, 1])?], 2)?;
    let dnormed = activation_backward(Activation::Relu, &g.normed, &dact)?;
    let (dsq, dscale, dshift) = batchnorm_backward(&g.squeezed, &p.squeeze_bn, &dnormed)?;
    grads.squeeze_bn.scale.accumulate(&dscale)?;
    grads.squeeze_bn.shift.accumulate(&dshift)?;
    let rs = conv2d_backward(&g.stacked, &p.squeeze, &dsq)?;
    grads.squeeze.weight.accumulate(&rs.dweight)?;
    grads.squeeze.bias.accumulate(&rs.dbias)?;
    let parts = split(&rs.dx, 2, &[h, w])?;
    let dq_w = parts[1].clone().reshape(&[n, c, 1, w])?;
    Ok((parts[0].clone(), dq_w))
}

/// `y(c, i, j) = x(c, i, j) · g_h(c, i) · g_w(c, j)`.
pub fn coord_apply(x: &Tensor, g_h: &Tensor, g_w: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("coord_apply")?;
    if g_h.shape() != [n, c, h, 1] || g_w.shape() != [n, c, 1, w] {
        return Err(Error::invalid(
            "coord_apply",
            "gate shapes do not broadcast against the input",
        ));
    }
    let (gh, gw) = (g_h.data(), g_w.data());
    let mut out = x.data().to_vec();
    for plane in 0..n * c {
        for i in 0..h {
            for j in 0..w {
                out[(plane * h + i) * w + j] *= gh[plane * h + i] * gw[plane * w + j];
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Returns `(dx, dg_h, dg_w)`.
pub fn coord_apply_backward(
    x: &Tensor,
    g_h: &Tensor,
    g_w: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, c, h, w] = x.dims4("coord_apply backward")?;
    x.expect_same_shape("coord_apply backward", dy)?;
    let (gh, gw, xd, d) = (g_h.data(), g_w.data(), x.data(), dy.data());
    let mut dx = vec![0.0; x.numel()];
    let mut dgh = vec![0.0; n * c * h];
    let mut dgw = vec![0.0; n * c * w];
    for plane in 0..n * c {
        for i in 0..h {
            for j in 0..w {
                let k = (plane * h + i) * w + j;
                let (a, b) = (gh[plane * h + i], gw[plane * w + j]);
                dx[k] = d[k] * a * b;
                dgh[plane * h + i] += d[k] * xd[k] * b;
                dgw[plane * w + j] += d[k] * xd[k] * a;
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(g_h.shape(), dgh)?,
        Tensor::new(g_w.shape(), dgw)?,
    ))
}

pub fn coord_attention(x: &Tensor, p: &CAParams) -> Result<Tensor> {
    let (q_h, q_w) = coord_embed(x)?;
    let (g_h, g_w) = coord_generate(&q_h, &q_w, p)?;
    coord_apply(x, &g_h, &g_w)
}

pub fn coord_attention_backward(
    x: &Tensor,
    p: &CAParams,
    dy: &Tensor,
    grads: &mut CAParams,
) -> Result<Tensor> {
    let (q_h, q_w) = coord_embed(x)?;
    let (g_h, g_w) = coord_generate(&q_h, &q_w, p)?;
    let (mut dx, dg_h, dg_w) = coord_apply_backward(x, &g_h, &g_w, dy)?;
    let (dq_h, dq_w) = coord_generate_backward(&q_h, &q_w, p, &dg_h, &dg_w, grads)?;
    dx.accumulate(&directional_pool_backward(x.shape(), &dq_h, &dq_w)?)?;
    Ok(dx)
}
