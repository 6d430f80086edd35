//! Parameter containers and the convolution building blocks shared by the
//! backbone, neck and heads.
//!
//! Every layer exposes `forward(x)` and `backward(x, dy, grads) -> dx`.
//! `backward` recomputes whatever intermediates it needs from `x` and
//! accumulates parameter gradients into `grads`, a zeroed clone of the layer.

use rand::Rng;

use crate::error::Result;
use crate::ops::{
    activation, activation_backward, conv2d, conv2d_backward, Activation, BatchNorm, ConvParams,
};
use crate::tensor::Tensor;

/// Named traversal over every trainable or stored tensor of a structure.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Number of trainable scalars.
pub fn param_count(p: &impl Parameters) -> usize {
    let mut n = 0;
    p.visit("", &mut |name, t| {
        if is_trainable(name) {
            n += t.numel()
        }
    });
    n
}

pub fn named_tensors(p: &impl Parameters) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    p.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

/// Stored statistics are visited for persistence but never optimised.
pub fn is_trainable(name: &str) -> bool {
    !(name.ends_with("running_mean") || name.ends_with("running_var"))
}

/// Clone with every tensor set to zero, used as a gradient accumulator.
pub fn zeroed<P: Parameters + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.visit_mut("", &mut |_, t| t.fill(0.0));
    z
}

/// `params -= lr * grads` over trainable tensors, paired by traversal order.
pub fn sgd_step<P: Parameters>(params: &mut P, grads: &P, lr: f64) {
    let mut gs = Vec::new();
    grads.visit("", &mut |_, t| gs.push(t.data().to_vec()));
    let mut i = 0;
    params.visit_mut("", &mut |name, t| {
        if is_trainable(name) {
            for (v, g) in t.data_mut().iter_mut().zip(&gs[i]) {
                *v -= lr * g;
            }
        }
        i += 1;
    });
}

/// Enumerates the convolutions inside a structure, for introspection.
pub trait ConvLayers {
    fn conv_layers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvParams)>);
}

impl ConvLayers for ConvParams {
    fn conv_layers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvParams)>) {
        out.push((prefix.to_string(), self));
    }
}

impl<T: ConvLayers> ConvLayers for Vec<T> {
    fn conv_layers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvParams)>) {
        for (i, item) in self.iter().enumerate() {
            item.conv_layers(&join(prefix, &i.to_string()), out);
        }
    }
}

impl Parameters for ConvParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl Parameters for BatchNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "scale"), &self.scale);
        f(&join(prefix, "shift"), &self.shift);
        f(&join(prefix, "running_mean"), &self.mean);
        f(&join(prefix, "running_var"), &self.var);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "scale"), &mut self.scale);
        f(&join(prefix, "shift"), &mut self.shift);
        f(&join(prefix, "running_mean"), &mut self.mean);
        f(&join(prefix, "running_var"), &mut self.var);
    }
}

impl<T: Parameters> Parameters for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// A convolution that is either dense or depth-wise followed by point-wise.
#[derive(Clone, Debug, PartialEq)]
pub enum ConvUnit {
    Plain(ConvParams),
    Separable {
        depthwise: ConvParams,
        pointwise: ConvParams,
    },
}

impl ConvUnit {
    /// Fan-in uniform initialisation. `separable` only applies to kernels
    /// larger than 1×1.
    pub fn init(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        separable: bool,
        rng: &mut impl Rng,
    ) -> Self {
        if separable && kernel > 1 {
            ConvUnit::Separable {
                depthwise: ConvParams::fan_in_uniform(in_c, in_c, kernel, stride, in_c, rng),
                pointwise: ConvParams::fan_in_uniform(in_c, out_c, 1, 1, 1, rng),
            }
        } else {
            ConvUnit::Plain(ConvParams::fan_in_uniform(
                in_c, out_c, kernel, stride, 1, rng,
            ))
        }
    }

    /// Zero-output unit. A separable unit keeps a random depth-wise stage so
    /// that its point-wise weights still receive gradient.
    pub fn zero_output(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        separable: bool,
        rng: &mut impl Rng,
    ) -> Self {
        match Self::init(in_c, out_c, kernel, 1, separable, rng) {
            ConvUnit::Plain(_) => ConvUnit::Plain(ConvParams::zeros(in_c, out_c, kernel, 1, 1)),
            ConvUnit::Separable { depthwise, .. } => ConvUnit::Separable {
                depthwise,
                pointwise: ConvParams::zeros(in_c, out_c, 1, 1, 1),
            },
        }
    }

    pub fn convs(&self) -> Vec<&ConvParams> {
        match self {
            ConvUnit::Plain(p) => vec![p],
            ConvUnit::Separable {
                depthwise,
                pointwise,
            } => vec![depthwise, pointwise],
        }
    }

    /// The convolution whose output channels are this unit's outputs.
    pub fn output_conv_mut(&mut self) -> &mut ConvParams {
        match self {
            ConvUnit::Plain(p) => p,
            ConvUnit::Separable { pointwise, .. } => pointwise,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.convs()[0].in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.convs().last().unwrap().out_channels()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            ConvUnit::Plain(p) => conv2d(x, p),
            ConvUnit::Separable {
                depthwise,
                pointwise,
            } => conv2d(&conv2d(x, depthwise)?, pointwise),
        }
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, grads: &mut ConvUnit) -> Result<Tensor> {
        match (self, grads) {
            (ConvUnit::Plain(p), ConvUnit::Plain(g)) => {
                let r = conv2d_backward(x, p, dy)?;
                g.weight.accumulate(&r.dweight)?;
                g.bias.accumulate(&r.dbias)?;
                Ok(r.dx)
            }
            (
                ConvUnit::Separable {
                    depthwise,
                    pointwise,
                },
                ConvUnit::Separable {
                    depthwise: gd,
                    pointwise: gp,
                },
            ) => {
                let mid = conv2d(x, depthwise)?;
                let rp = conv2d_backward(&mid, pointwise, dy)?;
                gp.weight.accumulate(&rp.dweight)?;
                gp.bias.accumulate(&rp.dbias)?;
                let rd = conv2d_backward(x, depthwise, &rp.dx)?;
                gd.weight.accumulate(&rd.dweight)?;
                gd.bias.accumulate(&rd.dbias)?;
                Ok(rd.dx)
            }
            _ => panic!("gradient container does not match layer structure"),
        }
    }
}

impl ConvLayers for ConvUnit {
    fn conv_layers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvParams)>) {
        match self {
            ConvUnit::Plain(p) => p.conv_layers(prefix, out),
            ConvUnit::Separable {
                depthwise,
                pointwise,
            } => {
                depthwise.conv_layers(&join(prefix, "dw"), out);
                pointwise.conv_layers(&join(prefix, "pw"), out);
            }
        }
    }
}

impl Parameters for ConvUnit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            ConvUnit::Plain(p) => p.visit(prefix, f),
            ConvUnit::Separable {
                depthwise,
                pointwise,
            } => {
                depthwise.visit(&join(prefix, "dw"), f);
                pointwise.visit(&join(prefix, "pw"), f);
            }
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            ConvUnit::Plain(p) => p.visit_mut(prefix, f),
            ConvUnit::Separable {
                depthwise,
                pointwise,
            } => {
                depthwise.visit_mut(&join(prefix, "dw"), f);
                pointwise.visit_mut(&join(prefix, "pw"), f);
            }
        }
    }
}

/// Convolution followed by an activation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub conv: ConvUnit,
    pub act: Activation,
}

impl ConvBlock {
    pub fn new(conv: ConvUnit, act: Activation) -> Self {
        Self { conv, act }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(activation(self.act, &self.conv.forward(x)?))
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, grads: &mut ConvBlock) -> Result<Tensor> {
        let pre = self.conv.forward(x)?;
        let dpre = activation_backward(self.act, &pre, dy)?;
        self.conv.backward(x, &dpre, &mut grads.conv)
    }
}

impl ConvLayers for ConvBlock {
    fn conv_layers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvParams)>) {
        self.conv.conv_layers(&join(prefix, "conv"), out);
    }
}

impl Parameters for ConvBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.conv.visit(&join(prefix, "conv"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
    }
}

/// Sequential chain of conv blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack {
    pub blocks: Vec<ConvBlock>,
}

impl ConvStack {
    /// Chain of `(out_channels, kernel, stride)` convolutions starting at `in_c`.
    pub fn build(
        in_c: usize,
        specs: &[(usize, usize, usize)],
        act: Activation,
        separable: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut c = in_c;
        let blocks = specs
            .iter()
            .map(|&(out, k, stride)| {
                let b = ConvBlock::new(ConvUnit::init(c, out, k, stride, separable, rng), act);
                c = out;
                b
            })
            .collect();
        Self { blocks }
    }

    pub fn in_channels(&self) -> usize {
        self.blocks
            .first()
            .map(|b| b.conv.in_channels())
            .unwrap_or(0)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for b in &self.blocks {
            cur = b.forward(&cur)?;
        }
        Ok(cur)
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, grads: &mut ConvStack) -> Result<Tensor> {
        let mut inputs = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for b in &self.blocks {
            let next = b.forward(&cur)?;
            inputs.push(cur);
            cur = next;
        }
        let mut g = dy.clone();
        for ((b, gb), input) in self
            .blocks
            .iter()
            .zip(grads.blocks.iter_mut())
            .zip(&inputs)
            .rev()
        {
            g = b.backward(input, &g, gb)?;
        }
        Ok(g)
    }

    pub fn out_channels(&self) -> usize {
        self.blocks
            .last()
            .map(|b| b.conv.out_channels())
            .unwrap_or(0)
    }
}

impl ConvLayers for ConvStack {
    fn conv_layers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvParams)>) {
        self.blocks.conv_layers(prefix, out);
    }
}

impl Parameters for ConvStack {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.blocks.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.blocks.visit_mut(prefix, f);
    }
}
