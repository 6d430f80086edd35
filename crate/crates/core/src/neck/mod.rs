//! Toy backbone and the feature-fusion neck: coordinate attention on the
//! backbone taps, SPP wrapped in five-conv blocks, then top-down and
//! bottom-up fusion.

pub mod backbone;
pub mod csp;
pub mod spp;

use rand::Rng;

use crate::coord::{coord_attention, coord_attention_backward, CAParams};
use crate::error::{Error, Result};
use crate::layers::{join, ConvLayers, ConvStack, Parameters};
use crate::ops::{
    concat, split, upsample_nearest, upsample_nearest_backward, Activation, ConvParams, LEAKY,
};
use crate::tensor::Tensor;

pub use backbone::{Backbone, FeaturePyramid, BACKBONE_STRIDE};
pub use csp::CspLayer;
pub use spp::{spp, spp_backward, SPP_POOLS};

/// Alternating 1×1 / 3×3 / 1×1 / 3×3 / 1×1 convolutions ending at `out_c`.
pub fn five_conv(
    in_c: usize,
    out_c: usize,
    act: Activation,
    separable: bool,
    rng: &mut impl Rng,
) -> ConvStack {
    let specs = [
        (out_c, 1, 1),
        (2 * out_c, 3, 1),
        (out_c, 1, 1),
        (2 * out_c, 3, 1),
        (out_c, 1, 1),
    ];
    ConvStack::build(in_c, &specs, act, separable, rng)
}

/// 1×1 / 3×3 / 1×1 convolutions ending at `out_c`.
pub fn three_conv(
    in_c: usize,
    out_c: usize,
    act: Activation,
    separable: bool,
    rng: &mut impl Rng,
) -> ConvStack {
    ConvStack::build(
        in_c,
        &[(out_c, 1, 1), (2 * out_c, 3, 1), (out_c, 1, 1)],
        act,
        separable,
        rng,
    )
}

/// A fusion stage: either the five-conv block or its CSP replacement.
#[derive(Clone, Debug, PartialEq)]
pub enum FusionBlock {
    Plain(ConvStack),
    Csp(CspLayer),
}

impl FusionBlock {
    pub fn init(in_c: usize, out_c: usize, csp: bool, separable: bool, rng: &mut impl Rng) -> Self {
        if csp {
            FusionBlock::Csp(CspLayer::init(in_c, out_c, LEAKY, separable, rng))
        } else {
            FusionBlock::Plain(five_conv(in_c, out_c, LEAKY, separable, rng))
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            FusionBlock::Plain(s) => s.forward(x),
            FusionBlock::Csp(c) => c.forward(x),
        }
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, grads: &mut FusionBlock) -> Result<Tensor> {
        match (self, grads) {
            (FusionBlock::Plain(s), FusionBlock::Plain(g)) => s.backward(x, dy, g),
            (FusionBlock::Csp(c), FusionBlock::Csp(g)) => c.backward(x, dy, g),
            _ => panic!("gradient container does not match layer structure"),
        }
    }
}

impl ConvLayers for FusionBlock {
    fn conv_layers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvParams)>) {
        match self {
            FusionBlock::Plain(s) => s.conv_layers(prefix, out),
            FusionBlock::Csp(c) => c.conv_layers(prefix, out),
        }
    }
}

impl Parameters for FusionBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            FusionBlock::Plain(s) => s.visit(prefix, f),
            FusionBlock::Csp(c) => c.visit(prefix, f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            FusionBlock::Plain(s) => s.visit_mut(prefix, f),
            FusionBlock::Csp(c) => c.visit_mut(prefix, f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neck {
    pub ca: [CAParams; 3],
    pub spp_pre: ConvStack,
    pub spp_post: ConvStack,
    pub reduce5: ConvStack,
    pub lateral4: ConvStack,
    pub fuse4_td: FusionBlock,
    pub reduce4: ConvStack,
    pub lateral3: ConvStack,
    pub fuse3_td: FusionBlock,
    pub down3: ConvStack,
    pub fuse4_bu: FusionBlock,
    pub down4: ConvStack,
    pub fuse5_bu: FusionBlock,
}

/// Every intermediate of one neck pass.
#[derive(Clone, Debug)]
pub struct NeckTrace {
    pub attended: [Tensor; 3],
    pub spp_in: Tensor,
    pub spp_out: Tensor,
    pub t5: Tensor,
    pub j4: Tensor,
    pub t4: Tensor,
    pub j3: Tensor,
    pub p3: Tensor,
    pub k4: Tensor,
    pub p4: Tensor,
    pub k5: Tensor,
    pub p5: Tensor,
}

/// Checks that backbone widths support the neck's halvings and the CA ratio.
pub fn validate_widths(widths: [usize; 3], ca_ratio: usize) -> Result<()> {
    for w in widths {
        if w == 0 || w % 4 != 0 {
            return Err(Error::invalid(
                "neck",
                format!("width {w} is not a positive multiple of 4"),
            ));
        }
        if ca_ratio == 0 || w % ca_ratio != 0 {
            return Err(Error::invalid(
                "neck",
                format!("coordinate attention ratio {ca_ratio} does not divide width {w}"),
            ));
        }
    }
    Ok(())
}

impl Neck {
    pub fn init(
        widths: [usize; 3],
        ca_ratio: usize,
        csp: bool,
        separable: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        validate_widths(widths, ca_ratio)?;
        let [w3, w4, w5] = widths;
        let ca = [
            CAParams::init(w3, ca_ratio, rng)?,
            CAParams::init(w4, ca_ratio, rng)?,
            CAParams::init(w5, ca_ratio, rng)?,
        ];
        let sep = separable;
        let spp_pre = five_conv(w5, w5 / 2, LEAKY, sep, rng);
        let spp_post = five_conv(2 * w5, w5 / 2, LEAKY, sep, rng);
        let reduce5 = ConvStack::build(w5 / 2, &[(w4 / 2, 1, 1)], LEAKY, sep, rng);
        let lateral4 = three_conv(w4, w4 / 2, LEAKY, sep, rng);
        let fuse4_td = FusionBlock::init(w4, w4 / 2, csp, sep, rng);
        let reduce4 = ConvStack::build(w4 / 2, &[(w3 / 2, 1, 1)], LEAKY, sep, rng);
        let lateral3 = three_conv(w3, w3 / 2, LEAKY, sep, rng);
        let fuse3_td = FusionBlock::init(w3, w3 / 2, csp, sep, rng);
        let down3 = ConvStack::build(w3 / 2, &[(w4 / 2, 3, 2)], LEAKY, sep, rng);
        let fuse4_bu = FusionBlock::init(w4, w4 / 2, csp, sep, rng);
        let down4 = ConvStack::build(w4 / 2, &[(w5 / 2, 3, 2)], LEAKY, sep, rng);
        let fuse5_bu = FusionBlock::init(w5, w5 / 2, csp, sep, rng);
        Ok(Self {
            ca,
            spp_pre,
            spp_post,
            reduce5,
            lateral4,
            fuse4_td,
            reduce4,
            lateral3,
            fuse3_td,
            down3,
            fuse4_bu,
            down4,
            fuse5_bu,
        })
    }

    /// Output widths of P3, P4, P5.
    pub fn out_channels(&self) -> [usize; 3] {
        [
            self.down3.in_channels(),
            self.down4.in_channels(),
            self.spp_post.out_channels(),
        ]
    }

    pub fn trace(&self, fp: &FeaturePyramid) -> Result<NeckTrace> {
        let [c3, c4, c5] = &fp.levels;
        let attended = [
            coord_attention(c3, &self.ca[0])?,
            coord_attention(c4, &self.ca[1])?,
            coord_attention(c5, &self.ca[2])?,
        ];
        let [a3, a4, a5] = &attended;
        let spp_in = self.spp_pre.forward(a5)?;
        let spp_out = spp(&spp_in, &SPP_POOLS)?;
        let t5 = self.spp_post.forward(&spp_out)?;
        let u5 = upsample_nearest(&self.reduce5.forward(&t5)?, 2)?;
        let j4 = concat(&[&self.lateral4.forward(a4)?, &u5], 1)?;
        let t4 = self.fuse4_td.forward(&j4)?;
        let u4 = upsample_nearest(&self.reduce4.forward(&t4)?, 2)?;
        let j3 = concat(&[&self.lateral3.forward(a3)?, &u4], 1)?;
        let p3 = self.fuse3_td.forward(&j3)?;
        let k4 = concat(&[&self.down3.forward(&p3)?, &t4], 1)?;
        let p4 = self.fuse4_bu.forward(&k4)?;
        let k5 = concat(&[&self.down4.forward(&p4)?, &t5], 1)?;
        let p5 = self.fuse5_bu.forward(&k5)?;
        Ok(NeckTrace {
            attended,
            spp_in,
            spp_out,
            t5,
            j4,
            t4,
            j3,
            p3,
            k4,
            p4,
            k5,
            p5,
        })
    }

    pub fn forward(&self, fp: &FeaturePyramid) -> Result<FeaturePyramid> {
        let t = self.trace(fp)?;
        Ok(FeaturePyramid {
            levels: [t.p3, t.p4, t.p5],
        })
    }

    pub fn backward(
        &self,
        fp: &FeaturePyramid,
        dy: &FeaturePyramid,
        grads: &mut Neck,
    ) -> Result<FeaturePyramid> {
        let t = self.trace(fp)?;
        let [a3, a4, a5] = &t.attended;
        let halves = |x: &Tensor| {
            let c = x.shape()[1];
            split(x, 1, &[c / 2, c - c / 2])
        };

        let dk5 = halves(
            &self
                .fuse5_bu
                .backward(&t.k5, &dy.levels[2], &mut grads.fuse5_bu)?,
        )?;
        let mut dt5 = dk5[1].clone();
        let mut dp4 = self.down4.backward(&t.p4, &dk5[0], &mut grads.down4)?;
        dp4.accumulate(&dy.levels[1])?;

        let dk4 = halves(&self.fuse4_bu.backward(&t.k4, &dp4, &mut grads.fuse4_bu)?)?;
        let mut dt4 = dk4[1].clone();
        let mut dp3 = self.down3.backward(&t.p3, &dk4[0], &mut grads.down3)?;
        dp3.accumulate(&dy.levels[0])?;

        let dj3 = halves(&self.fuse3_td.backward(&t.j3, &dp3, &mut grads.fuse3_td)?)?;
        let da3 = self.lateral3.backward(a3, &dj3[0], &mut grads.lateral3)?;
        let dr4 = upsample_nearest_backward(&dj3[1], 2)?;
        dt4.accumulate(&self.reduce4.backward(&t.t4, &dr4, &mut grads.reduce4)?)?;

        let dj4 = halves(&self.fuse4_td.backward(&t.j4, &dt4, &mut grads.fuse4_td)?)?;
        let da4 = self.lateral4.backward(a4, &dj4[0], &mut grads.lateral4)?;
        let dr5 = upsample_nearest_backward(&dj4[1], 2)?;
        dt5.accumulate(&self.reduce5.backward(&t.t5, &dr5, &mut grads.reduce5)?)?;

        let dspp_out = self
            .spp_post
            .backward(&t.spp_out, &dt5, &mut grads.spp_post)?;
        let dspp_in = spp_backward(&t.spp_in, &SPP_POOLS, &dspp_out)?;
        let da5 = self.spp_pre.backward(a5, &dspp_in, &mut grads.spp_pre)?;

        let [c3, c4, c5] = &fp.levels;
        let [g3, g4, g5] = &mut grads.ca;
        Ok(FeaturePyramid {
            levels: [
                coord_attention_backward(c3, &self.ca[0], &da3, g3)?,
                coord_attention_backward(c4, &self.ca[1], &da4, g4)?,
                coord_attention_backward(c5, &self.ca[2], &da5, g5)?,
            ],
        })
    }
}

impl ConvLayers for Neck {
    fn conv_layers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvParams)>) {
        for (i, ca) in self.ca.iter().enumerate() {
            ca.conv_layers(&join(prefix, &format!("ca{}", i + 3)), out);
        }
        self.spp_pre.conv_layers(&join(prefix, "spp_pre"), out);
        self.spp_post.conv_layers(&join(prefix, "spp_post"), out);
        self.reduce5.conv_layers(&join(prefix, "reduce5"), out);
        self.lateral4.conv_layers(&join(prefix, "lateral4"), out);
        self.fuse4_td.conv_layers(&join(prefix, "fuse4_td"), out);
        self.reduce4.conv_layers(&join(prefix, "reduce4"), out);
        self.lateral3.conv_layers(&join(prefix, "lateral3"), out);
        self.fuse3_td.conv_layers(&join(prefix, "fuse3_td"), out);
        self.down3.conv_layers(&join(prefix, "down3"), out);
        self.fuse4_bu.conv_layers(&join(prefix, "fuse4_bu"), out);
        self.down4.conv_layers(&join(prefix, "down4"), out);
        self.fuse5_bu.conv_layers(&join(prefix, "fuse5_bu"), out);
    }
}

impl Parameters for Neck {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, ca) in self.ca.iter().enumerate() {
            ca.visit(&join(prefix, &format!("ca{}", i + 3)), f);
        }
        self.spp_pre.visit(&join(prefix, "spp_pre"), f);
        self.spp_post.visit(&join(prefix, "spp_post"), f);
        self.reduce5.visit(&join(prefix, "reduce5"), f);
        self.lateral4.visit(&join(prefix, "lateral4"), f);
        self.fuse4_td.visit(&join(prefix, "fuse4_td"), f);
        self.reduce4.visit(&join(prefix, "reduce4"), f);
        self.lateral3.visit(&join(prefix, "lateral3"), f);
        self.fuse3_td.visit(&join(prefix, "fuse3_td"), f);
        self.down3.visit(&join(prefix, "down3"), f);
        self.fuse4_bu.visit(&join(prefix, "fuse4_bu"), f);
        self.down4.visit(&join(prefix, "down4"), f);
        self.fuse5_bu.visit(&join(prefix, "fuse5_bu"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, ca) in self.ca.iter_mut().enumerate() {
            ca.visit_mut(&join(prefix, &format!("ca{}", i + 3)), f);
        }
        self.spp_pre.visit_mut(&join(prefix, "spp_pre"), f);
        self.spp_post.visit_mut(&join(prefix, "spp_post"), f);
        self.reduce5.visit_mut(&join(prefix, "reduce5"), f);
        self.lateral4.visit_mut(&join(prefix, "lateral4"), f);
        self.fuse4_td.visit_mut(&join(prefix, "fuse4_td"), f);
        self.reduce4.visit_mut(&join(prefix, "reduce4"), f);
        self.lateral3.visit_mut(&join(prefix, "lateral3"), f);
        self.fuse3_td.visit_mut(&join(prefix, "fuse3_td"), f);
        self.down3.visit_mut(&join(prefix, "down3"), f);
        self.fuse4_bu.visit_mut(&join(prefix, "fuse4_bu"), f);
        self.down4.visit_mut(&join(prefix, "down4"), f);
        self.fuse5_bu.visit_mut(&join(prefix, "fuse5_bu"), f);
    }
}
