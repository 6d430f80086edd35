use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{join, ConvLayers, ConvStack, Parameters};
use crate::ops::ConvParams;
use crate::ops::LEAKY;
use crate::tensor::Tensor;

/// Three feature maps at strides 8, 16 and 32.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 3],
}

impl FeaturePyramid {
    pub fn zeros_like(&self) -> Self {
        Self {
            levels: self.levels.clone().map(|t| Tensor::zeros_like(&t)),
        }
    }
}

/// Strided convolution stack standing in for a full backbone: two stem
/// stages to stride 4, then one stage per pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub stem: ConvStack,
    pub stages: [ConvStack; 3],
}

pub const BACKBONE_STRIDE: usize = 32;

impl Backbone {
    pub fn init(widths: [usize; 3], separable: bool, rng: &mut impl Rng) -> Self {
        let half = widths[0] / 2;
        let stem = ConvStack::build(3, &[(half, 3, 2), (half, 3, 2)], LEAKY, separable, rng);
        let s3 = ConvStack::build(half, &[(widths[0], 3, 2)], LEAKY, separable, rng);
        let s4 = ConvStack::build(widths[0], &[(widths[1], 3, 2)], LEAKY, separable, rng);
        let s5 = ConvStack::build(widths[1], &[(widths[2], 3, 2)], LEAKY, separable, rng);
        Self {
            stem,
            stages: [s3, s4, s5],
        }
    }

    fn check(image: &Tensor) -> Result<()> {
        let [_, _, h, w] = image.dims4("backbone")?;
        if h % BACKBONE_STRIDE != 0 || w % BACKBONE_STRIDE != 0 {
            return Err(Error::invalid(
                "backbone",
                format!("image extents {h}x{w} not divisible by {BACKBONE_STRIDE}"),
            ));
        }
        Ok(())
    }

    /// `image` is `[1, 3, H, W]`.
    pub fn forward(&self, image: &Tensor) -> Result<FeaturePyramid> {
        Self::check(image)?;
        let stem = self.stem.forward(image)?;
        let c3 = self.stages[0].forward(&stem)?;
        let c4 = self.stages[1].forward(&c3)?;
        let c5 = self.stages[2].forward(&c4)?;
        Ok(FeaturePyramid {
            levels: [c3, c4, c5],
        })
    }

    pub fn backward(
        &self,
        image: &Tensor,
        dy: &FeaturePyramid,
        grads: &mut Backbone,
    ) -> Result<Tensor> {
        Self::check(image)?;
        let stem = self.stem.forward(image)?;
        let c3 = self.stages[0].forward(&stem)?;
        let c4 = self.stages[1].forward(&c3)?;
        let mut d = self.stages[2].backward(&c4, &dy.levels[2], &mut grads.stages[2])?;
        d.accumulate(&dy.levels[1])?;
        let mut d = self.stages[1].backward(&c3, &d, &mut grads.stages[1])?;
        d.accumulate(&dy.levels[0])?;
        let d = self.stages[0].backward(&stem, &d, &mut grads.stages[0])?;
        self.stem.backward(image, &d, &mut grads.stem)
    }
}

impl ConvLayers for Backbone {
    fn conv_layers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvParams)>) {
        self.stem.conv_layers(&join(prefix, "stem"), out);
        for (i, s) in self.stages.iter().enumerate() {
            s.conv_layers(&join(prefix, &format!("c{}", i + 3)), out);
        }
    }
}

impl Parameters for Backbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("c{}", i + 3)), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("c{}", i + 3)), f);
        }
    }
}
