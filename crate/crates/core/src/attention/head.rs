use rand::Rng;

use super::block::{dynamic_block, dynamic_block_backward, DynamicBlockParams};
use super::stacked::{concat_levels, concat_levels_backward, recover, recover_backward};
use super::StackedFeature;
use crate::error::{Error, Result};
use crate::layers::{join, ConvBlock, ConvLayers, ConvUnit, Parameters};
use crate::ops::{conv2d, conv2d_backward, ConvParams, LEAKY};
use crate::tensor::Tensor;

/// Dynamic blocks on a self-stacked level, then the 3×3 + 1×1 prediction head.
#[derive(Clone, Debug, PartialEq)]
pub struct TdaHead {
    pub blocks: Vec<DynamicBlockParams>,
    pub hidden: ConvBlock,
    pub predict: ConvParams,
    pub anchors: usize,
    pub num_classes: usize,
}

impl TdaHead {
    pub fn init(
        channels: usize,
        n_blocks: usize,
        anchors: usize,
        num_classes: usize,
        task_reduction: usize,
        separable: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let blocks = (0..n_blocks)
            .map(|_| DynamicBlockParams::init(channels, 2, task_reduction, separable, rng))
            .collect();
        let hidden = ConvBlock::new(
            ConvUnit::init(channels, 2 * channels, 3, 1, separable, rng),
            LEAKY,
        );
        let out = anchors * (5 + num_classes);
        Self {
            blocks,
            hidden,
            predict: ConvParams::fan_in_uniform(2 * channels, out, 1, 1, 1, rng),
            anchors,
            num_classes,
        }
    }

    pub fn channels(&self) -> usize {
        self.hidden.conv.in_channels()
    }

    pub fn output_channels(&self) -> usize {
        self.anchors * (5 + self.num_classes)
    }

    fn check(&self) -> Result<()> {
        if self.predict.out_channels() != self.output_channels() {
            return Err(Error::ShapeMismatch {
                op: "tda head",
                dim: "prediction channels",
                expected: self.output_channels(),
                got: self.predict.out_channels(),
            });
        }
        Ok(())
    }

    /// Attention stage only: `[C, H, W]` in and out.
    pub fn attend(&self, x: &Tensor) -> Result<Tensor> {
        let mut f = concat_levels(x)?;
        for b in &self.blocks {
            f = dynamic_block(&f, b)?;
        }
        recover(&f)
    }

    /// `[C, H, W]` feature to `[A·(5+K), H, W]` raw predictions.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check()?;
        let [c, h, w] = x.dims3("tda head")?;
        let r = self.attend(x)?.reshape(&[1, c, h, w])?;
        let y = conv2d(&self.hidden.forward(&r)?, &self.predict)?;
        y.reshape(&[self.output_channels(), h, w])
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, grads: &mut TdaHead) -> Result<Tensor> {
        self.check()?;
        let [c, h, w] = x.dims3("tda head")?;
        let mut inputs: Vec<StackedFeature> = Vec::with_capacity(self.blocks.len() + 1);
        inputs.push(concat_levels(x)?);
        for b in &self.blocks {
            let next = dynamic_block(inputs.last().unwrap(), b)?;
            inputs.push(next);
        }
        let last = inputs.last().unwrap();
        let r = recover(last)?.reshape(&[1, c, h, w])?;
        let hid = self.hidden.forward(&r)?;

        let dy = dy.clone().reshape(&[1, self.output_channels(), h, w])?;
        let pg = conv2d_backward(&hid, &self.predict, &dy)?;
        grads.predict.weight.accumulate(&pg.dweight)?;
        grads.predict.bias.accumulate(&pg.dbias)?;
        let dr = self.hidden.backward(&r, &pg.dx, &mut grads.hidden)?;

        let mut df = recover_backward(last, &dr.reshape(&[c, h, w])?)?;
        for (i, (b, gb)) in self
            .blocks
            .iter()
            .zip(grads.blocks.iter_mut())
            .enumerate()
            .rev()
        {
            df = dynamic_block_backward(&inputs[i], b, &df, gb)?;
        }
        concat_levels_backward(&df)
    }
}

impl ConvLayers for TdaHead {
    fn conv_layers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvParams)>) {
        self.blocks.conv_layers(&join(prefix, "blocks"), out);
        self.hidden.conv_layers(&join(prefix, "hidden"), out);
        self.predict.conv_layers(&join(prefix, "predict"), out);
    }
}

impl Parameters for TdaHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.blocks.visit(&join(prefix, "blocks"), f);
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.predict.visit(&join(prefix, "predict"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.blocks.visit_mut(&join(prefix, "blocks"), f);
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.predict.visit_mut(&join(prefix, "predict"), f);
    }
}
