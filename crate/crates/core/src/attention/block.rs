use rand::Rng;

use super::scale::{scale_attention, scale_attention_backward, ScaleAttnParams};
use super::spatial::{spatial_attention, spatial_attention_backward, SpatialAttnParams};
use super::task::{task_attention, task_attention_backward, DyReluParams};
use super::StackedFeature;
use crate::error::Result;
use crate::layers::{join, ConvLayers, Parameters};
use crate::ops::ConvParams;
use crate::tensor::Tensor;

/// Scale, spatial and task attention applied in sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicBlockParams {
    pub scale: ScaleAttnParams,
    pub spatial: SpatialAttnParams,
    pub task: DyReluParams,
}

impl DynamicBlockParams {
    pub fn init(
        channels: usize,
        levels: usize,
        task_reduction: usize,
        separable: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            scale: ScaleAttnParams::init(levels, rng),
            spatial: SpatialAttnParams::init(channels, separable, rng),
            task: DyReluParams::init(channels, task_reduction, rng),
        }
    }
}

impl ConvLayers for DynamicBlockParams {
    fn conv_layers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvParams)>) {
        self.spatial.conv_layers(&join(prefix, "spatial"), out);
    }
}

impl Parameters for DynamicBlockParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.scale.visit(&join(prefix, "scale"), f);
        self.spatial.visit(&join(prefix, "spatial"), f);
        self.task.visit(&join(prefix, "task"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.scale.visit_mut(&join(prefix, "scale"), f);
        self.spatial.visit_mut(&join(prefix, "spatial"), f);
        self.task.visit_mut(&join(prefix, "task"), f);
    }
}

pub fn dynamic_block(f: &StackedFeature, p: &DynamicBlockParams) -> Result<StackedFeature> {
    let a = scale_attention(f, &p.scale)?;
    let b = spatial_attention(&a, &p.spatial)?;
    task_attention(&b, &p.task)
}

pub fn dynamic_block_backward(
    f: &StackedFeature,
    p: &DynamicBlockParams,
    dy: &StackedFeature,
    grads: &mut DynamicBlockParams,
) -> Result<StackedFeature> {
    let a = scale_attention(f, &p.scale)?;
    let b = spatial_attention(&a, &p.spatial)?;
    let db = task_attention_backward(&b, &p.task, dy, &mut grads.task)?;
    let da = spatial_attention_backward(&a, &p.spatial, &db, &mut grads.spatial)?;
    scale_attention_backward(f, &p.scale, &da, &mut grads.scale)
}
