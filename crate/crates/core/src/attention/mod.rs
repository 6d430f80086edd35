//! Triple-awareness detection head: scale, spatial and task attention over a
//! self-stacked feature level, followed by the prediction convolutions.

pub mod block;
pub mod head;
pub mod scale;
pub mod spatial;
pub mod stacked;
pub mod task;

pub use block::{dynamic_block, dynamic_block_backward, DynamicBlockParams};
pub use head::TdaHead;
pub use scale::{
    scale_attention, scale_attention_backward, scale_gates, ScaleAttnParams, ScaleGates,
};
pub use spatial::{
    sample_positions, spatial_attention, spatial_attention_backward, stencil_3x3,
    SpatialAttnParams, DEFAULT_TAPS,
};
pub use stacked::{
    concat_levels, concat_levels_backward, recover, recover_backward, StackedFeature,
};
pub use task::{
    apply_dyrelu, dyrelu_coefficients, task_attention, task_attention_backward, DyReluParams,
    DEFAULT_COEFFS, DEFAULT_LAMBDA_A, DEFAULT_LAMBDA_B, DEFAULT_REDUCTION,
};
