//! Differentiable kernels. Each forward op has a matching `*_backward`
//! that returns gradients for an upstream gradient of the output.

pub mod activation;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod pool;
pub mod sample;
pub mod shape;

pub use activation::{activation, activation_backward, hard_sigmoid, sigmoid, Activation, LEAKY};
pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvParams};
pub use linear::{fully_connected, fully_connected_backward};
pub use norm::{batchnorm_backward, batchnorm_inference, BatchNorm, BN_EPS};
pub use pool::{
    directional_pool, directional_pool_backward, global_avg_pool, global_avg_pool_backward,
    max_pool2d, max_pool2d_backward,
};
pub use sample::{bilinear_sample, bilinear_sample_backward, BilinearTaps};
pub use shape::{concat, split, upsample_nearest, upsample_nearest_backward};
