//! Triple-awareness YOLO detection stack on a small dense tensor library.

pub mod attention;
pub mod augment;
pub mod checks;
pub mod config;
pub mod coord;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod model;
pub mod neck;
pub mod ops;
pub mod postproc;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
