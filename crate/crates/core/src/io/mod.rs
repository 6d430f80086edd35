//! Weight files and portable pixmap/graymap images.

mod pnm;
mod weights;

pub use pnm::{feature_map_to_pgm, read_ppm, write_pgm, write_ppm};
pub use weights::{checksum, decode_weights, encode_weights, load_weights, save_weights, MAGIC};
