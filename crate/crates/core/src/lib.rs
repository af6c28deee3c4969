//! UV-space Gaussian avatars animated by linear blend skinning and per-Gaussian
//! correctives, with linear distillation of the corrective decoder, corrective sharing
//! through a lookup table, integer-quantized decoding, and a software splat renderer.

pub mod bench;
pub mod decoder;
pub mod distill;
pub mod error;
pub mod eval;
pub mod io;
pub mod math;
pub mod metrics;
pub mod quant;
pub mod raster;
pub mod sharing;
pub mod skinning;
pub mod splat;

pub use error::{Error, Result};
