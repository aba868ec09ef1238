//! Video vision encoder with stacked temporal attention.
//!
//! A from-scratch, f64, CPU implementation: dense tensors with reverse-mode
//! autodiff, rotary position encodings (1-D over frames, 2-D over the patch
//! grid), a divided space-time transformer encoder, a two-stage adaptation
//! regime (zero-initialized temporal branches, then low-rank adapters), and a
//! deterministic generator of temporally mirrored synthetic video datasets.
//!
//! Batch evaluation fans out over inputs via rayon when the `parallel`
//! feature (default) is on; results are reduced in fixed order, so outputs
//! are identical either way.

pub mod adapt;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod heatmap;
pub mod lora;
pub mod parallel;
pub mod params;
pub mod rng;
pub mod rope;
pub mod synthvideo;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
