//! Glandular-cell detection with eight-neighbor polar self-attention.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`tensor`]: dense feature maps, 1x1 convolutions, softmax, binary IO.
//! - [`polar`]: the polar attention score matrix, weighted features, pooled
//!   polar scores, supervision loss, and analytic gradients.
//! - [`detect`]: boxes, IoU, NMS, confidence fusion, grid mapping.
//! - [`synth`]: deterministic synthetic tiles, crops, datasets, and mosaics.
//! - [`detector`]: the minimal trainable detector hosting the polar module.
//! - [`eval`]: matching, average precision, top-N accuracy, ablation sweeps.
//! - [`wsi`]: whole-slide tiling, parallel inference, merging, benchmarks.
//! - [`oracle`]: brute-force references used by tests and `oracle-check`.

pub mod detect;
pub mod detector;
pub mod error;
pub mod eval;
pub mod oracle;
pub mod polar;
pub mod synth;
pub mod tensor;
pub mod wsi;

pub use error::{Error, Result};
