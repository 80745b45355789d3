//! Desk-scale one-stage instance segmentation with dynamically aggregated
//! local mask representations.
//!
//! The model divides an image into a classification grid and a (possibly
//! coarser) mask grid. Each mask-grid cell carries a raw H x W mask
//! representation; final per-cell masks come from a small convolution network
//! whose weights are predicted per classification cell and applied to the
//! stack of neighboring representations plus a compact context feature.
//! The crate also ships the supporting cast: a synthetic shape dataset, NMS
//! and mask-voting post-processing, a COCO-style AP evaluator, an analytic
//! FLOP counter for the mask head, and a small trainer with verified
//! gradients.

pub mod aggregation;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod flops;
pub mod geometry;
pub mod gradcheck;
pub mod infer;
pub mod loss;
pub mod mask;
pub mod model;
pub mod par;
pub mod postprocess;
pub mod scene;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod voting;

pub use error::{Error, Result};
pub use tensor::{ConvSpec, GridTensor};
