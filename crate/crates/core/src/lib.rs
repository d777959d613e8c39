//! Cascaded patch-wise 3D convolutional network pipeline for white-matter
//! lesion segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`volume`], [`mvol`] and [`patch`]: scalar volumes, the MVOL file
//!   format, intensity normalization and 3D patch extraction.
//! - [`engine`]: a small deterministic neural-network engine with the layer
//!   kinds the 7-layer architecture needs, hand-written backward passes,
//!   ADADELTA and Glorot initialization.
//! - [`cascade`]: candidate filtering, class-balanced sampling, augmentation,
//!   the early-stopping training loop and the two-stage cascade trainer.
//! - [`inference`]: whole-volume two-pass scoring, thresholding, region
//!   filtering and test-parameter optimization.
//! - [`metrics`]: VD, TPR, FPR, DSC, PPV, region matching and Pearson r.
//! - [`phantom`]: deterministic synthetic cases for desk-scale runs.
//! - [`config`], [`dataset`] and [`cli`]: the plain-text run configuration,
//!   case directories and the `cascade-seg` command-line front end.

pub mod cascade;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod mvol;
pub mod patch;
pub mod phantom;
pub mod seed;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{BinaryMask, Coord, Dims, MultiChannelCase, Volume};
