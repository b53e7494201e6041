//! Multimodal fusion for facial action unit detection and expression
//! recognition, small enough to train and verify on one CPU.
//!
//! The crate bundles a reverse-mode autodiff tape, GRU encoders with a
//! transformer-decoder fusion block, imbalance-aware resampling and remix
//! augmentation, temporal prediction smoothing, and a k-fold training
//! harness driven by a synthetic multimodal dataset generator.

mod binio;

pub mod checkpoint;
pub mod config;
pub mod datapipe;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod labels;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod postprocess;
pub mod tensor;
pub mod train;

pub use error::{CoreError, Result};
pub use params::ParamSet;
pub use tensor::{Graph, NodeId, Real};
