//! Joint two-disease image grading with cross-disease attention.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense tensors, a reverse-mode tape and the
//!   differentiable primitives the network needs.
//! - [`gradcheck`]: central-difference verification of any tape program.
//! - [`attention`]: the per-disease channel/spatial attention block and the
//!   cross-disease gating block.
//! - [`model`]: backbone, attention stack, four classification heads and the
//!   joint loss.
//! - [`train`]: Adam, cosine learning-rate decay, augmentation and the epoch
//!   loop with checkpointing.
//! - [`data`]: manifests, netpbm images, the synthetic correlated dataset,
//!   k-fold splits and grading metrics.

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
