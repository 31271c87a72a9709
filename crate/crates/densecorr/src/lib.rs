//! Dense 2D-3D surface correspondence estimation for articulated figures.
//!
//! See the guide under `book/` for a chapter-level tour. In brief:
//!
//! - [`backbone`]: a small residual feature pyramid over RGB input.
//! - [`rearrange`]: lossless parity fold/unfold between resolution and
//!   channels, the primitive behind cross-resolution refinement.
//! - [`decoder`]: pyramid refinement and unification into a single
//!   high-resolution map, plus instance-mask gating.
//! - [`transfer`]: classifier-weight transfer from 2D parsing tasks to the
//!   surface task through a label-relation graph.
//! - [`head`]: per-region correspondence head emitting body mask, part mask,
//!   keypoint, surface, and UV-chart predictions, with their losses.
//! - [`synth`]: seeded synthetic scene generator with exact dense truth.
//! - [`metrics`]: geodesic point similarity, keypoint similarity, and
//!   threshold-swept average precision/recall.
//! - [`imbalance`]: reweighting/resampling/hard-example baselines for the
//!   long-tailed surface distribution.
//! - [`model`], [`train`], [`eval`]: the assembled pipelines.

pub use dctensor as tensor;

pub mod backbone;
pub mod body;
pub mod config;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod fcn;
pub mod head;
pub mod imbalance;
pub mod init;
pub mod metrics;
pub mod model;
pub mod rearrange;
pub mod synth;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
