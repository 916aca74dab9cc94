//! Guided super-resolution of quantitative MRI parameter maps.
//!
//! The crate is organised around the processing chain of a synthetic
//! experiment:
//!
//! * [`raster`]: grids, scalar maps, masks and the `.qmap`/`.qhdr` file pair.
//! * [`models`]: closed-form MR signal equations and their Jacobians.
//! * [`degrade`]: k-space truncation with complex noise, and the noiseless
//!   low-pass projection used inside the objective.
//! * [`fit`]: voxelwise least-squares estimation of PD/T1/T2.
//! * [`srmap`]: the data-consistency + guide objective and its box-constrained
//!   solvers.
//! * [`metrics`]: SSIM, HFEN and rank-sum model selection.
//! * [`phantom`]: an ellipse phantom and the full synthetic data pipeline.
//! * [`cli`]: configuration file parsing and the subcommand implementations.

pub mod cli;
pub mod degrade;
mod error;
pub mod fit;
pub mod metrics;
pub mod models;
pub mod phantom;
pub mod raster;
pub mod srmap;

pub use error::{Error, Result};
