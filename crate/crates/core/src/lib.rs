//! Effective-rank guided low-rank adaptation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensorio`]: on-disk matrix bundles and tabular reports.
//! - [`spectral`]: thin SVD with a deterministic sign convention and residual projections.
//! - [`eranks`]: entropy rank and stable rank of a singular spectrum.
//! - [`stm`]: rank budgeting, task-aware direction selection, exact adapter
//!   initialization and the principal-direction preservation penalty.
//! - [`adapter`]: forward pass, merging and parameter accounting for adapted layers.
//! - [`depthloss`]: photometric, smoothness and depth supervision losses.
//! - [`harness`]: synthetic models, proxy fine-tuning and gradient checking.
//! - [`cli`]: the `stm` command-line front end.

pub mod adapter;
pub mod cli;
pub mod depthloss;
pub mod eranks;
pub mod error;
pub mod harness;
pub mod spectral;
pub mod stm;
pub mod tensorio;

pub use error::{Error, Result};

/// Dense real matrix used for weights, residuals and adapter factors.
///
/// All computation happens in `f64`.
pub type Matrix = nalgebra::DMatrix<f64>;
