//! Tail-averaged, mini-batched, multipass SGD for least squares.
//!
//! * [`spectral`]: GD and tail-averaged filters, residuals and their sup bounds.
//! * [`model`]: power-law spectra, source conditions, synthetic data, moments, risk.
//! * [`descent`]: population GD, batch GD, mini-batch SGD and the recursion probe.
//! * [`theory`]: bound terms, parameter schedules, saturation curves, slope fits.
//! * [`harness`]: the experiment sweeps behind the `tailsgd` binary.

// Range checks are written as `!(x > 0.0)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod descent;
pub mod error;
pub mod harness;
pub mod model;
pub mod rng;
pub mod spectral;
pub mod theory;

pub use error::{Error, Result};
