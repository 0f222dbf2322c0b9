//! Adaptive exponential stabilization of strict-feedback systems with
//! time-varying parameters.
//!
//! * [`model`]: plants `ẋ_i = φ_iᵀθ(t) + x_{i+1}`, `ẋ_n = φ_nᵀθ(t) + b(t)u`.
//! * [`backstepping`]: the general recursive design with exponential
//!   scaling, for known and unknown control direction.
//! * [`scalar`]: the three first-order designs.
//! * [`nussbaum`]: enhanced Nussbaum functions.
//! * [`sim`], [`analysis`], [`scenarios`]: closed-loop runs and their checks.
//! * [`acceptance`]: the end-to-end verification suite.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod acceptance;
pub mod analysis;
pub mod backstepping;
pub mod error;
pub mod jet;
pub mod model;
pub mod nussbaum;
pub mod quadrature;
pub mod scalar;
pub mod scenarios;
pub mod sim;

pub use error::{Error, Result};
