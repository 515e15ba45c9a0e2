//! Control toolkit for direct AC/AC modular multilevel converters.
//!
//! The crate builds discrete-time average models of a three-phase MMC,
//! computes steady-state current references from power requirements,
//! synthesizes a constrained static feedback gain through linear matrix
//! inequalities, certifies converter stability over the insertion-index
//! polytope, and verifies the closed loop by simulating both the linear
//! and the bilinear average models.
//!
//! Module map:
//! - [`model`]: circuit parameters, waveform descriptors, model matrices.
//! - [`refgen`]: current references and the power-balance reference solve.
//! - [`conic`]: small dense semidefinite feasibility/optimization backend.
//! - [`synthesis`]: regulator equations, gain synthesis, verification.
//! - [`certify`]: vertex certification of the bilinear dynamics.
//! - [`sim`]: closed-loop simulation of both plant models.
//! - [`analysis`]: spectra, ripple metrics, level-set geometry, reports.
//! - [`bundle`]: plain-text matrix bundles and trace CSV files.

pub mod analysis;
pub mod bundle;
pub mod certify;
pub mod conic;
pub mod error;
pub mod model;
pub mod refgen;
pub mod sim;
pub mod synthesis;

pub use error::{Error, Result};
