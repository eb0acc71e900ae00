//! Zero-direction probing: drift detection from the null spaces of layer
//! activations.
//!
//! The crate is organised bottom-up:
//!
//! * [`nullspace`] extracts null bases, projectors and principal angles.
//! * [`probes`] computes the leak functionals (NVL, SNL, FNC) and the BINA
//!   adversarial search.
//! * [`thresholds`] turns Gaussian tail bounds into calibration-free alarm
//!   levels and validates their coverage by Monte Carlo.
//! * [`certificates`] checks the variance-leak, rank-leak, projector-trace and
//!   subspace-overlap inequalities on concrete inputs.
//! * [`online`] runs the streaming null-space tracker and the null-aligned
//!   low-rank optimizer, and measures regret.
//! * [`fisher`] covers the categorical Fisher information and second-order KL
//!   checks.
//! * [`synth`] generates every synthetic fixture deterministically.
//! * [`cli`] is the command-line front end.

pub mod certificates;
pub mod cli;
pub mod error;
pub mod fisher;
pub mod linalg;
pub mod nullspace;
pub mod online;
pub mod probes;
pub mod synth;
pub mod thresholds;

pub use error::{Result, ZdpError};
pub use nullspace::{ActivationMatrix, CutoffPolicy, NullBasis, Projector, Side};

/// Version string embedded in every report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
