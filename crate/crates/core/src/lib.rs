//! Black-box variational inference with low-rank-plus-diagonal Gaussians.
//!
//! Each iteration of batch-match-patch draws a batch from the current
//! Gaussian, evaluates target scores, solves the score-matching proximal step
//! in closed form with the result kept implicit, projects it back onto
//! `ΛΛᵀ + Ψ` with EM, and moves the mean. Costs are linear in the dimension.
//!
//! A reparameterization-gradient baseline ([`advi`]) and a full-covariance
//! reference step ([`bam::dense_bam_step`]) are included for comparison.

pub mod advi;
pub mod bam;
pub mod driver;
pub mod error;
mod linalg;
pub mod lowrank;
pub mod patch;
pub mod targets;
pub mod trace;

pub use error::{Error, Result};
pub use lowrank::{gauss_kl, GaussianLrd, LowRankDiag};
pub use targets::ScoreTarget;
