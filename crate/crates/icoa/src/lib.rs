//! Cooperative ensemble regression over attribute-distributed data.
//!
//! Each of D agents observes its own subset of covariate columns for all N
//! instances plus the shared outcome, fits a local learner, and the ensemble
//! predicts with a weighted sum of the agents' predictions. Agents exchange
//! only residual vectors. The library provides:
//!
//! - synthetic benchmark generators ([`datagen`]),
//! - per-agent base learners: regression trees and polynomial least squares
//!   ([`learner`]),
//! - the covariance math: optimal combination weights, the ensemble training
//!   objective and its gradient, minimax weighting under covariance
//!   uncertainty, and the associated error bound ([`ensemble`]),
//! - the iterative covariance optimization trainer with its minimax-protected
//!   variant, plus residual-refitting and averaging baselines with exact
//!   communication accounting ([`trainer`]),
//! - replicated experiment grids with deterministic per-cell seeding
//!   ([`grid`]).
//!
//! Everything is deterministic given the configured seeds; grid execution is
//! data-parallel when the `parallel` feature (default) is enabled and falls
//! back to sequential execution otherwise.

pub mod datagen;
pub mod ensemble;
pub mod error;
pub mod exec;
pub mod grid;
pub mod learner;
pub mod seed;
pub mod trainer;

pub use error::{IcoaError, Result};
