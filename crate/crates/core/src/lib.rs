//! Optimal subsampling for generalized linear models with canonical links.
//!
//! The crate computes A- and L-optimal subsampling distributions, runs the
//! two-step adaptive estimator (uniform pilot, optimal second stage,
//! inverse-probability weighted MLE), estimates its variance, and provides a
//! Monte-Carlo harness for the standard simulation designs.

pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod expfam;
pub mod experiments;
pub mod linalg;
pub mod sampling;
pub mod solver;
pub mod stats;
pub mod twostep;

pub use error::{OsmacError, Result};
pub use expfam::Family;
pub use sampling::{SamplingMethod, SamplingWeights, Subsample};
pub use solver::{FitResult, FullData, GlmObservations, WeightedSample};
pub use twostep::{SecondStage, TwoStepConfig, TwoStepEstimate};
