//! Weighted conformal certification of candidate batches under covariate
//! shift.
//!
//! Given a labeled calibration pool drawn from one distribution and a ranked
//! batch of candidates from another, the crate computes p-values for the
//! null hypothesis that a batch contains no hit, certifies batches, and
//! chooses the smallest certified prefix of a ranking.

pub mod baselines;
pub mod budget;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod kde;
pub mod nested;
pub mod pvalue;
pub mod rng;
pub mod scores;
pub mod sim;
pub mod weights;

pub use data::{CandidateBatch, FeatureVector, HiddenLabels, LabeledPool};
pub use error::{Error, Result};
pub use pvalue::{CertificationResult, PValueEstimate, PooledSample, Sampler};
pub use rng::RngStream;
pub use scores::{ScoreKind, ScoreStatistic};
pub use weights::WeightFn;
