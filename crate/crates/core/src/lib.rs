//! Evidence fusion, confidence calibration and risk-controlled abstention.
//!
//! The crate turns heterogeneous uncertainty signals produced upstream of an
//! LLM (token log-probabilities, sampled answers, retrieval entailment scores,
//! verifier flags) into a calibrated probability of correctness, then decides
//! whether to answer or abstain under a user-specified error budget.
//!
//! Module map:
//!
//! - [`evidence`]: raw signal records and the fused feature vector.
//! - [`targets`]: correctness supervision (exact, executed, graded).
//! - [`head`], [`isotonic`], [`metrics`]: the calibration head and its metrics.
//! - [`risk`]: selective risk, validation and conformal thresholds, splits.
//! - [`pipeline`], [`artifact`]: end-to-end training and inference.
//! - [`eval`], [`synthetic`], [`simulate`]: evaluation harness and synthetic
//!   ground truth for checking the guarantees.
//! - [`config`]: the run configuration shared by the CLI.

pub mod artifact;
pub mod config;
pub mod error;
pub mod eval;
pub mod evidence;
pub mod head;
pub mod isotonic;
pub mod metrics;
pub mod pipeline;
pub mod risk;
pub mod simulate;
pub mod synthetic;
pub mod targets;

mod hashing;

pub use error::{Error, Result};
