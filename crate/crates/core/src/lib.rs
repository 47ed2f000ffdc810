//! Unbiased post-click conversion-rate estimation under missing-not-at-random
//! feedback.
//!
//! The crate bundles everything needed to train and audit conversion-rate
//! estimators that are trained in the click space but used over the whole
//! exposure space:
//!
//! - [`diff`]: dense `f64` tensors, a reverse-mode tape, Adam and a
//!   finite-difference gradient checker.
//! - [`data`]: a confounded synthetic generator with counterfactual ground
//!   truth, CSV ingestion, splitting and batching.
//! - [`model`]: the shared-embedding multi-task network (CTR, CVR and
//!   imputation towers).
//! - [`estimators`]: the training objectives and their loops, from the naive
//!   click-space model to the multi-task IPW and doubly robust estimators.
//! - [`analysis`]: exact and Monte Carlo expectations of estimator values over
//!   the click distribution, used to verify unbiasedness claims numerically.
//! - [`metrics`]: AUC, group AUC and the evaluation report.
//! - [`experiment`]: configuration and orchestration used by the CLI.

pub mod analysis;
pub mod data;
pub mod diff;
mod error;
pub mod estimators;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod seed;

pub use error::{Error, Result};

pub use analysis::{BiasReport, FrozenInstance};
pub use data::{ExposureDataset, GroundTruth, InteractionRecord, SyntheticConfig, Vocab};
pub use diff::{AdamState, ParameterStore, Tape, Tensor, Var};
pub use estimators::{EstimatorKind, EstimatorSpec, HyperParams};
pub use metrics::MetricReport;
pub use model::{Architecture, MultiTaskNet, Task};
