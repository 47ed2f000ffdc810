//! Training objectives and loops for every supported estimator.
//!
//! Losses are recorded on a [`Tape`](crate::diff::Tape) so the same code path
//! serves training, frozen-parameter evaluation and gradient checks.

mod loss;
mod train;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::{Layout, Task};
use crate::{Error, Result};

pub use loss::{
    estimator_loss, inverse_weight_variance, inverse_weights, loss_esmm, loss_heuristic_dr, loss_multi_dr,
    loss_multi_ipw, loss_multi_ipw_click_batch, loss_naive, loss_naive_imputation, loss_naive_ipw, loss_oversampling,
    resolve_tau, LossContext, LossParts, Phase,
};
pub use train::{train, train_net, Trained};

/// Default L2 coefficient on imputation tower weights.
pub const DEFAULT_V: f64 = 1e-4;
pub const DEFAULT_ETA: f64 = 0.001;
pub const DEFAULT_K: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Base,
    Oversampling,
    Esmm,
    EsmmNs,
    NaiveImputation,
    NaiveIpw,
    HeuristicDr,
    JointLearningDr,
    MultiIpw,
    MultiDr,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 10] = [
        EstimatorKind::Base,
        EstimatorKind::Oversampling,
        EstimatorKind::Esmm,
        EstimatorKind::EsmmNs,
        EstimatorKind::NaiveImputation,
        EstimatorKind::NaiveIpw,
        EstimatorKind::HeuristicDr,
        EstimatorKind::JointLearningDr,
        EstimatorKind::MultiIpw,
        EstimatorKind::MultiDr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Base => "base",
            EstimatorKind::Oversampling => "oversampling",
            EstimatorKind::Esmm => "esmm",
            EstimatorKind::EsmmNs => "esmm_ns",
            EstimatorKind::NaiveImputation => "naive_imputation",
            EstimatorKind::NaiveIpw => "naive_ipw",
            EstimatorKind::HeuristicDr => "heuristic_dr",
            EstimatorKind::JointLearningDr => "joint_learning_dr",
            EstimatorKind::MultiIpw => "multi_ipw",
            EstimatorKind::MultiDr => "multi_dr",
        }
    }

    /// Towers and embedding sharing used by this estimator.
    ///
    /// Single-task baselines carry an unshared CTR tower so that CTCVR scores
    /// exist for every estimator; it never touches the CVR parameters.
    pub fn layout(self) -> Layout {
        use EstimatorKind::*;
        match self {
            Base | Oversampling | NaiveImputation | HeuristicDr | EsmmNs => Layout::separate(&[Task::Ctr, Task::Cvr]),
            Esmm | MultiIpw => Layout::shared(&[Task::Ctr, Task::Cvr]),
            MultiDr => Layout::shared(&Task::ALL),
            JointLearningDr => Layout::separate(&Task::ALL),
            NaiveIpw => Layout { tasks: vec![Task::Ctr, Task::Cvr], shared_embedding: false, logistic_ctr: true },
        }
    }

    /// Hyperparameters the estimator reads.
    pub fn uses(self) -> &'static [&'static str] {
        use EstimatorKind::*;
        match self {
            Base | Esmm | EsmmNs | NaiveImputation => &[],
            Oversampling => &["k"],
            HeuristicDr => &["eta"],
            NaiveIpw | MultiIpw => &["tau", "tau_pct"],
            JointLearningDr => &["tau", "tau_pct", "v"],
            MultiDr => &["tau", "tau_pct", "lambda", "v", "reweight_unclicked"],
        }
    }

    /// Training phases per epoch, in order.
    pub fn phases(self) -> &'static [Phase] {
        match self {
            EstimatorKind::NaiveIpw => &[Phase::Propensity, Phase::Prediction],
            EstimatorKind::JointLearningDr => &[Phase::Prediction, Phase::Imputation],
            _ => &[Phase::Joint],
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimator `{s}`")))
    }
}

/// Estimator hyperparameters; unset fields fall back to defaults where the
/// estimator needs them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// Propensity floor: `p̂ ← max(p̂, tau)` inside inverse weights.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// Floor as a fraction of the way from the batch minimum to the batch mean of `p̂`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_pct: Option<f64>,
    /// Unclicked records in the imputation term, as a multiple of the batch's clicks.
    /// Unset means every unclicked record of the batch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Soft label given to unclicked records.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    /// Weight of converted records.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    /// L2 coefficient on imputation tower weights.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v: Option<f64>,
    /// Scale sampled unclicked imputation terms back up to the full batch.
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub reweight_unclicked: bool,
}

impl HyperParams {
    fn set_keys(&self) -> Vec<&'static str> {
        let mut keys = Vec::new();
        let opts = [
            ("tau", self.tau),
            ("tau_pct", self.tau_pct),
            ("lambda", self.lambda),
            ("eta", self.eta),
            ("k", self.k),
            ("v", self.v),
        ];
        keys.extend(opts.iter().filter(|(_, v)| v.is_some()).map(|(k, _)| *k));
        if self.reweight_unclicked {
            keys.push("reweight_unclicked");
        }
        keys
    }

    /// Checks ranges and that only hyperparameters read by `kind` are set.
    pub fn validate(&self, kind: EstimatorKind) -> Result<()> {
        let stray: Vec<String> = self
            .set_keys()
            .into_iter()
            .filter(|k| !kind.uses().contains(k))
            .map(|k| format!("hyper.{k} (unused by {kind})"))
            .collect();
        if !stray.is_empty() {
            return Err(Error::UnknownKeys(stray));
        }
        let check = |name: &str, v: Option<f64>, ok: &dyn Fn(f64) -> bool, range: &str| match v {
            Some(x) if !(x.is_finite() && ok(x)) => Err(Error::Config(format!("{name} = {x} outside {range}"))),
            _ => Ok(()),
        };
        check("tau", self.tau, &|x| x > 0.0 && x <= 1.0, "(0, 1]")?;
        check("tau_pct", self.tau_pct, &|x| x >= 0.0, "[0, inf)")?;
        check("lambda", self.lambda, &|x| x >= 0.0, "[0, inf)")?;
        check("eta", self.eta, &|x| (0.0..=1.0).contains(&x), "[0, 1]")?;
        check("k", self.k, &|x| x >= 1.0, "[1, inf)")?;
        check("v", self.v, &|x| x >= 0.0, "[0, inf)")?;
        if self.tau.is_some() && self.tau_pct.is_some() {
            return Err(Error::Config("set at most one of tau and tau_pct".into()));
        }
        Ok(())
    }

    pub fn eta_or_default(&self) -> f64 {
        self.eta.unwrap_or(DEFAULT_ETA)
    }

    pub fn k_or_default(&self) -> f64 {
        self.k.unwrap_or(DEFAULT_K)
    }

    pub fn v_or_default(&self) -> f64 {
        self.v.unwrap_or(DEFAULT_V)
    }
}

/// Which estimator to train and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    #[serde(default)]
    pub hyper: HyperParams,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Treat `p̂` inside inverse weights as a constant.
    #[serde(default = "default_true")]
    pub block_propensity_gradient: bool,
}

fn default_true() -> bool {
    true
}

impl EstimatorSpec {
    pub fn new(kind: EstimatorKind, epochs: usize, batch_size: usize, learning_rate: f64, seed: u64) -> Self {
        EstimatorSpec {
            kind,
            hyper: HyperParams::default(),
            epochs,
            batch_size,
            learning_rate,
            seed,
            block_propensity_gradient: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate(self.kind)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate = {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

/// Mean loss components over one epoch (or one phase pair for alternating
/// estimators).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_ctr: f64,
    pub loss_cvr: f64,
    pub loss_imp: f64,
}

pub const TRACE_HEADER: &str = "epoch,loss_total,loss_ctr,loss_cvr,loss_imp";

pub fn write_trace_csv(path: &Path, trace: &[EpochLoss]) -> Result<()> {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for e in trace {
        out.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.loss_total, e.loss_ctr, e.loss_cvr, e.loss_imp));
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}
