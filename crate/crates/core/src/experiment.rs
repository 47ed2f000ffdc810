//! JSON experiment configs and the orchestration behind every CLI command.
//!
//! One config plus one seed fixes every number written under the output
//! directory. Runs inside `compare` and `sweep` are independent and execute
//! on a rayon pool; their files are named by estimator, parameter value and
//! seed, and tables are assembled in job order, so scheduling never changes
//! the bytes on disk.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::{bias_report, BiasReport, Formula, FrozenInstance};
use crate::data::{
    generate_synthetic, ingest_csv, read_ground_truth_csv, split_train_test, write_dataset_csv, write_ground_truth_csv,
    CsvSchema, ExposureDataset, GroundTruth, Split, SyntheticConfig,
};
use crate::estimators::{train, write_trace_csv, EstimatorKind, EstimatorSpec, HyperParams};
use crate::metrics::{evaluate, MetricReport};
use crate::model::{Architecture, MultiTaskNet};
use crate::{seed, Error, Result};

pub const RUNS_HEADER: &str = "estimator,seed,cvr_auc_do,cvr_auc_clicked,ctcvr_auc,ctcvr_gauc";
pub const SWEEP_HEADER: &str = "estimator,param,value,seed,cvr_auc_do,cvr_auc_clicked,ctcvr_auc,ctcvr_gauc";
pub const BIAS_HEADER: &str =
    "estimator,formula,prediction_inaccuracy,expected_value,bias,method,mc_samples,standard_error";
pub const METRICS: [&str; 4] = ["cvr_auc_do", "cvr_auc_clicked", "ctcvr_auc", "ctcvr_gauc"];

/// Parameters `sweep` can vary.
pub const SWEEP_PARAMS: [&str; 6] = ["tau", "tau_pct", "lambda", "eta", "k", "v"];

/// Where the exposure data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Csv(CsvSource),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub dataset: PathBuf,
    #[serde(default)]
    pub ground_truth: Option<PathBuf>,
    #[serde(default)]
    pub schema: CsvSchema,
}

/// A complete experiment description. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Regenerate synthetic data from each run's seed instead of `data.synthetic.seed`.
    pub resample_data: bool,
    pub test_fraction: f64,
    pub architecture: Architecture,
    /// Estimator for `train`, `sweep` and `bias-audit`.
    pub estimator: EstimatorKind,
    /// Estimators for `compare`; empty means `[estimator]`.
    pub estimators: Vec<EstimatorKind>,
    /// Hyperparameters per estimator name.
    pub hyper: BTreeMap<String, HyperParams>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub block_propensity_gradient: bool,
    pub seed: u64,
    /// Runs per configuration; run `i` uses seed `seed + i`.
    pub repeats: usize,
    pub gauc: bool,
    /// Monte Carlo draws for bias audits that cannot be computed exactly.
    pub bias_draws: usize,
    pub sweep: Option<SweepConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub param: String,
    pub grid: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::default(),
            resample_data: false,
            test_fraction: 0.2,
            architecture: Architecture::default(),
            estimator: EstimatorKind::MultiDr,
            estimators: Vec::new(),
            hyper: BTreeMap::new(),
            epochs: 5,
            batch_size: 1024,
            learning_rate: 0.001,
            block_propensity_gradient: true,
            seed: 0,
            repeats: 1,
            gauc: true,
            bias_draws: 10_000,
            sweep: None,
        }
    }
}

fn keys_of<T: Serialize>(value: &T) -> Vec<String> {
    match serde_json::to_value(value) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

fn unknown_in(obj: &Value, allowed: &[String], prefix: &str, out: &mut Vec<String>) {
    if let Value::Object(m) = obj {
        for k in m.keys() {
            if !allowed.iter().any(|a| a == k) {
                out.push(format!("{prefix}{k}"));
            }
        }
    }
}

const HYPER_KEYS: [&str; 7] = ["tau", "tau_pct", "lambda", "eta", "k", "v", "reweight_unclicked"];

/// Every key in `raw` the config schema does not define, as dotted paths.
pub fn unknown_keys(raw: &Value) -> Vec<String> {
    let mut out = Vec::new();
    let Value::Object(top) = raw else { return out };
    let full = ExperimentConfig {
        sweep: Some(SweepConfig { param: String::new(), grid: Vec::new() }),
        ..ExperimentConfig::default()
    };
    unknown_in(raw, &keys_of(&full), "", &mut out);

    if let Some(data) = top.get("data") {
        unknown_in(data, &["synthetic".into(), "csv".into()], "data.", &mut out);
        if let Some(s) = data.get("synthetic") {
            unknown_in(s, &keys_of(&SyntheticConfig::default()), "data.synthetic.", &mut out);
        }
        if let Some(c) = data.get("csv") {
            let csv_keys = ["dataset", "ground_truth", "schema"].map(String::from);
            unknown_in(c, &csv_keys, "data.csv.", &mut out);
            if let Some(schema) = c.get("schema") {
                unknown_in(schema, &["vocab".into(), "violations".into()], "data.csv.schema.", &mut out);
                if let Some(v) = schema.get("vocab") {
                    let fields = ["user", "item", "comb"].map(String::from);
                    unknown_in(v, &fields, "data.csv.schema.vocab.", &mut out);
                }
            }
        }
    }
    if let Some(a) = top.get("architecture") {
        unknown_in(a, &keys_of(&Architecture::default()), "architecture.", &mut out);
    }
    if let Some(Value::Object(h)) = top.get("hyper") {
        for (name, params) in h {
            match name.parse::<EstimatorKind>() {
                Ok(kind) => {
                    let allowed: Vec<String> = HYPER_KEYS.iter().map(|s| s.to_string()).collect();
                    unknown_in(params, &allowed, &format!("hyper.{name}."), &mut out);
                    if let Value::Object(p) = params {
                        for k in p.keys() {
                            if HYPER_KEYS.contains(&k.as_str()) && !kind.uses().contains(&k.as_str()) {
                                out.push(format!("hyper.{name}.{k} (unused by {kind})"));
                            }
                        }
                    }
                }
                Err(_) => out.push(format!("hyper.{name}")),
            }
        }
    }
    if let Some(s) = top.get("sweep") {
        unknown_in(s, &["param".into(), "grid".into()], "sweep.", &mut out);
    }
    out
}

impl ExperimentConfig {
    /// Parses a config, reporting every unknown key at once.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("not valid JSON: {e}")))?;
        if !raw.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let unknown = unknown_keys(&raw);
        if !unknown.is_empty() {
            return Err(Error::UnknownKeys(unknown));
        }
        let cfg: ExperimentConfig = serde_json::from_value(raw).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test_fraction = {} outside (0, 1)", self.test_fraction)));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.bias_draws == 0 {
            return Err(Error::Config("bias_draws must be at least 1".into()));
        }
        self.architecture.validate()?;
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        let mut stray = Vec::new();
        for name in self.hyper.keys() {
            if name.parse::<EstimatorKind>().is_err() {
                stray.push(format!("hyper.{name}"));
            }
        }
        if !stray.is_empty() {
            return Err(Error::UnknownKeys(stray));
        }
        for kind in self.compare_list().into_iter().chain([self.estimator]) {
            self.spec(kind, self.seed).validate()?;
        }
        for (name, h) in &self.hyper {
            let kind: EstimatorKind = name.parse()?;
            h.validate(kind).map_err(|e| match e {
                Error::UnknownKeys(keys) => {
                    Error::UnknownKeys(keys.into_iter().map(|k| format!("{name}.{k}")).collect())
                }
                other => other,
            })?;
        }
        if let Some(s) = &self.sweep {
            check_sweep_param(self.estimator, &s.param)?;
        }
        Ok(())
    }

    pub fn compare_list(&self) -> Vec<EstimatorKind> {
        if self.estimators.is_empty() {
            vec![self.estimator]
        } else {
            self.estimators.clone()
        }
    }

    pub fn hyper_for(&self, kind: EstimatorKind) -> HyperParams {
        self.hyper.get(kind.name()).cloned().unwrap_or_default()
    }

    pub fn spec(&self, kind: EstimatorKind, seed: u64) -> EstimatorSpec {
        EstimatorSpec {
            kind,
            hyper: self.hyper_for(kind),
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
            block_propensity_gradient: self.block_propensity_gradient,
        }
    }

    /// Seeds of the configured repeats.
    pub fn run_seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }
}

fn check_sweep_param(kind: EstimatorKind, param: &str) -> Result<()> {
    if !SWEEP_PARAMS.contains(&param) {
        return Err(Error::Config(format!("cannot sweep `{param}`; expected one of {}", SWEEP_PARAMS.join(", "))));
    }
    if !kind.uses().contains(&param) {
        return Err(Error::Config(format!("{kind} does not read `{param}`")));
    }
    Ok(())
}

fn set_param(h: &mut HyperParams, param: &str, value: f64) {
    let slot = match param {
        "tau" => &mut h.tau,
        "tau_pct" => &mut h.tau_pct,
        "lambda" => &mut h.lambda,
        "eta" => &mut h.eta,
        "k" => &mut h.k,
        "v" => &mut h.v,
        _ => unreachable!("checked by check_sweep_param"),
    };
    *slot = Some(value);
    if param == "tau" {
        h.tau_pct = None;
    } else if param == "tau_pct" {
        h.tau = None;
    }
}

/// The full dataset with its ground truth, when known.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub dataset: ExposureDataset,
    pub ground_truth: Option<GroundTruth>,
}

/// Loads or generates the configured data. Synthetic data uses `data_seed`
/// in place of the configured generator seed when given.
pub fn load_data(cfg: &ExperimentConfig, data_seed: Option<u64>) -> Result<LoadedData> {
    match &cfg.data {
        DataSource::Synthetic(s) => {
            let mut s = s.clone();
            if let Some(seed) = data_seed {
                s.seed = seed;
            }
            let (dataset, gt) = generate_synthetic(&s)?;
            Ok(LoadedData { dataset, ground_truth: Some(gt) })
        }
        DataSource::Csv(c) => {
            let report = ingest_csv(&c.dataset, &c.schema)?;
            if report.dropped > 0 {
                log::warn!("dropped {} rows with a conversion but no click", report.dropped);
            }
            let ground_truth = match &c.ground_truth {
                Some(p) => {
                    let gt = read_ground_truth_csv(p)?;
                    if report.dropped > 0 {
                        return Err(Error::Input(
                            "ground truth cannot be aligned after dropping rows; use violations = reject".into(),
                        ));
                    }
                    gt.check_against(&report.dataset)?;
                    Some(gt)
                }
                None => None,
            };
            Ok(LoadedData { dataset: report.dataset, ground_truth })
        }
    }
}

/// Train and test splits for a run with seed `run_seed`.
pub fn prepare_splits(cfg: &ExperimentConfig, run_seed: u64) -> Result<(Split, Split)> {
    let data_seed = cfg.resample_data.then_some(run_seed);
    let data = load_data(cfg, data_seed)?;
    split_for(cfg, &data, data_seed)
}

fn split_for(cfg: &ExperimentConfig, data: &LoadedData, data_seed: Option<u64>) -> Result<(Split, Split)> {
    let split_seed = seed::derive_seed(data_seed.unwrap_or(cfg.seed), "split");
    split_train_test(&data.dataset, data.ground_truth.as_ref(), cfg.test_fraction, split_seed)
}

/// One trained and evaluated estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub estimator: EstimatorKind,
    pub hyperparams: HyperParams,
    pub seed: u64,
    pub metrics: MetricReport,
    pub trace_path: Option<PathBuf>,
    pub wall_time_s: f64,
}

fn run_name(kind: EstimatorKind, param: Option<(&str, f64)>, seed: u64) -> String {
    match param {
        Some((p, v)) => format!("{kind}_{p}={v}_seed{seed}"),
        None => format!("{kind}_seed{seed}"),
    }
}

/// Trains `spec` on `train`, evaluates on `test` and writes the loss trace
/// (and the checkpoint when `checkpoint` is set) under `out`.
fn run_one(
    cfg: &ExperimentConfig,
    spec: &EstimatorSpec,
    train_split: &Split,
    test_split: &Split,
    out: Option<(&Path, &str)>,
    checkpoint: bool,
) -> Result<(ExperimentResult, MultiTaskNet)> {
    let start = Instant::now();
    let trained = train(spec, &cfg.architecture, &train_split.dataset)?;
    let metrics = evaluate(&trained.net, &test_split.dataset, test_split.ground_truth.as_ref(), spec.seed, cfg.gauc)?;
    let mut trace_path = None;
    if let Some((dir, name)) = out {
        let path = dir.join(format!("{name}_trace.csv"));
        write_trace_csv(&path, &trained.trace)?;
        trace_path = Some(path);
        if checkpoint {
            let extra = serde_json::json!({ "estimator": spec.kind, "hyper": spec.hyper, "seed": spec.seed });
            trained.net.save(&dir.join(format!("{name}.ckpt")), extra)?;
        }
    }
    let result = ExperimentResult {
        estimator: spec.kind,
        hyperparams: spec.hyper.clone(),
        seed: spec.seed,
        metrics,
        trace_path,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok((result, trained.net))
}

fn ensure_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

/// Writes `dataset.csv` and `ground_truth.csv` for synthetic configs.
pub fn generate(cfg: &ExperimentConfig, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let DataSource::Synthetic(s) = &cfg.data else {
        return Err(Error::Config("generate needs a synthetic data source".into()));
    };
    ensure_dir(out)?;
    let (dataset, gt) = generate_synthetic(s)?;
    let (d, g) = (out.join("dataset.csv"), out.join("ground_truth.csv"));
    write_dataset_csv(&d, &dataset)?;
    write_ground_truth_csv(&g, &gt)?;
    std::fs::write(out.join("generator.json"), serde_json::to_string_pretty(s)? + "\n")?;
    Ok((d, g))
}

/// Trains `cfg.estimator` with `cfg.seed`; writes the checkpoint, trace and
/// test metrics.
pub fn train_command(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentResult> {
    ensure_dir(out)?;
    let (train_split, test_split) = prepare_splits(cfg, cfg.seed)?;
    let spec = cfg.spec(cfg.estimator, cfg.seed);
    let name = run_name(cfg.estimator, None, cfg.seed);
    let (result, _) = run_one(cfg, &spec, &train_split, &test_split, Some((out, &name)), true)?;
    result.metrics.write_json(&out.join(format!("{name}_metrics.json")))?;
    Ok(result)
}

/// Scores a saved checkpoint on a CSV dataset.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    dataset: &Path,
    ground_truth: Option<&Path>,
    seed: u64,
    with_gauc: bool,
) -> Result<MetricReport> {
    let (net, _) = MultiTaskNet::load(checkpoint)?;
    let schema = CsvSchema { vocab: Some(net.vocab()), ..Default::default() };
    let data = ingest_csv(dataset, &schema)?.dataset;
    let gt = ground_truth.map(read_ground_truth_csv).transpose()?;
    evaluate(&net, &data, gt.as_ref(), seed, with_gauc)
}

/// Bias reports of every estimator's objective at one frozen instance.
pub fn bias_audit_instance(cfg: &ExperimentConfig, inst: &FrozenInstance, draws: usize) -> Result<Vec<BiasReport>> {
    EstimatorKind::ALL
        .into_iter()
        .map(|kind| {
            let formula = Formula::for_estimator(kind, &cfg.hyper_for(kind), inst);
            let seed = seed::derive_seed(cfg.seed, kind.name());
            let mut report = bias_report(&formula, inst, draws, seed)?;
            report.estimator = kind.name().to_string();
            Ok(report)
        })
        .collect()
}

/// Freezes `cfg.estimator`'s predictions on the test split and audits every
/// estimator's objective against them.
pub fn bias_audit(cfg: &ExperimentConfig, draws: usize) -> Result<(FrozenInstance, Vec<BiasReport>)> {
    let (train_split, test_split) = prepare_splits(cfg, cfg.seed)?;
    if test_split.ground_truth.is_none() {
        return Err(Error::MissingGroundTruth("bias audit needs true propensities and labels".into()));
    }
    let spec = cfg.spec(cfg.estimator, cfg.seed);
    let trained = train(&spec, &cfg.architecture, &train_split.dataset)?;
    let inst = FrozenInstance::from_net(&trained.net, &test_split.dataset, test_split.ground_truth.as_ref())?;
    let reports = bias_audit_instance(cfg, &inst, draws)?;
    Ok((inst, reports))
}

pub fn write_bias_reports(out: &Path, reports: &[BiasReport]) -> Result<()> {
    ensure_dir(out)?;
    std::fs::write(out.join("bias_audit.json"), serde_json::to_string_pretty(reports)? + "\n")?;
    let mut csv = format!("{BIAS_HEADER}\n");
    for r in reports {
        let kind: EstimatorKind = r.estimator.parse()?;
        let method = serde_json::to_value(r.method)?;
        let formula = match kind {
            EstimatorKind::Base => "naive",
            EstimatorKind::Oversampling => "oversampling",
            EstimatorKind::Esmm | EstimatorKind::EsmmNs => "esmm",
            EstimatorKind::NaiveImputation => "naive_imputation",
            EstimatorKind::HeuristicDr => "heuristic_dr",
            EstimatorKind::NaiveIpw | EstimatorKind::MultiIpw => "ipw",
            EstimatorKind::JointLearningDr | EstimatorKind::MultiDr => "dr",
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.estimator,
            formula,
            r.prediction_inaccuracy,
            r.expected_value,
            r.bias,
            method.as_str().unwrap_or_default(),
            r.mc_samples.map(|n| n.to_string()).unwrap_or_default(),
            cell(r.standard_error),
        );
    }
    std::fs::write(out.join("bias_audit.csv"), csv)?;
    Ok(())
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn metric_cells(m: &MetricReport) -> String {
    [m.cvr_auc_do, m.cvr_auc_clicked, m.ctcvr_auc, m.ctcvr_gauc].map(cell).join(",")
}

fn metric_values(m: &MetricReport) -> [Option<f64>; 4] {
    [m.cvr_auc_do, m.cvr_auc_clicked, m.ctcvr_auc, m.ctcvr_gauc]
}

/// Runs `jobs` in parallel on the data of their seed. Splits are built once
/// per distinct data seed and shared by the jobs that use it.
fn run_jobs(
    cfg: &ExperimentConfig,
    jobs: &[(EstimatorSpec, Option<(String, f64)>)],
    out: &Path,
) -> Result<Vec<ExperimentResult>> {
    let mut data_seeds: Vec<Option<u64>> = jobs.iter().map(|(s, _)| cfg.resample_data.then_some(s.seed)).collect();
    data_seeds.sort_unstable();
    data_seeds.dedup();
    let splits: BTreeMap<Option<u64>, (Split, Split)> = data_seeds
        .into_par_iter()
        .map(|ds| {
            let data = load_data(cfg, ds)?;
            Ok((ds, split_for(cfg, &data, ds)?))
        })
        .collect::<Result<_>>()?;
    jobs.par_iter()
        .map(|(spec, param)| {
            let (tr, te) = &splits[&cfg.resample_data.then_some(spec.seed)];
            let name = run_name(spec.kind, param.as_ref().map(|(p, v)| (p.as_str(), *v)), spec.seed);
            log::info!("running {name}");
            Ok(run_one(cfg, spec, tr, te, Some((out, &name)), false)?.0)
        })
        .collect()
}

fn write_results_json(out: &Path, results: &[ExperimentResult]) -> Result<()> {
    std::fs::write(out.join("results.json"), serde_json::to_string_pretty(results)? + "\n")?;
    Ok(())
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

/// Summary row of one estimator in a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub estimator: EstimatorKind,
    pub runs: usize,
    /// `(mean, std)` per entry of [`METRICS`], over runs where the metric exists.
    pub metrics: Vec<Option<(f64, f64)>>,
}

/// Aggregates per-seed results, keeping the order in which estimators first appear.
pub fn summarize(results: &[ExperimentResult]) -> Vec<SummaryRow> {
    let mut order: Vec<EstimatorKind> = Vec::new();
    for r in results {
        if !order.contains(&r.estimator) {
            order.push(r.estimator);
        }
    }
    order
        .into_iter()
        .map(|kind| {
            let runs: Vec<&ExperimentResult> = results.iter().filter(|r| r.estimator == kind).collect();
            let metrics = (0..METRICS.len())
                .map(|m| {
                    let vals: Vec<f64> = runs.iter().filter_map(|r| metric_values(&r.metrics)[m]).collect();
                    mean_std(&vals)
                })
                .collect();
            SummaryRow { estimator: kind, runs: runs.len(), metrics }
        })
        .collect()
}

/// Output of [`compare`].
#[derive(Debug, Clone)]
pub struct Comparison {
    pub results: Vec<ExperimentResult>,
    pub summary: Vec<SummaryRow>,
}

/// Trains every estimator of `estimators` once per seed of the config and
/// writes `runs.csv`, `summary.csv`, per-run traces and `results.json`.
pub fn compare(cfg: &ExperimentConfig, estimators: &[EstimatorKind], out: &Path) -> Result<Comparison> {
    if estimators.is_empty() {
        return Err(Error::Config("compare needs at least one estimator".into()));
    }
    ensure_dir(out)?;
    let mut jobs = Vec::new();
    for &kind in estimators {
        for s in cfg.run_seeds() {
            let spec = cfg.spec(kind, s);
            spec.validate()?;
            jobs.push((spec, None));
        }
    }
    let results = run_jobs(cfg, &jobs, out)?;

    let mut runs = format!("{RUNS_HEADER}\n");
    for r in &results {
        let _ = writeln!(runs, "{},{},{}", r.estimator, r.seed, metric_cells(&r.metrics));
    }
    std::fs::write(out.join("runs.csv"), runs)?;

    let summary = summarize(&results);
    let mut table = String::from("estimator,runs");
    for m in METRICS {
        let _ = write!(table, ",{m}_mean,{m}_std");
    }
    table.push('\n');
    for row in &summary {
        let _ = write!(table, "{},{}", row.estimator, row.runs);
        for m in &row.metrics {
            match m {
                Some((mean, std)) => {
                    let _ = write!(table, ",{mean},{std}");
                }
                None => table.push_str(",,"),
            }
        }
        table.push('\n');
    }
    std::fs::write(out.join("summary.csv"), table)?;
    write_results_json(out, &results)?;
    Ok(Comparison { results, summary })
}

/// Trains `cfg.estimator` at every grid value of `param` and every seed;
/// writes `sweep_<param>.csv` with one row per run.
pub fn sweep(cfg: &ExperimentConfig, param: &str, grid: &[f64], out: &Path) -> Result<Vec<ExperimentResult>> {
    check_sweep_param(cfg.estimator, param)?;
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    ensure_dir(out)?;
    let mut jobs = Vec::new();
    for &value in grid {
        for s in cfg.run_seeds() {
            let mut spec = cfg.spec(cfg.estimator, s);
            set_param(&mut spec.hyper, param, value);
            spec.validate()?;
            jobs.push((spec, Some((param.to_string(), value))));
        }
    }
    let results = run_jobs(cfg, &jobs, out)?;
    let mut csv = format!("{SWEEP_HEADER}\n");
    for ((_, p), r) in jobs.iter().zip(&results) {
        let value = p.as_ref().map(|(_, v)| *v).unwrap_or_default();
        let _ = writeln!(csv, "{},{param},{value},{},{}", r.estimator, r.seed, metric_cells(&r.metrics));
    }
    std::fs::write(out.join(format!("sweep_{param}.csv")), csv)?;
    write_results_json(out, &results)?;
    Ok(results)
}

/// Process exit code for an error: 2 configuration, 3 divergence,
/// 4 undefined metric, 1 anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::UnknownKeys(_) => 2,
        Error::Divergence { .. } => 3,
        Error::UndefinedMetric(_) => 4,
        _ => 1,
    }
}

/// Machine-readable error record written to stderr by the CLI.
pub fn error_record(err: &Error) -> Value {
    let kind = match err {
        Error::Config(_) => "config",
        Error::UnknownKeys(_) => "unknown_keys",
        Error::Divergence { .. } => "divergence",
        Error::UndefinedMetric(_) => "undefined_metric",
        Error::MissingGroundTruth(_) => "missing_ground_truth",
        Error::Parse { .. } => "parse",
        Error::Io(_) => "io",
        _ => "runtime",
    };
    let mut rec = serde_json::json!({ "error": kind, "message": err.to_string(), "exit_code": exit_code(err) });
    match err {
        Error::UnknownKeys(keys) => rec["keys"] = serde_json::json!(keys),
        Error::Divergence { epoch, step, trace } => {
            rec["epoch"] = serde_json::json!(epoch);
            rec["step"] = serde_json::json!(step);
            rec["trace"] = serde_json::json!(trace);
        }
        _ => {}
    }
    rec
}
