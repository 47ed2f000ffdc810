use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mtcvr_core::analysis::{verify_theorems, write_theorem_csv, FrozenInstance};
use mtcvr_core::experiment::{self, ExperimentConfig};
use mtcvr_core::EstimatorKind;

#[derive(Parser)]
#[command(name = "mtcvr", version, about = "Debiased post-click conversion-rate estimation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its counterfactual ground truth.
    Generate(Common),
    /// Train one estimator; writes a checkpoint, loss trace and test metrics.
    Train(Common),
    /// Score a checkpoint on a CSV dataset.
    Evaluate(EvaluateArgs),
    /// Expected value and bias of every estimator's objective at frozen predictions.
    BiasAudit(BiasAuditArgs),
    /// Metric-vs-hyperparameter curves over repeated seeds.
    Sweep(SweepArgs),
    /// Mean and standard deviation of every metric per estimator.
    Compare(Common),
    /// Check the unbiasedness results by enumeration on random small instances.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Estimator, or a comma-separated list for `compare`.
    #[arg(long, value_delimiter = ',')]
    estimator: Vec<EstimatorKind>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    /// File for the JSON report; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_gauc: bool,
}

#[derive(Args)]
struct BiasAuditArgs {
    #[command(flatten)]
    common: Common,
    /// Frozen instance JSON (`p`, `r`, `r_hat`, `p_hat`, `e_hat`); when absent the
    /// configured estimator is trained and frozen on the test split.
    #[arg(long)]
    instance: Option<PathBuf>,
    #[arg(long)]
    draws: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// One of tau, tau_pct, lambda, eta, k, v.
    #[arg(long)]
    param: Option<String>,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<f64>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 12)]
    max_size: usize,
    #[arg(long, default_value_t = 1e-10)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(repeats) = common.repeats {
        cfg.repeats = repeats;
    }
    match common.estimator.as_slice() {
        [] => {}
        [one] => {
            cfg.estimator = *one;
            cfg.estimators = vec![*one];
        }
        many => {
            cfg.estimator = many[0];
            cfg.estimators = many.to_vec();
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let cfg = load_config(&c)?;
            let (d, g) = experiment::generate(&cfg, &c.out)?;
            println!("wrote {} and {}", d.display(), g.display());
        }
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let result = experiment::train_command(&cfg, &c.out)?;
            println!("{}", serde_json::to_string_pretty(&result)?);
        }
        Command::Evaluate(a) => {
            let report = experiment::evaluate_checkpoint(
                &a.checkpoint,
                &a.dataset,
                a.ground_truth.as_deref(),
                a.seed,
                !a.no_gauc,
            )?;
            match &a.out {
                Some(path) => report.write_json(path)?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
        }
        Command::BiasAudit(a) => {
            let cfg = load_config(&a.common)?;
            let draws = a.draws.unwrap_or(cfg.bias_draws);
            let reports = match &a.instance {
                Some(path) => {
                    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    let inst: FrozenInstance = serde_json::from_str(&text)?;
                    let inst = FrozenInstance::new(inst.p, inst.r, inst.r_hat, inst.p_hat, inst.e_hat)?;
                    experiment::bias_audit_instance(&cfg, &inst, draws)?
                }
                None => {
                    let (inst, reports) = experiment::bias_audit(&cfg, draws)?;
                    std::fs::create_dir_all(&a.common.out)?;
                    write_json(&a.common.out.join("frozen_instance.json"), &inst)?;
                    reports
                }
            };
            experiment::write_bias_reports(&a.common.out, &reports)?;
            print!("{}", std::fs::read_to_string(a.common.out.join("bias_audit.csv"))?);
        }
        Command::Sweep(a) => {
            let mut cfg = load_config(&a.common)?;
            if let Some(p) = a.param {
                let grid = if a.grid.is_empty() {
                    cfg.sweep.as_ref().map(|s| s.grid.clone()).unwrap_or_default()
                } else {
                    a.grid
                };
                cfg.sweep = Some(experiment::SweepConfig { param: p, grid });
            } else if !a.grid.is_empty() {
                match &mut cfg.sweep {
                    Some(s) => s.grid = a.grid,
                    None => bail!(mtcvr_core::Error::Config("--grid needs --param or a sweep block".into())),
                }
            }
            let Some(s) = cfg.sweep.clone() else {
                bail!(mtcvr_core::Error::Config("no sweep parameter: pass --param and --grid".into()));
            };
            let results = experiment::sweep(&cfg, &s.param, &s.grid, &a.common.out)?;
            println!(
                "{} runs written to {}",
                results.len(),
                a.common.out.join(format!("sweep_{}.csv", s.param)).display()
            );
        }
        Command::Compare(c) => {
            let cfg = load_config(&c)?;
            let cmp = experiment::compare(&cfg, &cfg.compare_list(), &c.out)?;
            print!("{}", std::fs::read_to_string(c.out.join("summary.csv"))?);
            log::info!("{} runs", cmp.results.len());
        }
        Command::Verify(v) => {
            let rows = verify_theorems(v.instances, v.max_size, v.tolerance, v.seed)?;
            std::fs::create_dir_all(&v.out)?;
            write_theorem_csv(&v.out.join("theorems.csv"), &rows)?;
            for r in &rows {
                println!("{:<26} max {:>10.3e}  {}", r.theorem, r.max_bias, if r.pass { "pass" } else { "FAIL" });
            }
            if rows.iter().any(|r| !r.pass) {
                bail!("theorem verification failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, record) = match err.downcast_ref::<mtcvr_core::Error>() {
                Some(e) => (experiment::exit_code(e), experiment::error_record(e)),
                None => (1, serde_json::json!({ "error": "runtime", "message": format!("{err:#}"), "exit_code": 1 })),
            };
            eprintln!("{record}");
            ExitCode::from(code as u8)
        }
    }
}
