//! Command-line front end: CSV ingestion, run configuration, and the
//! `estimate` and `simulate` commands.

pub mod error;
pub mod ingest;
pub mod json;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use hdcbps::estimate::ArmDiagnostics;
use hdcbps::model::{Family, OutcomeWeight, PropensityWeightKind};
use hdcbps::simulate::{run_scenario, OutcomeKind, Scenario, ScenarioSpec};
use hdcbps::{estimate_ate, EffectEstimate, EstimatorConfig, OutcomeModel, PenaltySpec};
use serde::Serialize;

pub use error::CliError;
pub use ingest::{ingest_csv, ingest_reader, write_csv};

#[derive(Debug, Parser)]
#[command(name = "hdcbps", version, about = "Covariate balancing propensity score estimation of average treatment effects")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,

    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Estimate mean potential outcomes and the ATE from a CSV file.
    Estimate {
        #[arg(long)]
        input: PathBuf,
        /// JSON destination (default: stdout).
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        estimator: EstimatorArgs,
    },
    /// Run a simulation study.
    Simulate {
        #[arg(long, default_value = "both-correct")]
        scenario: String,
        #[arg(long, default_value_t = 500)]
        n: usize,
        /// Covariates excluding the intercept.
        #[arg(long, default_value_t = 1000)]
        d: usize,
        #[arg(long, default_value_t = 0.5)]
        rho: f64,
        #[arg(long, default_value_t = 200)]
        reps: usize,
        /// Report JSON destination (default: stdout). The per-replication
        /// CSV is written next to it with a `.csv` extension.
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        estimator: EstimatorArgs,
    },
}

#[derive(Debug, Args)]
pub struct EstimatorArgs {
    /// gaussian, binomial:<m> or poisson.
    #[arg(long, default_value = "gaussian")]
    pub family: String,
    /// pi, one or bpp.
    #[arg(long, default_value = "one")]
    pub w1: String,
    /// one, inv-pi or ps-adjusted.
    #[arg(long, default_value = "ps-adjusted")]
    pub w2: String,
    /// Fixed propensity penalty (default: cross-validated).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Fixed outcome penalty (default: cross-validated).
    #[arg(long = "lambda-outcome")]
    pub lambda_outcome: Option<f64>,
    #[arg(long = "cv-folds", default_value_t = 5)]
    pub cv_folds: usize,
    /// Fold seed for `estimate`, master seed for `simulate`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
}

/// Validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Command,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone)]
pub enum Command {
    Estimate {
        input: PathBuf,
        output: Option<PathBuf>,
        family: Family,
        config: EstimatorConfig,
    },
    Simulate {
        output: Option<PathBuf>,
        spec: ScenarioSpec,
        config: EstimatorConfig,
    },
}

fn config_err(e: hdcbps::Error) -> CliError {
    CliError::Config(e.to_string())
}

fn estimator_config(args: &EstimatorArgs, cv_seed: u64) -> Result<(Family, EstimatorConfig), CliError> {
    let family: Family = args.family.parse().map_err(config_err)?;
    let w1: PropensityWeightKind = args.w1.parse().map_err(config_err)?;
    let w2: OutcomeWeight = args.w2.parse().map_err(config_err)?;
    if args.cv_folds < 2 {
        return Err(CliError::Config(format!("--cv-folds must be at least 2, got {}", args.cv_folds)));
    }
    let penalty = |fixed: Option<f64>| match fixed {
        Some(lambda) => PenaltySpec::Fixed { lambda },
        None => PenaltySpec::CrossValidated {
            folds: args.cv_folds,
            seed: cv_seed,
        },
    };
    let config = EstimatorConfig {
        w1,
        w2,
        outcome: match family {
            Family::Gaussian => OutcomeModel::Linear,
            other => OutcomeModel::Glm(other),
        },
        propensity_penalty: penalty(args.lambda),
        outcome_penalty: penalty(args.lambda_outcome),
        level: args.level,
        ..EstimatorConfig::default()
    };
    config.validate().map_err(config_err)?;
    Ok((family, config))
}

impl RunConfig {
    pub fn from_cli(cli: Cli) -> Result<Self, CliError> {
        if cli.threads == Some(0) {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        let command = match cli.command {
            CliCommand::Estimate { input, output, estimator } => {
                if output.as_deref() == Some(input.as_path()) {
                    return Err(CliError::Config("--output must differ from --input".into()));
                }
                let (family, config) = estimator_config(&estimator, estimator.seed.unwrap_or(0))?;
                Command::Estimate {
                    input,
                    output,
                    family,
                    config,
                }
            }
            CliCommand::Simulate {
                scenario,
                n,
                d,
                rho,
                reps,
                output,
                estimator,
            } => {
                let (family, config) = estimator_config(&estimator, 0)?;
                let scenario: Scenario = scenario.parse().map_err(config_err)?;
                let outcome_kind = match family {
                    Family::Gaussian => OutcomeKind::Linear,
                    Family::Binomial { trials } => OutcomeKind::Binomial { trials },
                    Family::Poisson => {
                        return Err(CliError::Config("simulation designs have gaussian or binomial outcomes".into()))
                    }
                };
                let spec = ScenarioSpec {
                    rho,
                    replications: reps,
                    master_seed: estimator.seed.unwrap_or(1),
                    outcome_kind,
                    ..ScenarioSpec::new(scenario, n, d)
                };
                spec.validate().map_err(config_err)?;
                if let Some(path) = &output {
                    if csv_path(path) == *path {
                        return Err(CliError::Config("simulate --output must not have a .csv extension".into()));
                    }
                }
                Command::Simulate { output, spec, config }
            }
        };
        Ok(RunConfig {
            command,
            threads: cli.threads,
        })
    }
}

fn csv_path(json: &Path) -> PathBuf {
    json.with_extension("csv")
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PerArm<T> {
    pub treated: T,
    pub control: T,
}

impl<T> PerArm<T> {
    fn from_diagnostics(est: &EffectEstimate, f: impl Fn(&ArmDiagnostics) -> T) -> Self {
        Self {
            treated: f(&est.treated.diagnostics),
            control: f(&est.control.diagnostics),
        }
    }
}

/// Per-arm fit diagnostics; `control` describes the fit on swapped labels.
#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub support_size: PerArm<usize>,
    pub balance_residual_inf_norm: PerArm<f64>,
    pub min_pi: PerArm<f64>,
    pub max_pi: PerArm<f64>,
    pub sample_bounded: PerArm<bool>,
    pub lambda_ps: PerArm<f64>,
    pub lambda_outcome: PerArm<f64>,
    pub calibration_converged: PerArm<bool>,
}

/// Output of `estimate`.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateDocument {
    pub mu1: f64,
    pub mu0: f64,
    pub ate: f64,
    /// Estimated asymptotic variance of the ATE; the standard error is
    /// `√(variance / n)`.
    pub variance: f64,
    pub ci: [f64; 2],
    pub level: f64,
    pub n: usize,
    pub family: String,
    pub diagnostics: Diagnostics,
}

impl EstimateDocument {
    pub fn new(est: &EffectEstimate, family: Family) -> Self {
        Self {
            mu1: est.mu1(),
            mu0: est.mu0(),
            ate: est.ate,
            variance: est.variance,
            ci: [est.ci.0, est.ci.1],
            level: est.level,
            n: est.treated.n,
            family: family.to_string(),
            diagnostics: Diagnostics {
                support_size: PerArm::from_diagnostics(est, |d| d.support_size),
                balance_residual_inf_norm: PerArm::from_diagnostics(est, |d| d.balance_residual_inf_norm),
                min_pi: PerArm::from_diagnostics(est, |d| d.min_pi),
                max_pi: PerArm::from_diagnostics(est, |d| d.max_pi),
                sample_bounded: PerArm::from_diagnostics(est, |d| d.sample_bounded),
                lambda_ps: PerArm::from_diagnostics(est, |d| d.lambda_ps),
                lambda_outcome: PerArm::from_diagnostics(est, |d| d.lambda_outcome),
                calibration_converged: PerArm::from_diagnostics(est, |d| d.calibration_converged),
            },
        }
    }
}

fn write_output(path: Option<&Path>, contents: &str) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, contents).map_err(|e| CliError::io(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(contents.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| CliError::io(Path::new("<stdout>"), e))
        }
    }
}

/// Checks every outcome against the family before any model is fitted.
fn check_outcomes(data: &hdcbps::Dataset, family: Family) -> Result<(), CliError> {
    for (i, &y) in data.y().iter().enumerate() {
        family.check_outcome(y).map_err(|e| CliError::Parse {
            row: i + 1,
            column: "Y".into(),
            message: e.to_string(),
        })?;
    }
    Ok(())
}

fn execute(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Estimate {
            input,
            output,
            family,
            config,
        } => {
            let data = ingest_csv(input)?;
            check_outcomes(&data, *family)?;
            let est = estimate_ate(&data, config)?;
            write_output(output.as_deref(), &json::to_pretty(&EstimateDocument::new(&est, *family)))
        }
        Command::Simulate { output, spec, config } => {
            let report = run_scenario(spec, config)?;
            write_output(output.as_deref(), &json::to_pretty(&report))?;
            if let Some(path) = output {
                let csv = csv_path(path);
                fs::write(&csv, report.to_csv()).map_err(|e| CliError::io(&csv, e))?;
            }
            Ok(())
        }
    }
}

/// Executes a validated configuration.
pub fn run(config: &RunConfig) -> Result<(), CliError> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(threads) = config.threads {
        pool = pool.num_threads(threads);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker threads: {e}")))?;
    pool.install(|| execute(&config.command))
}

/// Parses, validates and runs; returns the process exit status. Errors are
/// reported on stderr as a JSON document.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let err = CliError::Config(e.to_string().trim_end().to_string());
            eprintln!("{}", json::to_pretty(&err.document()).trim_end());
            return err.exit_code();
        }
    };
    match RunConfig::from_cli(cli).and_then(|c| run(&c)) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("{}", json::to_pretty(&err.document()).trim_end());
            err.exit_code()
        }
    }
}
