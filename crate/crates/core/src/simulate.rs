//! Simulation designs with correctly specified and misspecified propensity
//! and outcome models, the replication loop, and summary metrics.

use std::str::FromStr;

use ndarray::{s, Array2};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimate::{estimate_ate, ArmDiagnostics, EstimatorConfig};
use crate::model::{sigmoid, Dataset};

/// Which parts of the data-generating process act on transformed covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    BothCorrect,
    PsMisspecified,
    OutcomeMisspecified,
    BothMisspecified,
}

impl Scenario {
    pub fn treatment_misspecified(self) -> bool {
        matches!(self, Scenario::PsMisspecified | Scenario::BothMisspecified)
    }

    pub fn outcome_misspecified(self) -> bool {
        matches!(self, Scenario::OutcomeMisspecified | Scenario::BothMisspecified)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::BothCorrect => "both-correct",
            Scenario::PsMisspecified => "ps-misspecified",
            Scenario::OutcomeMisspecified => "outcome-misspecified",
            Scenario::BothMisspecified => "both-misspecified",
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both-correct" | "1" => Ok(Scenario::BothCorrect),
            "ps-misspecified" | "2" => Ok(Scenario::PsMisspecified),
            "outcome-misspecified" | "3" => Ok(Scenario::OutcomeMisspecified),
            "both-misspecified" | "4" => Ok(Scenario::BothMisspecified),
            other => Err(Error::InvalidInput(format!("unknown scenario '{other}'"))),
        }
    }
}

/// Outcome law of the design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum OutcomeKind {
    /// `Y(1) = 2 + 0.137 (X5+…+X8) + ε₁`, `Y(0) = 1 + 0.291 (X5+…+X10) + ε₀`.
    #[default]
    Linear,
    /// `Y(t) ~ Binomial(m, logistic(ηₜ))` with
    /// `η₁ = 0.5 + 0.3 (X5+…+X8)` and `η₀ = −0.25 + 0.25 (X5+…+X10)`.
    Binomial { trials: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub n: usize,
    /// Number of covariates, excluding the intercept.
    pub d: usize,
    pub rho: f64,
    pub replications: usize,
    pub master_seed: u64,
    pub outcome_kind: OutcomeKind,
}

impl ScenarioSpec {
    pub fn new(scenario: Scenario, n: usize, d: usize) -> Self {
        Self {
            scenario,
            n,
            d,
            rho: 0.5,
            replications: 200,
            master_seed: 1,
            outcome_kind: OutcomeKind::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 10 {
            return Err(Error::InvalidInput(format!("d = {} but the design needs at least 10 covariates", self.d)));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(Error::InvalidInput(format!("rho = {} outside (-1, 1)", self.rho)));
        }
        if self.n < 10 {
            return Err(Error::InvalidInput(format!("n = {} is too small", self.n)));
        }
        if self.replications == 0 {
            return Err(Error::InvalidInput("at least one replication is required".into()));
        }
        if let OutcomeKind::Binomial { trials: 0 } = self.outcome_kind {
            return Err(Error::InvalidInput("binomial outcomes need at least one trial".into()));
        }
        Ok(())
    }
}

/// Random stream `stream` under `seed`.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed of replication `r`, derived from the master seed by a counter-based
/// stream so that it does not depend on execution order.
pub fn replication_seed(master_seed: u64, replication: usize) -> u64 {
    stream_rng(master_seed, replication as u64).next_u64()
}

fn fill_covariates<R: Rng>(x: &mut Array2<f64>, rho: f64, rng: &mut R) {
    let scale = (1.0 - rho * rho).sqrt();
    let d = x.ncols() - 1;
    for mut row in x.rows_mut() {
        row[0] = 1.0;
        let mut prev: f64 = rng.sample(StandardNormal);
        row[1] = prev;
        for j in 2..=d {
            let z: f64 = rng.sample(StandardNormal);
            prev = rho * prev + scale * z;
            row[j] = prev;
        }
    }
}

/// `n` draws of `N(0, Σ)` with `Σⱼₖ = ρ^|j−k|`, via the AR(1) recursion, with
/// an intercept column of ones in column 0. Column `j` holds `Xⱼ`.
pub fn gen_covariates(n: usize, d: usize, rho: f64, seed: u64) -> Array2<f64> {
    let mut x = Array2::zeros((n, d + 1));
    fill_covariates(&mut x, rho, &mut stream_rng(seed, 0));
    x
}

/// `π(X) = 1 − 1/{1 + exp(−X1 + X2/2 − X3/4 − X4/10 − X5/10 + X6/10)}`.
pub fn true_propensity(row: &[f64]) -> f64 {
    let u = -row[1] + row[2] / 2.0 - row[3] / 4.0 - row[4] / 10.0 - row[5] / 10.0 + row[6] / 10.0;
    1.0 - 1.0 / (1.0 + u.exp())
}

fn draw_treatment<R: Rng>(x: &Array2<f64>, rng: &mut R) -> Vec<f64> {
    x.rows()
        .into_iter()
        .map(|row| {
            let p = true_propensity(row.as_slice().expect("row-major design"));
            if rng.random::<f64>() < p {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Bernoulli treatment from [`true_propensity`] of each row.
pub fn gen_treatment(x_effective: &Array2<f64>, seed: u64) -> Vec<f64> {
    draw_treatment(x_effective, &mut stream_rng(seed, 1))
}

/// Regression functions `E{Y(1)|X}` and `E{Y(0)|X}` of the outcome law.
pub fn outcome_means(row: &[f64], kind: OutcomeKind) -> (f64, f64) {
    let s1: f64 = row[5..=8].iter().sum();
    let s0: f64 = row[5..=10].iter().sum();
    match kind {
        OutcomeKind::Linear => (2.0 + 0.137 * s1, 1.0 + 0.291 * s0),
        OutcomeKind::Binomial { trials } => {
            let m = f64::from(trials);
            (m * sigmoid(0.5 + 0.3 * s1), m * sigmoid(-0.25 + 0.25 * s0))
        }
    }
}

/// Population means `(E{Y(1)}, E{Y(0)})` when the outcome acts on Gaussian
/// covariates with correlation `rho`, or on standardized transforms with
/// mean zero. For linear outcomes this is `(2, 1)` in both cases.
pub fn gaussian_truth(kind: OutcomeKind, rho: f64) -> (f64, f64) {
    match kind {
        OutcomeKind::Linear => (2.0, 1.0),
        OutcomeKind::Binomial { trials } => {
            let m = f64::from(trials);
            let sd1 = (ar1_sum_variance(4, rho)).sqrt();
            let sd0 = (ar1_sum_variance(6, rho)).sqrt();
            (
                m * normal_expectation(|z| sigmoid(0.5 + 0.3 * sd1 * z)),
                m * normal_expectation(|z| sigmoid(-0.25 + 0.25 * sd0 * z)),
            )
        }
    }
}

/// Variance of a sum of `k` consecutive AR(1) coordinates.
fn ar1_sum_variance(k: usize, rho: f64) -> f64 {
    let mut v = 0.0;
    for a in 0..k {
        for b in 0..k {
            v += rho.powi((a as i32 - b as i32).abs());
        }
    }
    v
}

/// `E f(Z)` for standard normal `Z`, by the trapezoid rule on `[−12, 12]`.
/// The rule converges geometrically for smooth integrands with Gaussian
/// tails.
pub fn normal_expectation<F: Fn(f64) -> f64>(f: F) -> f64 {
    let steps = 4800;
    let h = 24.0 / steps as f64;
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let mut total = 0.0;
    for k in 0..=steps {
        let z = -12.0 + k as f64 * h;
        let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
        total += w * f(z) * (-0.5 * z * z).exp();
    }
    total * h * norm
}

/// Means and standard deviations of the eight raw transforms under the
/// covariate law with correlation `rho`.
pub fn transform_moments(rho: f64) -> [(f64, f64); 8] {
    let lognormal = |var: f64| {
        let mean = (var / 2.0).exp();
        (mean, (var.exp() * (var.exp() - 1.0)).sqrt())
    };
    let logistic_tail = |x: f64| 1.0 - sigmoid(x);

    // X2 = ρX1 + √(1−ρ²)Z with Z independent of X1.
    let m2 = rho * normal_expectation(|x| x * logistic_tail(x));
    let e2 = rho * rho * normal_expectation(|x| (x * logistic_tail(x)).powi(2))
        + (1.0 - rho * rho) * normal_expectation(|x| logistic_tail(x).powi(2));

    // X3 | X1 = x ~ N(ρ²x, 1 − ρ⁴), so X1X3/25 + 0.6 | x is N(m, s²).
    let r2 = rho * rho;
    let cond = |x: f64| (r2 * x * x / 25.0 + 0.6, x * x * (1.0 - r2 * r2) / 625.0);
    let m3 = normal_expectation(|x| {
        let (m, v) = cond(x);
        m.powi(3) + 3.0 * m * v
    });
    let e3 = normal_expectation(|x| {
        let (m, v) = cond(x);
        m.powi(6) + 15.0 * m.powi(4) * v + 45.0 * m * m * v * v + 15.0 * v.powi(3)
    });

    // X2 + X4 ~ N(0, 2 + 2ρ²).
    let v4 = 2.0 + 2.0 * r2;

    [
        lognormal(0.25),
        (m2 + 10.0, (e2 - m2 * m2).sqrt()),
        (m3, (e3 - m3 * m3).sqrt()),
        (v4 + 400.0, (2.0 * v4 * v4 + 1600.0 * v4).sqrt()),
        (0.0, 1.0),
        lognormal(2.0 + 2.0 * rho),
        (1.0, 2f64.sqrt()),
        (-20.0, 15f64.sqrt()),
    ]
}

/// The eight raw transforms of `(X1, …, X9)`.
pub fn raw_transforms(row: &[f64]) -> [f64; 8] {
    let x = |j: usize| row[j];
    [
        (x(1) / 2.0).exp(),
        x(2) / (1.0 + x(1).exp()) + 10.0,
        (x(1) * x(3) / 25.0 + 0.6).powi(3),
        (x(2) + x(4) + 20.0).powi(2),
        x(6),
        (x(6) + x(7)).exp(),
        x(9) * x(9),
        x(7).powi(3) - 20.0,
    ]
}

/// Replaces columns 1–8 of a design by the standardized transforms of
/// [`raw_transforms`] under correlation `rho`. Column 0 and columns 9 and
/// up are copied unchanged.
pub fn transform_mis(x: &Array2<f64>, rho: f64) -> Array2<f64> {
    let moments = transform_moments(rho);
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        standardize_in_place(row.as_slice_mut().expect("row-major design"), &moments);
    }
    out
}

fn standardize_in_place(row: &mut [f64], moments: &[(f64, f64); 8]) {
    let raw = raw_transforms(row);
    for (k, (v, (mean, sd))) in raw.iter().zip(moments).enumerate() {
        row[k + 1] = (v - mean) / sd;
    }
}

/// One generated sample and the population means it estimates.
#[derive(Debug, Clone)]
pub struct Replication {
    pub data: Dataset,
    pub mu1: f64,
    pub mu0: f64,
}

impl Replication {
    pub fn ate(&self) -> f64 {
        self.mu1 - self.mu0
    }
}

fn draw_outcome<R: Rng>(mean: f64, kind: OutcomeKind, rng: &mut R) -> f64 {
    match kind {
        OutcomeKind::Linear => {
            let e: f64 = rng.sample(StandardNormal);
            mean + e
        }
        OutcomeKind::Binomial { trials } => {
            let p = (mean / f64::from(trials)).clamp(0.0, 1.0);
            Binomial::new(u64::from(trials), p).expect("valid binomial").sample(rng) as f64
        }
    }
}

/// Potential outcomes from the covariates the outcome law acts on, and the
/// observed `Y = T Y(1) + (1 − T) Y(0)`.
pub fn gen_outcomes(x_effective: &Array2<f64>, t: &[f64], kind: OutcomeKind, seed: u64) -> Vec<f64> {
    draw_outcomes(x_effective, t, kind, &mut stream_rng(seed, 2))
}

fn draw_outcomes<R: Rng>(x: &Array2<f64>, t: &[f64], kind: OutcomeKind, rng: &mut R) -> Vec<f64> {
    x.rows()
        .into_iter()
        .zip(t)
        .map(|(row, &ti)| {
            let (m1, m0) = outcome_means(row.as_slice().expect("row-major design"), kind);
            let y1 = draw_outcome(m1, kind, rng);
            let y0 = draw_outcome(m0, kind, rng);
            ti * y1 + (1.0 - ti) * y0
        })
        .collect()
}

/// Monte Carlo estimate of `(E{Y(1)}, E{Y(0)})` from `draws` covariate rows,
/// with the standard errors of both means.
pub fn monte_carlo_truth(spec: &ScenarioSpec, draws: usize, seed: u64) -> ([f64; 2], [f64; 2]) {
    let mut rng = stream_rng(seed, 3);
    let moments = transform_moments(spec.rho);
    let mut x = Array2::zeros((1, 11));
    let (mut sum, mut sq) = ([0.0; 2], [0.0; 2]);
    for _ in 0..draws {
        fill_covariates(&mut x, spec.rho, &mut rng);
        let row = x.as_slice_mut().expect("row-major");
        if spec.scenario.outcome_misspecified() {
            standardize_in_place(row, &moments);
        }
        let (m1, m0) = outcome_means(row, spec.outcome_kind);
        for (k, m) in [m1, m0].into_iter().enumerate() {
            sum[k] += m;
            sq[k] += m * m;
        }
    }
    let n = draws as f64;
    let mean = [sum[0] / n, sum[1] / n];
    let se = [0, 1].map(|k| ((sq[k] / n - mean[k] * mean[k]).max(0.0) / n).sqrt());
    (mean, se)
}

/// Population means for a scenario. Linear outcomes have mean-zero
/// covariates in every scenario; binomial outcomes on Gaussian covariates are
/// integrated by quadrature; binomial outcomes on transformed covariates use
/// a fixed-seed Monte Carlo run of `10⁷` draws.
pub fn scenario_truth(spec: &ScenarioSpec) -> (f64, f64) {
    match spec.outcome_kind {
        OutcomeKind::Binomial { .. } if spec.scenario.outcome_misspecified() => {
            let (mean, _) = monte_carlo_truth(spec, 10_000_000, 0x7275_7468);
            (mean[0], mean[1])
        }
        kind => gaussian_truth(kind, spec.rho),
    }
}

/// Sample `replication` of a scenario. The analyst's design is always the
/// untransformed covariates.
pub fn generate(spec: &ScenarioSpec, replication: usize, truth: (f64, f64)) -> Result<Replication> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(replication_seed(spec.master_seed, replication));
    let mut x = Array2::zeros((spec.n, spec.d + 1));
    fill_covariates(&mut x, spec.rho, &mut rng);
    let transformed = (spec.scenario.treatment_misspecified() || spec.scenario.outcome_misspecified())
        .then(|| transform_mis(&x, spec.rho));
    let pick = |mis: bool| if mis { transformed.as_ref().expect("transformed") } else { &x };
    let t = draw_treatment(pick(spec.scenario.treatment_misspecified()), &mut rng);
    let y = draw_outcomes(pick(spec.scenario.outcome_misspecified()), &t, spec.outcome_kind, &mut rng);
    let mut names = vec!["(intercept)".to_string()];
    names.extend((1..=spec.d).map(|j| format!("X{j}")));
    let data = Dataset::new(x, t, y, names)?;
    Ok(Replication {
        data,
        mu1: truth.0,
        mu0: truth.1,
    })
}

/// Result of one replication.
#[derive(Debug, Clone, Serialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    pub mu1: f64,
    pub mu0: f64,
    pub ate: f64,
    pub variance: f64,
    pub variance_mu1: f64,
    pub ci: (f64, f64),
    pub ci_mu1: (f64, f64),
    pub treated: ArmDiagnostics,
    pub control: ArmDiagnostics,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicationFailure {
    pub replication: usize,
    pub error: String,
}

/// Accuracy of a set of interval estimates of one target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub truth: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    /// Standard deviation of the estimates across replications (divisor
    /// `reps − 1`).
    pub std_err: f64,
    /// `√mean{(μ̂ − μ)²} / |μ|`.
    pub rmse: f64,
    pub coverage: f64,
    pub mean_ci_length: f64,
    /// Mean of the estimated standard errors `√(V̂/n)`.
    pub mean_estimated_se: f64,
    /// Mean of `V̂/n`.
    pub mean_estimated_variance: f64,
}

impl Metrics {
    /// Summary of `(estimate, interval, V̂/n)` triples.
    pub fn compute(truth: f64, items: &[(f64, (f64, f64), f64)]) -> Self {
        let r = items.len() as f64;
        let mean = items.iter().map(|v| v.0).sum::<f64>() / r;
        let ss: f64 = items.iter().map(|v| (v.0 - mean).powi(2)).sum();
        let mse = items.iter().map(|v| (v.0 - truth).powi(2)).sum::<f64>() / r;
        let covered = items.iter().filter(|v| v.1 .0 <= truth && truth <= v.1 .1).count();
        Self {
            truth,
            mean_estimate: mean,
            bias: mean - truth,
            std_err: if items.len() > 1 { (ss / (r - 1.0)).sqrt() } else { 0.0 },
            rmse: mse.sqrt() / truth.abs(),
            coverage: covered as f64 / r,
            mean_ci_length: items.iter().map(|v| v.1 .1 - v.1 .0).sum::<f64>() / r,
            mean_estimated_se: items.iter().map(|v| v.2.sqrt()).sum::<f64>() / r,
            mean_estimated_variance: items.iter().map(|v| v.2).sum::<f64>() / r,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationReport {
    pub spec: ScenarioSpec,
    pub completed: usize,
    pub ate: Metrics,
    pub mu1: Metrics,
    pub failures: Vec<ReplicationFailure>,
    pub records: Vec<ReplicationRecord>,
}

/// Largest share of replications that may fail before a run is aborted.
pub const MAX_FAILURE_SHARE: f64 = 0.02;

fn run_one(spec: &ScenarioSpec, config: &EstimatorConfig, r: usize, truth: (f64, f64)) -> Result<ReplicationRecord> {
    let rep = generate(spec, r, truth)?;
    let est = estimate_ate(&rep.data, config)?;
    Ok(ReplicationRecord {
        replication: r,
        seed: replication_seed(spec.master_seed, r),
        mu1: est.mu1(),
        mu0: est.mu0(),
        ate: est.ate,
        variance: est.variance,
        variance_mu1: est.treated.variance,
        ci: est.ci,
        ci_mu1: est.treated.ci,
        treated: est.treated.diagnostics,
        control: est.control.diagnostics,
    })
}

/// Runs every replication of `spec` and summarizes them in replication
/// order. Failed replications are excluded as long as they make up at most
/// [`MAX_FAILURE_SHARE`] of the run.
pub fn run_scenario(spec: &ScenarioSpec, config: &EstimatorConfig) -> Result<SimulationReport> {
    spec.validate()?;
    config.validate()?;
    let truth = scenario_truth(spec);
    let results: Vec<Result<ReplicationRecord>> = (0..spec.replications)
        .into_par_iter()
        .map(|r| run_one(spec, config, r, truth))
        .collect();
    let mut records = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push(ReplicationFailure {
                replication: r,
                error: e.to_string(),
            }),
        }
    }
    if records.is_empty() || failures.len() as f64 > MAX_FAILURE_SHARE * spec.replications as f64 {
        return Err(Error::SimulationFailed {
            failed: failures.len(),
            total: spec.replications,
            first: failures.first().map_or_else(String::new, |f| f.error.clone()),
        });
    }
    let n = spec.n as f64;
    let ate_items: Vec<_> = records.iter().map(|r| (r.ate, r.ci, r.variance / n)).collect();
    let mu1_items: Vec<_> = records.iter().map(|r| (r.mu1, r.ci_mu1, r.variance_mu1 / n)).collect();
    Ok(SimulationReport {
        spec: *spec,
        completed: records.len(),
        ate: Metrics::compute(truth.0 - truth.1, &ate_items),
        mu1: Metrics::compute(truth.0, &mu1_items),
        failures,
        records,
    })
}

impl SimulationReport {
    /// Per-replication table with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "replication,seed,mu1,mu0,ate,variance,ci_lo,ci_hi,support_treated,support_control,balance_residual_treated,balance_residual_control\n",
        );
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{},{:.16e},{:.16e}\n",
                r.replication,
                r.seed,
                r.mu1,
                r.mu0,
                r.ate,
                r.variance,
                r.ci.0,
                r.ci.1,
                r.treated.support_size,
                r.control.support_size,
                r.treated.balance_residual_inf_norm,
                r.control.balance_residual_inf_norm,
            ));
        }
        out
    }
}

/// Copies covariates `1..=d` of a design without the intercept.
pub fn covariates_only(x: &Array2<f64>) -> Array2<f64> {
    x.slice(s![.., 1..]).to_owned()
}
