//! Point estimates, plug-in variances and confidence intervals, and the
//! end-to-end pipeline for one arm and for the average treatment effect.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::balance::{
    basis_weights, calibrate, extract_support, CalibrationSettings, Pipeline, Support,
    DEFAULT_ZERO_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::model::{Dataset, Family, Link, OutcomeWeight, PropensityWeight, PropensityWeightKind};
pub use crate::optimize::PenaltySpec;
use crate::optimize::SolverSettings;
use crate::outcome::{fit_outcome_glm, fit_outcome_linear, OutcomeFit};
use crate::propensity::{bpp_weight, fit_initial_propensity, PropensityFit};

/// `(1/n) Σᵢ TᵢYᵢ/π̃ᵢ`.
pub fn horvitz_thompson(data: &Dataset, tilde_pi: &[f64]) -> f64 {
    let total: f64 = (0..data.n()).map(|i| data.t()[i] * data.y()[i] / tilde_pi[i]).sum();
    total / data.n() as f64
}

/// `Σᵢ TᵢYᵢ/π̃ᵢ ÷ Σᵢ Tᵢ/π̃ᵢ`.
pub fn hajek(data: &Dataset, tilde_pi: &[f64]) -> f64 {
    let (num, den) = (0..data.n()).fold((0.0, 0.0), |(a, b), i| {
        let w = data.t()[i] / tilde_pi[i];
        (a + w * data.y()[i], b + w)
    });
    num / den
}

/// `(1/n) Σᵢ TᵢYᵢ/π̃ᵢ − (1/n) Σᵢ (Tᵢ/π̃ᵢ − 1) mᵢ` for fitted regression
/// values `mᵢ`. With `mᵢ = b'(α̃ᵀXᵢ)` this is the GLM estimator; with
/// `mᵢ = α̃ᵀXᵢ` it is the augmented form of the linear estimator.
pub fn aipw(data: &Dataset, tilde_pi: &[f64], fitted: &[f64]) -> f64 {
    let correction: f64 = (0..data.n())
        .map(|i| (data.t()[i] / tilde_pi[i] - 1.0) * fitted[i])
        .sum();
    horvitz_thompson(data, tilde_pi) - correction / data.n() as f64
}

/// AIPW estimator with `mᵢ = b'(α̃ᵀXᵢ)` taken from an outcome fit.
pub fn aipw_glm(data: &Dataset, tilde_pi: &[f64], fit: &OutcomeFit) -> f64 {
    aipw(data, tilde_pi, &fit.fitted_mean(data))
}

/// `V̂ = (1/n) Σᵢ {Tᵢ/π̃ᵢ² (Yᵢ − mᵢ)² + (mᵢ − μ̂)²}`.
pub fn variance_hat(data: &Dataset, tilde_pi: &[f64], fitted: &[f64], mu_hat: f64) -> f64 {
    let total: f64 = (0..data.n())
        .map(|i| {
            let r = data.y()[i] - fitted[i];
            let c = fitted[i] - mu_hat;
            data.t()[i] / (tilde_pi[i] * tilde_pi[i]) * r * r + c * c
        })
        .sum();
    total / data.n() as f64
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// `estimate ± z_{1−η/2} √(V̂/n)`.
pub fn confidence_interval(estimate: f64, v_hat: f64, n: usize, eta: f64) -> Result<(f64, f64)> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::InvalidLevel(eta));
    }
    if !(v_hat >= 0.0) || n == 0 {
        return Err(Error::InvalidInput(format!("variance {v_hat} with n = {n}")));
    }
    let half = normal_quantile(1.0 - eta / 2.0) * (v_hat / n as f64).sqrt();
    Ok((estimate - half, estimate + half))
}

/// Outcome working model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeModel {
    /// Weighted least squares; the point estimate is Horvitz–Thompson.
    #[default]
    Linear,
    /// Weighted penalized likelihood in `family`; the point estimate is AIPW.
    Glm(Family),
}

/// When the unweighted initial outcome fit of the GLM pipeline runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialOutcomeFit {
    /// Only when `w1 = bpp` needs its constants.
    #[default]
    WhenNeeded,
    Always,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorConfig {
    pub w1: PropensityWeightKind,
    pub w2: OutcomeWeight,
    pub link: Link,
    pub outcome: OutcomeModel,
    pub propensity_penalty: PenaltySpec,
    pub outcome_penalty: PenaltySpec,
    pub initial_outcome: InitialOutcomeFit,
    pub solver: SolverSettings,
    pub calibration: CalibrationSettings,
    pub zero_threshold: f64,
    /// Confidence level `1 − η`.
    pub level: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            w1: PropensityWeightKind::One,
            w2: OutcomeWeight::PsAdjusted,
            link: Link::Logistic,
            outcome: OutcomeModel::Linear,
            propensity_penalty: PenaltySpec::default(),
            outcome_penalty: PenaltySpec::default(),
            initial_outcome: InitialOutcomeFit::WhenNeeded,
            solver: SolverSettings::default(),
            calibration: CalibrationSettings::default(),
            zero_threshold: DEFAULT_ZERO_THRESHOLD,
            level: 0.95,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidLevel(1.0 - self.level));
        }
        if !(self.zero_threshold >= 0.0) {
            return Err(Error::InvalidInput("zero threshold must be nonnegative".into()));
        }
        for spec in [self.propensity_penalty, self.outcome_penalty] {
            if let PenaltySpec::Fixed { lambda } = spec {
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return Err(Error::InvalidInput(format!("penalty level {lambda} must be finite and nonnegative")));
                }
            }
        }
        self.solver.validate()
    }
}

/// Intermediate fits of one arm.
#[derive(Debug, Clone)]
pub struct FitArtifacts {
    pub propensity: PropensityFit,
    /// Unweighted initial outcome fit of the GLM pipeline, when it ran.
    pub initial_outcome: Option<OutcomeFit>,
    pub outcome: OutcomeFit,
    pub support: Support,
    pub gamma: Vec<f64>,
    pub tilde_beta: Vec<f64>,
    pub tilde_pi: Vec<f64>,
    /// Fitted regression values `mᵢ` used by the estimator and variance.
    pub fitted: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmDiagnostics {
    pub support_size: usize,
    pub balance_residual_inf_norm: f64,
    /// `|(1/n) Σ (Tᵢ/π̃ᵢ − 1)|`.
    pub normalization_residual: f64,
    pub min_pi: f64,
    pub max_pi: f64,
    pub sample_bounded: bool,
    pub lambda_ps: f64,
    pub lambda_outcome: f64,
    pub propensity_kkt_residual: f64,
    pub outcome_kkt_residual: f64,
    pub propensity_converged: bool,
    pub outcome_converged: bool,
    pub calibration_converged: bool,
    pub calibration_iterations: usize,
}

/// Estimate of `E{Y(1)}` for the arm coded `T = 1`.
#[derive(Debug, Clone)]
pub struct ArmEstimate {
    pub mu: f64,
    pub variance: f64,
    pub ci: (f64, f64),
    pub level: f64,
    pub n: usize,
    pub diagnostics: ArmDiagnostics,
    pub artifacts: FitArtifacts,
}

impl ArmEstimate {
    /// `Tᵢ/π̃ᵢ (Yᵢ − mᵢ) + mᵢ`.
    pub fn contributions(&self, data: &Dataset) -> Vec<f64> {
        let a = &self.artifacts;
        (0..data.n())
            .map(|i| data.t()[i] / a.tilde_pi[i] * (data.y()[i] - a.fitted[i]) + a.fitted[i])
            .collect()
    }
}

/// Runs the pipeline for the arm coded `T = 1`: initial propensity fit,
/// weighted outcome fit, support extraction, balancing calibration, point
/// estimate, variance and confidence interval.
pub fn estimate_mu1(data: &Dataset, config: &EstimatorConfig) -> Result<ArmEstimate> {
    config.validate()?;
    let link = config.link;
    let (family, pipeline) = match config.outcome {
        OutcomeModel::Linear => (Family::Gaussian, Pipeline::Linear),
        OutcomeModel::Glm(f) => (f, Pipeline::Glm),
    };

    let needs_initial = pipeline == Pipeline::Glm
        && (config.w1 == PropensityWeightKind::Bpp || config.initial_outcome == InitialOutcomeFit::Always);
    let initial_outcome = if needs_initial {
        let ones = vec![1.0; data.n()];
        Some(fit_outcome_glm(data, family, &ones, &config.outcome_penalty, &config.solver)?)
    } else {
        None
    };
    let w1 = match config.w1 {
        PropensityWeightKind::Pi => PropensityWeight::Pi,
        PropensityWeightKind::One => PropensityWeight::One,
        PropensityWeightKind::Bpp => match &initial_outcome {
            Some(fit) => bpp_weight(
                data.linear_index(&fit.alpha)
                    .into_iter()
                    .map(|m| family.b_double_prime(m))
                    .collect(),
            ),
            None => bpp_weight(vec![1.0; data.n()]),
        },
    };

    let propensity = fit_initial_propensity(data, &w1, link, &config.propensity_penalty, &config.solver)?;
    let outcome = match pipeline {
        Pipeline::Linear => {
            fit_outcome_linear(data, &propensity, config.w2, link, &config.outcome_penalty, &config.solver)?
        }
        Pipeline::Glm => {
            let w2: Vec<f64> = data
                .linear_index(&propensity.beta_hat)
                .into_iter()
                .map(|u| config.w2.value(link, u))
                .collect();
            fit_outcome_glm(data, family, &w2, &config.outcome_penalty, &config.solver)?
        }
    };
    let support = extract_support(&outcome, config.zero_threshold, data.treated_count())?;
    let basis = basis_weights(data, &outcome, pipeline);
    let cal = calibrate(data, &support, &propensity.beta_hat, &basis, link, &config.calibration)?;

    let fitted = outcome.fitted_mean(data);
    let mu = match pipeline {
        Pipeline::Linear => horvitz_thompson(data, &cal.tilde_pi),
        Pipeline::Glm => aipw(data, &cal.tilde_pi, &fitted),
    };
    let variance = variance_hat(data, &cal.tilde_pi, &fitted, mu);
    let ci = confidence_interval(mu, variance, data.n(), 1.0 - config.level)?;

    let (lo, hi) = data
        .treated_rows()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
            (lo.min(data.y()[i]), hi.max(data.y()[i]))
        });
    let normalization_residual = ((0..data.n())
        .map(|i| data.t()[i] / cal.tilde_pi[i] - 1.0)
        .sum::<f64>()
        / data.n() as f64)
        .abs();
    let diagnostics = ArmDiagnostics {
        support_size: support.len(),
        balance_residual_inf_norm: cal.residual_inf,
        normalization_residual,
        min_pi: cal.tilde_pi.iter().copied().fold(f64::INFINITY, f64::min),
        max_pi: cal.tilde_pi.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        sample_bounded: lo <= mu && mu <= hi,
        lambda_ps: propensity.lambda,
        lambda_outcome: outcome.lambda,
        propensity_kkt_residual: propensity.gradient_residual,
        outcome_kkt_residual: outcome.kkt_residual,
        propensity_converged: propensity.converged,
        outcome_converged: outcome.converged,
        calibration_converged: cal.converged,
        calibration_iterations: cal.iterations,
    };
    Ok(ArmEstimate {
        mu,
        variance,
        ci,
        level: config.level,
        n: data.n(),
        diagnostics,
        artifacts: FitArtifacts {
            propensity,
            initial_outcome,
            outcome,
            support,
            gamma: cal.gamma,
            tilde_beta: cal.tilde_beta,
            tilde_pi: cal.tilde_pi,
            fitted,
        },
    })
}

/// Average treatment effect with both arms and the combined interval.
#[derive(Debug, Clone)]
pub struct EffectEstimate {
    pub treated: ArmEstimate,
    /// Pipeline run on the label-swapped sample; its `mu` estimates `E{Y(0)}`.
    pub control: ArmEstimate,
    pub ate: f64,
    /// `(1/n) Σᵢ ψ̂ᵢ²` of the estimated influence contributions.
    pub variance: f64,
    pub ci: (f64, f64),
    pub level: f64,
}

impl EffectEstimate {
    pub fn mu1(&self) -> f64 {
        self.treated.mu
    }

    pub fn mu0(&self) -> f64 {
        self.control.mu
    }
}

/// Runs [`estimate_mu1`] on `(T, Y)` and on `(1 − T, Y)` and combines the
/// arms through their influence contributions.
pub fn estimate_ate(data: &Dataset, config: &EstimatorConfig) -> Result<EffectEstimate> {
    config.validate()?;
    let swapped = data.swap_treatment();
    let (treated, control) = rayon::join(|| estimate_mu1(data, config), || estimate_mu1(&swapped, config));
    let (treated, control) = (treated?, control?);
    let ate = treated.mu - control.mu;
    let psi1 = treated.contributions(data);
    let psi0 = control.contributions(&swapped);
    let variance = psi1
        .iter()
        .zip(&psi0)
        .map(|(a, b)| {
            let r = a - b - ate;
            r * r
        })
        .sum::<f64>()
        / data.n() as f64;
    let ci = confidence_interval(ate, variance, data.n(), 1.0 - config.level)?;
    Ok(EffectEstimate {
        treated,
        control,
        ate,
        variance,
        ci,
        level: config.level,
    })
}
