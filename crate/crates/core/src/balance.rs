//! Covariate-balancing recalibration of the propensity coefficients on the
//! support of the outcome fit.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Dataset, Link};
use crate::outcome::{OutcomeFit, OutcomeLoss};

/// Fitted propensities used for weighting are clamped to this distance
/// from {0, 1}.
pub const PI_FLOOR: f64 = 1e-6;

pub const DEFAULT_ZERO_THRESHOLD: f64 = 1e-8;

/// Selected outcome support. Index 0, the intercept, is always present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Support {
    indices: Vec<usize>,
}

impl Support {
    /// Sorts and deduplicates `indices` and adds the intercept.
    pub fn new(mut indices: Vec<usize>) -> Self {
        indices.push(0);
        indices.sort_unstable();
        indices.dedup();
        Self { indices }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, j: usize) -> bool {
        self.indices.binary_search(&j).is_ok()
    }
}

/// `S̃ = {0} ∪ {j : |α̃ⱼ| > threshold}` with a coefficient compared on its
/// scale `scales[j]` when one is given (a zero scale means unscaled).
pub fn support_from_coefficients(alpha: &[f64], scales: Option<&[f64]>, threshold: f64) -> Result<Support> {
    if !(threshold >= 0.0) {
        return Err(Error::InvalidInput(format!("zero threshold {threshold} must be nonnegative")));
    }
    let indices = (0..alpha.len())
        .filter(|&j| {
            let s = scales.map_or(1.0, |s| if s[j] > 0.0 { s[j] } else { 1.0 });
            alpha[j].abs() * s > threshold
        })
        .collect();
    Ok(Support::new(indices))
}

/// Support of an outcome fit on the standardized coefficient scale.
pub fn extract_support(fit: &OutcomeFit, threshold: f64, treated: usize) -> Result<Support> {
    let support = support_from_coefficients(&fit.alpha, Some(&fit.scales), threshold)?;
    if support.len() > treated {
        return Err(Error::OverSaturatedSupport {
            support: support.len(),
            treated,
        });
    }
    Ok(support)
}

/// Which covariate functions the calibration balances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    /// `fᵢ = X_{i,S̃}`.
    Linear,
    /// `fᵢ = b''(α̃ᵀXᵢ) X_{i,S̃}`.
    Glm,
}

/// Row multipliers `cᵢ` of the balance basis `fᵢ = cᵢ X_{i,S̃}`.
pub fn basis_weights(data: &Dataset, fit: &OutcomeFit, pipeline: Pipeline) -> Vec<f64> {
    match (pipeline, fit.loss) {
        (Pipeline::Linear, _) | (_, OutcomeLoss::LeastSquares) => vec![1.0; data.n()],
        (Pipeline::Glm, OutcomeLoss::Likelihood) => data
            .linear_index(&fit.alpha)
            .into_iter()
            .map(|m| fit.family.b_double_prime(m))
            .collect(),
    }
}

/// Balance equations of the calibration problem at a fixed support.
struct BalanceSystem<'a> {
    data: &'a Dataset,
    support: &'a [usize],
    link: Link,
    /// `β̂ᵀ_{S̃ᶜ} X_{i,S̃ᶜ}`.
    offset: Vec<f64>,
    basis: &'a [f64],
    /// `(1/n) Σᵢ fᵢ`, the part of the residual that does not depend on γ.
    basis_mean: Vec<f64>,
    treated: Vec<usize>,
}

impl<'a> BalanceSystem<'a> {
    fn new(data: &'a Dataset, support: &'a Support, beta_hat: &[f64], basis: &'a [f64], link: Link) -> Self {
        let mut off_beta = beta_hat.to_vec();
        for &j in support.indices() {
            off_beta[j] = 0.0;
        }
        let offset = data.linear_index(&off_beta);
        let n = data.n() as f64;
        let basis_mean = support
            .indices()
            .iter()
            .map(|&j| (0..data.n()).map(|i| basis[i] * data.x()[[i, j]]).sum::<f64>() / n)
            .collect();
        Self {
            data,
            support: support.indices(),
            link,
            offset,
            basis,
            basis_mean,
            treated: data.treated_rows(),
        }
    }

    fn index(&self, gamma: &[f64], i: usize) -> f64 {
        let x = self.data.x();
        self.offset[i] + self.support.iter().zip(gamma).map(|(&j, g)| x[[i, j]] * g).sum::<f64>()
    }

    fn residual(&self, gamma: &[f64]) -> Vec<f64> {
        let n = self.data.n() as f64;
        let x = self.data.x();
        let mut g = vec![0.0; self.support.len()];
        for &i in &self.treated {
            let w = self.link.inv_pi(self.index(gamma, i)) * self.basis[i];
            for (gk, &j) in g.iter_mut().zip(self.support) {
                *gk += w * x[[i, j]];
            }
        }
        g.iter_mut().zip(&self.basis_mean).for_each(|(gk, m)| *gk = *gk / n - m);
        g
    }

    /// `∂g/∂γ = −(1/n) Σᵢ Tᵢ π'/π² fᵢ X_{i,S̃}ᵀ`.
    fn jacobian(&self, gamma: &[f64]) -> DMatrix<f64> {
        let s = self.support.len();
        let n = self.data.n() as f64;
        let x = self.data.x();
        let mut jac = DMatrix::zeros(s, s);
        for &i in &self.treated {
            let w = -self.link.pi_prime_over_pi_sq(self.index(gamma, i)) * self.basis[i] / n;
            for (a, &ja) in self.support.iter().enumerate() {
                let wa = w * x[[i, ja]];
                for (b, &jb) in self.support.iter().enumerate() {
                    jac[(a, b)] += wa * x[[i, jb]];
                }
            }
        }
        jac
    }
}

/// `g_n(γ) = (1/n) Σᵢ {Tᵢ/π(γᵀX_{i,S̃} + β̂ᵀ_{S̃ᶜ}X_{i,S̃ᶜ}) − 1} fᵢ` with
/// `fᵢ = basis[i] · X_{i,S̃}`.
pub fn balance_residual(
    gamma: &[f64],
    data: &Dataset,
    support: &Support,
    beta_hat: &[f64],
    basis: &[f64],
    link: Link,
) -> Vec<f64> {
    let n = data.n() as f64;
    let mut off_beta = beta_hat.to_vec();
    for &j in support.indices() {
        off_beta[j] = 0.0;
    }
    let offset = data.linear_index(&off_beta);
    let mut g = vec![0.0; support.len()];
    for i in 0..data.n() {
        let u = offset[i]
            + support
                .indices()
                .iter()
                .zip(gamma)
                .map(|(&j, c)| data.x()[[i, j]] * c)
                .sum::<f64>();
        let r = (data.t()[i] / link.pi(u) - 1.0) * basis[i];
        for (gk, &j) in g.iter_mut().zip(support.indices()) {
            *gk += r * data.x()[[i, j]];
        }
    }
    g.iter_mut().for_each(|v| *v /= n);
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationSettings {
    pub max_iterations: usize,
    /// Stop once `‖g_n‖∞` is at most this.
    pub tolerance: f64,
    pub initial_damping: f64,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tolerance: 1e-10,
            initial_damping: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub gamma: Vec<f64>,
    /// `γ̃` on the support, `β̂` elsewhere.
    pub tilde_beta: Vec<f64>,
    /// `π(β̃ᵀXᵢ)` clamped to `[PI_FLOOR, 1 − PI_FLOOR]`.
    pub tilde_pi: Vec<f64>,
    pub residual_norm: f64,
    pub residual_inf: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solves the exactly identified balance equations `g_n(γ) = 0` by
/// Levenberg–Marquardt starting from `β̂_{S̃}`. Failure to reach the
/// tolerance is reported through `converged = false`, not as an error.
pub fn calibrate(
    data: &Dataset,
    support: &Support,
    beta_hat: &[f64],
    basis: &[f64],
    link: Link,
    settings: &CalibrationSettings,
) -> Result<CalibrationResult> {
    if support.len() > data.treated_count() {
        return Err(Error::OverSaturatedSupport {
            support: support.len(),
            treated: data.treated_count(),
        });
    }
    if beta_hat.len() != data.d() || basis.len() != data.n() {
        return Err(Error::InvalidInput("calibration inputs have inconsistent dimensions".into()));
    }
    let system = BalanceSystem::new(data, support, beta_hat, basis, link);
    let s = support.len();
    let mut gamma: Vec<f64> = support.indices().iter().map(|&j| beta_hat[j]).collect();
    let mut g = system.residual(&gamma);
    let mut cost = norm_sq(&g);
    let mut mu = settings.initial_damping;
    let mut iterations = 0;
    while iterations < settings.max_iterations && !(inf_norm(&g) <= settings.tolerance) {
        iterations += 1;
        let jac = system.jacobian(&gamma);
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let rhs = -(&jt * DVector::from_column_slice(&g));
        let mut improved = false;
        // Raise the damping until the step reduces ‖g‖².
        for _ in 0..60 {
            let mut a = jtj.clone();
            for k in 0..s {
                a[(k, k)] += mu * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&rhs)) else {
                mu *= 10.0;
                continue;
            };
            let trial: Vec<f64> = gamma.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let g_trial = system.residual(&trial);
            let c_trial = norm_sq(&g_trial);
            if c_trial.is_finite() && c_trial < cost {
                gamma = trial;
                g = g_trial;
                cost = c_trial;
                mu = (mu / 10.0).max(1e-15);
                improved = true;
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    let residual_inf = inf_norm(&g);
    let mut tilde_beta = beta_hat.to_vec();
    for (&j, &c) in support.indices().iter().zip(&gamma) {
        tilde_beta[j] = c;
    }
    let tilde_pi = data
        .linear_index(&tilde_beta)
        .into_iter()
        .map(|u| link.pi(u).clamp(PI_FLOOR, 1.0 - PI_FLOOR))
        .collect();
    Ok(CalibrationResult {
        gamma,
        tilde_beta,
        tilde_pi,
        residual_norm: cost.sqrt(),
        residual_inf,
        iterations,
        converged: residual_inf <= settings.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn support_examples() {
        let s = support_from_coefficients(&[0.5, 0.0, -1e-12], None, 1e-8).unwrap();
        assert_eq!(s.indices(), &[0]);
        let s = support_from_coefficients(&[0.0, 2.0, -3.0], None, 1e-8).unwrap();
        assert_eq!(s.indices(), &[0, 1, 2]);
        let s = support_from_coefficients(&[0.0; 4], None, 1e-8).unwrap();
        assert_eq!(s.indices(), &[0]);
        assert!(support_from_coefficients(&[0.0], None, -1.0).is_err());
    }

    #[test]
    fn two_row_residual() {
        let data = Dataset::new(array![[1.0], [1.0]], vec![1.0, 0.0], vec![0.0; 2], vec!["1".into()]).unwrap();
        let s = Support::new(vec![]);
        for gamma in [-1.0, 0.0, 0.7] {
            let g = balance_residual(&[gamma], &data, &s, &[0.0], &[1.0, 1.0], Link::Logistic);
            assert_abs_diff_eq!(g[0], 0.5 * (1.0 / Link::Logistic.pi(gamma) - 2.0), epsilon = 1e-15);
        }
        let cal = calibrate(&data, &s, &[0.9], &[1.0, 1.0], Link::Logistic, &Default::default()).unwrap();
        assert!(cal.converged);
        assert_abs_diff_eq!(cal.gamma[0], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn intercept_only_calibration_hits_logit_of_share() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 50;
        let x = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
        let t: Vec<f64> = (0..n).map(|i| if i < 20 { 1.0 } else { 0.0 }).collect();
        let data = Dataset::from_covariates(&x, t, vec![0.0; n], vec!["a".into(), "b".into()]).unwrap();
        let s = Support::new(vec![]);
        let cal = calibrate(&data, &s, &[1.3, 0.0, 0.0], &vec![1.0; n], Link::Logistic, &Default::default()).unwrap();
        assert!(cal.converged);
        assert_abs_diff_eq!(cal.gamma[0], (0.4f64 / 0.6).ln(), epsilon = 1e-9);
        assert_eq!(&cal.tilde_beta[1..], &[0.0, 0.0]);
    }

    #[test]
    fn keeps_off_support_coefficients_and_balances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 200;
        let x = Array2::from_shape_fn((n, 4), |_| rng.random_range(-1.0..1.0));
        let t: Vec<f64> = (0..n)
            .map(|i| (rng.random::<f64>() < Link::Logistic.pi(0.5 * x[[i, 0]] - 0.2)) as u8 as f64)
            .collect();
        let data = Dataset::from_covariates(&x, t, vec![0.0; n], (0..4).map(|j| j.to_string()).collect()).unwrap();
        let beta_hat = [0.1, 0.3, -0.123456789, 0.0, 0.2];
        let s = Support::new(vec![1, 3]);
        let basis: Vec<f64> = (0..n).map(|i| 0.5 + x[[i, 1]].abs()).collect();
        let cal = calibrate(&data, &s, &beta_hat, &basis, Link::Logistic, &Default::default()).unwrap();
        assert!(cal.converged);
        assert_eq!(cal.tilde_beta[2].to_bits(), beta_hat[2].to_bits());
        assert_eq!(cal.tilde_beta[4].to_bits(), beta_hat[4].to_bits());
        let g = balance_residual(&cal.gamma, &data, &s, &beta_hat, &basis, Link::Logistic);
        assert!(g.iter().all(|v| v.abs() <= 1e-10));
    }
}
