//! Penalized outcome regressions within the treated group.

use ndarray::CowArray;

use crate::error::{Error, Result};
use crate::model::{Dataset, Family, Link, OutcomeWeight, INDEX_CLAMP};
use crate::optimize::{
    fit_penalized, select_rows, IndexLoss, IndexObjective, L1Penalty, PenaltyPath, PenaltySpec,
    SolverSettings,
};
use crate::propensity::PropensityFit;

/// `scale · Σ wᵢ (yᵢ − mᵢ)²` over treated rows.
#[derive(Debug, Clone)]
pub struct WeightedSquaredLoss {
    y: Vec<f64>,
    w: Vec<f64>,
    scale: f64,
}

impl IndexLoss for WeightedSquaredLoss {
    fn rows(&self) -> usize {
        self.y.len()
    }

    fn evaluate(&self, index: &[f64], deriv: Option<&mut [f64]>) -> f64 {
        let mut total = 0.0;
        match deriv {
            Some(deriv) => {
                for i in 0..index.len() {
                    let r = self.y[i] - index[i];
                    total += self.w[i] * r * r;
                    deriv[i] = -2.0 * self.scale * self.w[i] * r;
                }
            }
            None => {
                for i in 0..index.len() {
                    let r = self.y[i] - index[i];
                    total += self.w[i] * r * r;
                }
            }
        }
        total * self.scale
    }
}

/// Negated weighted log-likelihood `−scale · Σ wᵢ {yᵢmᵢ − b(mᵢ)}`.
#[derive(Debug, Clone)]
pub struct WeightedGlmLoss {
    family: Family,
    y: Vec<f64>,
    w: Vec<f64>,
    scale: f64,
}

impl IndexLoss for WeightedGlmLoss {
    fn rows(&self) -> usize {
        self.y.len()
    }

    fn evaluate(&self, index: &[f64], deriv: Option<&mut [f64]>) -> f64 {
        let f = self.family;
        let mut total = 0.0;
        for i in 0..index.len() {
            total -= self.w[i] * (self.y[i] * index[i] - f.b(index[i]));
        }
        if let Some(deriv) = deriv {
            for i in 0..index.len() {
                deriv[i] = -self.scale * self.w[i] * (self.y[i] - f.b_prime(index[i]));
            }
        }
        total * self.scale / f.dispersion()
    }

    fn saturated(&self, index: &[f64]) -> bool {
        match self.family {
            Family::Gaussian => false,
            _ => index.iter().any(|m| m.abs() > INDEX_CLAMP),
        }
    }
}

/// `L_n(α) = (1/n) Σᵢ Tᵢ w2ᵢ (Yᵢ − αᵀXᵢ)²`.
pub fn weighted_ls_loss(alpha: &[f64], data: &Dataset, w2: &[f64]) -> f64 {
    let index = data.linear_index(alpha);
    let total: f64 = (0..data.n())
        .map(|i| {
            let r = data.y()[i] - index[i];
            data.t()[i] * w2[i] * r * r
        })
        .sum();
    total / data.n() as f64
}

/// Gradient of [`weighted_ls_loss`].
pub fn weighted_ls_gradient(alpha: &[f64], data: &Dataset, w2: &[f64]) -> Vec<f64> {
    let index = data.linear_index(alpha);
    let mut grad = vec![0.0; data.d()];
    for i in 0..data.n() {
        let r = -2.0 * data.t()[i] * w2[i] * (data.y()[i] - index[i]);
        for (g, x) in grad.iter_mut().zip(data.row(i)) {
            *g += r * x;
        }
    }
    let n = data.n() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    grad
}

/// Score of the weighted log-likelihood,
/// `(1/n) Σᵢ Tᵢ w2ᵢ {Yᵢ − b'(αᵀXᵢ)} Xᵢ`.
pub fn glm_score(alpha: &[f64], data: &Dataset, family: Family, w2: &[f64]) -> Vec<f64> {
    let index = data.linear_index(alpha);
    let mut score = vec![0.0; data.d()];
    for i in 0..data.n() {
        let r = data.t()[i] * w2[i] * (data.y()[i] - family.b_prime(index[i]));
        for (s, x) in score.iter_mut().zip(data.row(i)) {
            *s += r * x;
        }
    }
    let n = data.n() as f64;
    score.iter_mut().for_each(|s| *s /= n / family.dispersion());
    score
}

/// Which loss an outcome fit minimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeLoss {
    LeastSquares,
    Likelihood,
}

#[derive(Debug, Clone)]
pub struct OutcomeFit {
    pub alpha: Vec<f64>,
    pub lambda: f64,
    /// `Gaussian` for least-squares fits.
    pub family: Family,
    pub loss: OutcomeLoss,
    pub weights_applied: Vec<f64>,
    pub converged: bool,
    pub kkt_residual: f64,
    /// Per-coordinate penalty scale (treated-row standard deviation, `0`
    /// for the intercept). Support thresholds are applied on this scale.
    pub scales: Vec<f64>,
    pub path: Option<PenaltyPath>,
}

impl OutcomeFit {
    /// `b'(α̃ᵀXᵢ)`, the fitted regression function on every row.
    pub fn fitted_mean(&self, data: &Dataset) -> Vec<f64> {
        data.linear_index(&self.alpha)
            .into_iter()
            .map(|m| self.family.b_prime(m))
            .collect()
    }
}

fn check_weights(w: &[f64], n: usize) -> Result<()> {
    if w.len() != n {
        return Err(Error::InvalidInput(format!("{} outcome weights for {n} rows", w.len())));
    }
    if let Some((i, v)) = w.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidInput(format!("outcome weight {v} at row {i} is not positive")));
    }
    Ok(())
}

/// Treated rows among `rows`, their outcomes and weights, and the `1/|rows|`
/// scale that makes the loss an average over all of `rows`.
fn treated_part(data: &Dataset, w: &[f64], rows: &[usize]) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>, f64)> {
    let treated: Vec<usize> = rows.iter().copied().filter(|&i| data.t()[i] == 1.0).collect();
    if treated.is_empty() {
        return Err(Error::DegenerateData("no treated rows in the outcome sample".into()));
    }
    let y = treated.iter().map(|&i| data.y()[i]).collect();
    let wt = treated.iter().map(|&i| w[i]).collect();
    Ok((treated, y, wt, 1.0 / rows.len() as f64))
}

fn penalty_on_treated(data: &Dataset) -> L1Penalty {
    let treated = select_rows(data.x().view(), &data.treated_rows());
    L1Penalty::standardized(treated.view(), &[0])
}

fn fit_with<L, F>(
    data: &Dataset,
    make_loss: F,
    penalty: &PenaltySpec,
    settings: &SolverSettings,
) -> Result<(crate::optimize::PenalizedFit, Vec<f64>)>
where
    L: IndexLoss,
    F: Fn(&[usize]) -> Result<(Vec<usize>, L)>,
{
    let weights = penalty_on_treated(data);
    let strata: Vec<bool> = data.t().iter().map(|&t| t == 1.0).collect();
    let fit = fit_penalized(
        |rows: &[usize]| {
            let (treated, loss) = make_loss(rows)?;
            IndexObjective::new(CowArray::from(select_rows(data.x().view(), &treated)), loss)
        },
        data.n(),
        &weights,
        penalty,
        &strata,
        settings,
    )?;
    let scales = weights
        .weights()
        .iter()
        .map(|&w| if w.is_finite() { w } else { 0.0 })
        .collect();
    Ok((fit, scales))
}

/// Step 2: penalized weighted least squares on the treated rows with
/// weights `w2(β̂ᵀXᵢ)`. The intercept is unpenalized.
pub fn fit_outcome_linear(
    data: &Dataset,
    propensity: &PropensityFit,
    w2: OutcomeWeight,
    link: Link,
    penalty: &PenaltySpec,
    settings: &SolverSettings,
) -> Result<OutcomeFit> {
    if data.treated_count() < 2 {
        return Err(Error::DegenerateData(format!(
            "{} treated rows; the outcome regression needs at least 2",
            data.treated_count()
        )));
    }
    let weights: Vec<f64> = data
        .linear_index(&propensity.beta_hat)
        .into_iter()
        .map(|u| w2.value(link, u))
        .collect();
    check_weights(&weights, data.n())?;
    let (fit, scales) = fit_with(
        data,
        |rows| {
            let (treated, y, w, scale) = treated_part(data, &weights, rows)?;
            Ok((treated, WeightedSquaredLoss { y, w, scale }))
        },
        penalty,
        settings,
    )?;
    Ok(OutcomeFit {
        alpha: fit.solution.x,
        lambda: fit.lambda,
        family: Family::Gaussian,
        loss: OutcomeLoss::LeastSquares,
        weights_applied: weights,
        converged: fit.converged,
        kkt_residual: fit.solution.kkt_residual,
        scales,
        path: fit.path,
    })
}

/// Penalized weighted maximum likelihood on the treated rows. All-ones
/// weights give the unweighted initial fit.
pub fn fit_outcome_glm(
    data: &Dataset,
    family: Family,
    w2: &[f64],
    penalty: &PenaltySpec,
    settings: &SolverSettings,
) -> Result<OutcomeFit> {
    for i in data.treated_rows() {
        family.check_outcome(data.y()[i])?;
    }
    check_weights(w2, data.n())?;
    if data.treated_count() < 2 {
        return Err(Error::DegenerateData(format!(
            "{} treated rows; the outcome regression needs at least 2",
            data.treated_count()
        )));
    }
    let (fit, scales) = fit_with(
        data,
        |rows| {
            let (treated, y, w, scale) = treated_part(data, w2, rows)?;
            Ok((treated, WeightedGlmLoss { family, y, w, scale }))
        },
        penalty,
        settings,
    )?;
    Ok(OutcomeFit {
        alpha: fit.solution.x,
        lambda: fit.lambda,
        family,
        loss: OutcomeLoss::Likelihood,
        weights_applied: w2.to_vec(),
        converged: fit.converged,
        kkt_residual: fit.solution.kkt_residual,
        scales,
        path: fit.path,
    })
}
