//! Initial penalized propensity fit: `β̂ = argmin −Q_n(β) + λ‖β‖₁`.

use std::sync::Arc;

use ndarray::{ArrayView2, CowArray};

use crate::error::{Error, Result};
use crate::model::{
    quasi_primitive, quasi_primitive_deriv, Dataset, Link, PropensityWeight, PropensityWeightKind,
    INDEX_CLAMP,
};
use crate::optimize::{
    fit_penalized, select_rows, IndexLoss, IndexObjective, L1Penalty, PenaltyPath, PenaltySpec,
    SolverSettings,
};

/// Negated generalized quasi-likelihood as a row-separable loss.
#[derive(Debug, Clone)]
pub struct QuasiLikelihoodLoss {
    t: Vec<f64>,
    kind: PropensityWeightKind,
    constants: Option<Vec<f64>>,
    scale: f64,
}

impl QuasiLikelihoodLoss {
    /// Loss over `rows` of `data`, normalized by the number of rows.
    pub fn on_rows(data: &Dataset, w1: &PropensityWeight, rows: &[usize]) -> Result<Self> {
        let t: Vec<f64> = rows.iter().map(|&i| data.t()[i]).collect();
        let treated = t.iter().filter(|&&v| v == 1.0).count();
        if treated == 0 || treated == t.len() {
            return Err(Error::DegenerateData(format!(
                "{treated} treated among {} rows; the quasi-likelihood needs both arms",
                t.len()
            )));
        }
        let constants = match w1 {
            PropensityWeight::Bpp(c) => {
                if c.len() != data.n() {
                    return Err(Error::InvalidInput("bpp weight needs one constant per observation".into()));
                }
                if let Some(bad) = c.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
                    return Err(Error::InvalidInput(format!("bpp weight constant {bad} is not positive")));
                }
                Some(rows.iter().map(|&i| c[i]).collect())
            }
            _ => None,
        };
        Ok(Self {
            scale: 1.0 / rows.len() as f64,
            t,
            kind: w1.kind(),
            constants,
        })
    }

    #[inline]
    fn constant(&self, i: usize) -> f64 {
        self.constants.as_ref().map_or(1.0, |c| c[i])
    }
}

impl IndexLoss for QuasiLikelihoodLoss {
    fn rows(&self) -> usize {
        self.t.len()
    }

    fn evaluate(&self, index: &[f64], deriv: Option<&mut [f64]>) -> f64 {
        let mut total = 0.0;
        match deriv {
            Some(deriv) => {
                for (i, (&m, &t)) in index.iter().zip(&self.t).enumerate() {
                    let c = self.constant(i);
                    total -= quasi_primitive(m, t, self.kind, c);
                    deriv[i] = -self.scale * quasi_primitive_deriv(m, t, self.kind, c);
                }
            }
            None => {
                for (i, (&m, &t)) in index.iter().zip(&self.t).enumerate() {
                    total -= quasi_primitive(m, t, self.kind, self.constant(i));
                }
            }
        }
        total * self.scale
    }

    fn saturated(&self, index: &[f64]) -> bool {
        index.iter().any(|m| m.abs() > INDEX_CLAMP)
    }
}

/// Quasi-score `(1/n) Σᵢ {Tᵢ/π(βᵀXᵢ) − 1} w1ᵢ(βᵀXᵢ) Xᵢ`.
pub fn quasi_score(beta: &[f64], data: &Dataset, w1: &PropensityWeight, link: Link) -> Vec<f64> {
    quasi_score_raw(beta, data.x().view(), data.t(), w1, link)
}

/// [`quasi_score`] on a bare design and treatment vector, without the
/// two-arm requirement of [`Dataset`].
pub fn quasi_score_raw(
    beta: &[f64],
    x: ArrayView2<'_, f64>,
    t: &[f64],
    w1: &PropensityWeight,
    link: Link,
) -> Vec<f64> {
    let mut score = vec![0.0; x.ncols()];
    for (i, row) in x.rows().into_iter().enumerate() {
        let m: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
        let r = (t[i] / link.pi(m) - 1.0) * w1.value(link, i, m);
        for (s, v) in score.iter_mut().zip(row) {
            *s += r * v;
        }
    }
    let n = x.nrows() as f64;
    score.iter_mut().for_each(|s| *s /= n);
    score
}

/// Penalized objective `−Q_n` over `rows`, ready for the solver.
pub fn propensity_objective<'a>(
    data: &'a Dataset,
    w1: &PropensityWeight,
    rows: &[usize],
) -> Result<IndexObjective<'a, QuasiLikelihoodLoss>> {
    let loss = QuasiLikelihoodLoss::on_rows(data, w1, rows)?;
    let design = if rows.len() == data.n() && rows.iter().enumerate().all(|(k, &i)| k == i) {
        CowArray::from(data.x().view())
    } else {
        CowArray::from(select_rows(data.x().view(), rows))
    };
    IndexObjective::new(design, loss)
}

#[derive(Debug, Clone)]
pub struct PropensityFit {
    pub beta_hat: Vec<f64>,
    pub lambda: f64,
    pub converged: bool,
    /// Max-norm KKT residual of the returned coefficients.
    pub gradient_residual: f64,
    pub fitted_pi: Vec<f64>,
    pub weight: PropensityWeightKind,
    pub path: Option<PenaltyPath>,
}

/// Step 1: penalized maximization of the quasi-likelihood. The intercept is
/// unpenalized and every other column is penalized on its standard
/// deviation scale.
pub fn fit_initial_propensity(
    data: &Dataset,
    w1: &PropensityWeight,
    link: Link,
    penalty: &PenaltySpec,
    settings: &SolverSettings,
) -> Result<PropensityFit> {
    let weights = L1Penalty::standardized(data.x().view(), &[0]);
    let strata: Vec<bool> = data.t().iter().map(|&t| t == 1.0).collect();
    let fit = fit_penalized(
        |rows: &[usize]| propensity_objective(data, w1, rows),
        data.n(),
        &weights,
        penalty,
        &strata,
        settings,
    )?;
    let beta_hat = fit.solution.x;
    let fitted_pi = data.linear_index(&beta_hat).into_iter().map(|m| link.pi(m)).collect();
    Ok(PropensityFit {
        fitted_pi,
        lambda: fit.lambda,
        converged: fit.converged,
        gradient_residual: fit.solution.kkt_residual,
        weight: w1.kind(),
        beta_hat,
        path: fit.path,
    })
}

/// Per-observation `b''(α̂ᵀXᵢ)` constants for the `bpp` weight.
pub fn bpp_weight(constants: Vec<f64>) -> PropensityWeight {
    PropensityWeight::Bpp(Arc::new(constants))
}
