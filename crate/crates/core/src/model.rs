//! Link functions, weight functions, exponential-family cumulants and the
//! observational [`Dataset`] shared by every fitting stage.

use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear indices are clamped to `[-INDEX_CLAMP, INDEX_CLAMP]` before the
/// link is evaluated. `pi(±30)` is within 1e-13 of {0, 1}.
pub const INDEX_CLAMP: f64 = 30.0;

#[inline]
pub(crate) fn clamp_index(u: f64) -> f64 {
    u.clamp(-INDEX_CLAMP, INDEX_CLAMP)
}

/// `log(1 + e^u)` without overflow.
#[inline]
pub fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Propensity link `π(u)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Link {
    #[default]
    Logistic,
}

impl Link {
    pub fn pi(self, u: f64) -> f64 {
        match self {
            Link::Logistic => sigmoid(clamp_index(u)),
        }
    }

    pub fn pi_prime(self, u: f64) -> f64 {
        match self {
            Link::Logistic => {
                let p = sigmoid(clamp_index(u));
                p * (1.0 - p)
            }
        }
    }

    /// `1 / π(u)`, evaluated without forming the reciprocal of a tiny number.
    pub fn inv_pi(self, u: f64) -> f64 {
        match self {
            Link::Logistic => 1.0 + (-clamp_index(u)).exp(),
        }
    }

    /// `π'(u) / π(u)²`, which is also `-d/du [1/π(u)]`.
    pub fn pi_prime_over_pi_sq(self, u: f64) -> f64 {
        match self {
            Link::Logistic => (-clamp_index(u)).exp(),
        }
    }
}

impl FromStr for Link {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" | "logit" => Ok(Link::Logistic),
            other => Err(Error::UnsupportedLink(other.to_string())),
        }
    }
}

/// Selector for the propensity weight `w1`, as it appears in configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropensityWeightKind {
    /// `w1(u) = π(u)`: the logistic quasi-likelihood.
    Pi,
    /// `w1(u) = 1`: the covariate balancing loss.
    #[default]
    One,
    /// `w1(u, v) = b''(u)`, frozen per observation from an outcome fit.
    Bpp,
}

impl FromStr for PropensityWeightKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pi" => Ok(Self::Pi),
            "one" => Ok(Self::One),
            "bpp" => Ok(Self::Bpp),
            other => Err(Error::InvalidInput(format!("unknown w1 selector '{other}'"))),
        }
    }
}

/// Propensity weight `w1` with its per-observation constants resolved.
#[derive(Debug, Clone, PartialEq)]
pub enum PropensityWeight {
    Pi,
    One,
    /// One positive constant `b''(α̂ᵀXᵢ)` per observation.
    Bpp(Arc<Vec<f64>>),
}

impl PropensityWeight {
    pub fn kind(&self) -> PropensityWeightKind {
        match self {
            PropensityWeight::Pi => PropensityWeightKind::Pi,
            PropensityWeight::One => PropensityWeightKind::One,
            PropensityWeight::Bpp(_) => PropensityWeightKind::Bpp,
        }
    }

    /// Weight for observation `i` at index `u`.
    #[inline]
    pub fn value(&self, link: Link, i: usize, u: f64) -> f64 {
        match self {
            PropensityWeight::Pi => link.pi(u),
            PropensityWeight::One => 1.0,
            PropensityWeight::Bpp(c) => c[i],
        }
    }
}

/// Outcome weight `w2`, applied as `w2(β̂ᵀXᵢ)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeWeight {
    One,
    InvPi,
    /// `π'(u)/π²(u)`, the propensity score adjusted least squares weight.
    #[default]
    PsAdjusted,
}

impl OutcomeWeight {
    pub fn value(self, link: Link, u: f64) -> f64 {
        match self {
            OutcomeWeight::One => 1.0,
            OutcomeWeight::InvPi => link.inv_pi(u),
            OutcomeWeight::PsAdjusted => link.pi_prime_over_pi_sq(u),
        }
    }
}

impl FromStr for OutcomeWeight {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one" => Ok(Self::One),
            "inv-pi" => Ok(Self::InvPi),
            "ps-adjusted" => Ok(Self::PsAdjusted),
            other => Err(Error::InvalidInput(format!("unknown w2 selector '{other}'"))),
        }
    }
}

/// Exponential family of the outcome working model. The dispersion `a(φ)`
/// is fixed at one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "name")]
pub enum Family {
    Gaussian,
    Binomial { trials: u32 },
    Poisson,
}

impl Family {
    /// Cumulant `b(u)`.
    pub fn b(self, u: f64) -> f64 {
        match self {
            Family::Gaussian => 0.5 * u * u,
            Family::Binomial { trials } => f64::from(trials) * softplus(u),
            Family::Poisson => u.exp(),
        }
    }

    /// Mean function `b'(u)`.
    pub fn b_prime(self, u: f64) -> f64 {
        match self {
            Family::Gaussian => u,
            Family::Binomial { trials } => f64::from(trials) * sigmoid(u),
            Family::Poisson => u.exp(),
        }
    }

    /// Variance function `b''(u)`.
    pub fn b_double_prime(self, u: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Binomial { trials } => {
                let p = sigmoid(u);
                f64::from(trials) * p * (1.0 - p)
            }
            Family::Poisson => u.exp(),
        }
    }

    pub fn dispersion(self) -> f64 {
        1.0
    }

    /// Checks that `y` lies in the family's support.
    pub fn check_outcome(self, y: f64) -> Result<()> {
        let ok = match self {
            Family::Gaussian => y.is_finite(),
            Family::Binomial { trials } => {
                y.fract() == 0.0 && (0.0..=f64::from(trials)).contains(&y)
            }
            Family::Poisson => y.fract() == 0.0 && y >= 0.0 && y.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidOutcome(format!("{y} is not a valid {self} outcome")))
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Family::Gaussian => write!(f, "gaussian"),
            Family::Binomial { trials } => write!(f, "binomial:{trials}"),
            Family::Poisson => write!(f, "poisson"),
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    /// Parses `gaussian`, `poisson` or `binomial:<m>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Family::Gaussian),
            "poisson" => Ok(Family::Poisson),
            _ => {
                let trials = s
                    .strip_prefix("binomial:")
                    .and_then(|m| m.parse::<u32>().ok())
                    .filter(|&m| m >= 1)
                    .ok_or_else(|| Error::InvalidInput(format!("unknown family '{s}'")))?;
                Ok(Family::Binomial { trials })
            }
        }
    }
}

/// Observed `(T, Y, X)` sample. Column 0 of the design is the intercept.
#[derive(Debug, Clone)]
pub struct Dataset {
    x: Arc<Array2<f64>>,
    t: Arc<Vec<f64>>,
    y: Arc<Vec<f64>>,
    names: Arc<Vec<String>>,
}

impl Dataset {
    /// Builds a dataset from a design that already carries the intercept in
    /// column 0. `names` has one entry per design column.
    pub fn new(x: Array2<f64>, t: Vec<f64>, y: Vec<f64>, names: Vec<String>) -> Result<Self> {
        let (n, d) = x.dim();
        if n == 0 || d == 0 {
            return Err(Error::InvalidInput("empty design matrix".into()));
        }
        if t.len() != n || y.len() != n {
            return Err(Error::InvalidInput(format!(
                "design has {n} rows but T has {} and Y has {}",
                t.len(),
                y.len()
            )));
        }
        if names.len() != d {
            return Err(Error::InvalidInput(format!(
                "{} column names for {d} design columns",
                names.len()
            )));
        }
        if x.column(0).iter().any(|&v| v != 1.0) {
            return Err(Error::InvalidInput("column 0 must be the intercept (all ones)".into()));
        }
        if let Some((i, _)) = t.iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidInput(format!("treatment at row {i} is not 0/1")));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite entry in X or Y".into()));
        }
        let treated = t.iter().filter(|&&v| v == 1.0).count();
        if treated == 0 || treated == n {
            return Err(Error::DegenerateData(format!(
                "{treated} treated of {n} observations; need both arms"
            )));
        }
        Ok(Self {
            x: Arc::new(x),
            t: Arc::new(t),
            y: Arc::new(y),
            names: Arc::new(names),
        })
    }

    /// Prepends the intercept column to a covariate matrix.
    pub fn from_covariates(
        covariates: &Array2<f64>,
        t: Vec<f64>,
        y: Vec<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let (n, p) = covariates.dim();
        let mut x = Array2::ones((n, p + 1));
        x.slice_mut(ndarray::s![.., 1..]).assign(covariates);
        let mut names = Vec::with_capacity(p + 1);
        names.push("(intercept)".to_string());
        names.extend(covariate_names);
        Self::new(x, t, y, names)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.x.row(i)
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn treated_count(&self) -> usize {
        self.t.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn treated_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.t[i] == 1.0).collect()
    }

    /// Same sample with `T ↦ 1 − T`; the design is shared, not copied.
    pub fn swap_treatment(&self) -> Self {
        Self {
            x: Arc::clone(&self.x),
            t: Arc::new(self.t.iter().map(|v| 1.0 - v).collect()),
            y: Arc::clone(&self.y),
            names: Arc::clone(&self.names),
        }
    }

    /// Same design and treatment with a replaced outcome vector.
    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.n() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("replacement outcome has wrong length or non-finite values".into()));
        }
        Ok(Self {
            x: Arc::clone(&self.x),
            t: Arc::clone(&self.t),
            y: Arc::new(y),
            names: Arc::clone(&self.names),
        })
    }

    /// Linear index `Xᵢᵀβ` for every row.
    pub fn linear_index(&self, beta: &[f64]) -> Vec<f64> {
        let nz: Vec<(usize, f64)> = beta
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, b)| *b != 0.0)
            .collect();
        self.x
            .rows()
            .into_iter()
            .map(|row| nz.iter().map(|&(j, b)| row[j] * b).sum())
            .collect()
    }
}

/// Integrand of the generalized quasi-likelihood, `{t/π(u) − 1}·w1`, where
/// `w1` is `π(u)`, `1` or the per-observation constant `c`.
pub fn quasi_integrand(u: f64, t: f64, link: Link, w1: PropensityWeightKind, c: f64) -> f64 {
    let balance = t * link.inv_pi(u) - 1.0;
    match w1 {
        PropensityWeightKind::Pi => balance * link.pi(u),
        PropensityWeightKind::One => balance,
        PropensityWeightKind::Bpp => balance * c,
    }
}

/// Per-observation primitive `∫₀^m {t/π(u) − 1} w1(u) du` for the logistic
/// link, with `c` the constant weight (ignored unless `w1` is `Bpp`).
#[inline]
pub(crate) fn quasi_primitive(m: f64, t: f64, w1: PropensityWeightKind, c: f64) -> f64 {
    match w1 {
        PropensityWeightKind::Pi => t * m - softplus(m) + std::f64::consts::LN_2,
        PropensityWeightKind::One => (t - 1.0) * m - t * (-m).exp() + t,
        PropensityWeightKind::Bpp => c * ((t - 1.0) * m - t * (-m).exp() + t),
    }
}

/// Derivative of [`quasi_primitive`] in `m`.
#[inline]
pub(crate) fn quasi_primitive_deriv(m: f64, t: f64, w1: PropensityWeightKind, c: f64) -> f64 {
    match w1 {
        PropensityWeightKind::Pi => t - sigmoid(m),
        PropensityWeightKind::One => t * (1.0 + (-m).exp()) - 1.0,
        PropensityWeightKind::Bpp => c * (t * (1.0 + (-m).exp()) - 1.0),
    }
}

/// Closed form of the generalized quasi-likelihood `Q_n(β)` for the
/// logistic link.
pub fn closed_form_q(beta: &[f64], data: &Dataset, w1: &PropensityWeight, link: Link) -> f64 {
    let Link::Logistic = link;
    let index = data.linear_index(beta);
    let kind = w1.kind();
    let total: f64 = index
        .iter()
        .zip(data.t())
        .enumerate()
        .map(|(i, (&m, &t))| {
            let c = match w1 {
                PropensityWeight::Bpp(c) => c[i],
                _ => 1.0,
            };
            quasi_primitive(m, t, kind, c)
        })
        .sum();
    total / data.n() as f64
}
