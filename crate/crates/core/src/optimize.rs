//! L1-penalized minimization of smooth convex objectives.
//!
//! The solver is an accelerated proximal gradient method (FISTA) with
//! backtracking, function-value momentum restarts and a KKT-based stopping
//! rule. Objectives that can be restricted to a subset of coordinates are
//! solved with a working-set outer loop: the inner solve runs on the active
//! coordinates and the full gradient is only formed to look for KKT
//! violations. Either way the returned point is certified against the
//! stationarity conditions of the full problem.
//!
//! Penalties are per-coordinate: `λ Σⱼ wⱼ |xⱼ|`. A weight of `0` leaves a
//! coordinate unpenalized, a positive weight scales `λ` (this is how
//! covariates are put on a unit-variance scale without copying the design),
//! and `f64::INFINITY` pins the coordinate at zero.

use ndarray::{Array2, ArrayView2, Axis, CowArray, Ix2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Proximal map of `t|·|`.
#[inline]
pub fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// A smooth convex function of a coefficient vector.
pub trait SmoothObjective {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64;

    /// Writes the gradient into `grad` and returns the value.
    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64;

    /// True when `x` has left the region where the objective is meaningful.
    /// The solver stops with [`Error::Saturated`] on such an iterate.
    fn saturated(&self, _x: &[f64]) -> bool {
        false
    }

    /// The objective as a function of `coords` only, all other coordinates
    /// held at zero. Returning `None` disables the working-set strategy.
    fn restrict(&self, _coords: &[usize]) -> Option<Box<dyn SmoothObjective + '_>> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverSettings {
    pub max_iterations: usize,
    /// Bound on the max-norm KKT residual at the returned point.
    pub tolerance: f64,
    pub initial_step: f64,
    /// Backtracking factor in (0, 1).
    pub shrink: f64,
    /// Keep the penalized objective of every accepted iterate.
    pub record_trace: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 10_000,
            tolerance: 1e-8,
            initial_step: 1.0,
            shrink: 0.5,
            record_trace: false,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidInput("solver tolerance must be positive".into()));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::InvalidInput("backtracking shrink factor must lie in (0, 1)".into()));
        }
        if !(self.initial_step > 0.0) || self.max_iterations == 0 {
            return Err(Error::InvalidInput("initial step and iteration cap must be positive".into()));
        }
        Ok(())
    }
}

/// Per-coordinate L1 penalty weights.
#[derive(Debug, Clone, PartialEq)]
pub struct L1Penalty {
    weights: Vec<f64>,
}

impl L1Penalty {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(Error::InvalidInput("penalty weights must be nonnegative".into()));
        }
        Ok(Self { weights })
    }

    /// Unit weight on masked coordinates, zero elsewhere.
    pub fn from_mask(mask: &[bool]) -> Self {
        Self {
            weights: mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Weights equal to the column standard deviations of `design` (over its
    /// rows), intercept-style `unpenalized` columns at zero. A penalized
    /// column with no variation is pinned at zero.
    pub fn standardized(design: ArrayView2<'_, f64>, unpenalized: &[usize]) -> Self {
        let n = design.nrows() as f64;
        let mut weights: Vec<f64> = design
            .axis_iter(Axis(1))
            .map(|col| {
                let mean = col.sum() / n;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    f64::INFINITY
                }
            })
            .collect();
        for &j in unpenalized {
            weights[j] = 0.0;
        }
        Self { weights }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn is_penalized(&self, j: usize) -> bool {
        self.weights[j] > 0.0 && self.weights[j].is_finite()
    }

    pub fn value(&self, x: &[f64], lambda: f64) -> f64 {
        x.iter()
            .zip(&self.weights)
            .filter(|(v, _)| **v != 0.0)
            .map(|(v, w)| lambda * w * v.abs())
            .sum()
    }

    fn subset(&self, coords: &[usize]) -> Self {
        Self {
            weights: coords.iter().map(|&j| self.weights[j]).collect(),
        }
    }

    #[inline]
    fn prox(&self, j: usize, z: f64, step_lambda: f64) -> f64 {
        let w = self.weights[j];
        if w == 0.0 {
            z
        } else if w.is_infinite() {
            0.0
        } else {
            soft_threshold(z, step_lambda * w)
        }
    }
}

/// Max-norm of the minimum-norm subgradient of `f + λ Σ wⱼ|xⱼ|` at `x`.
///
/// Penalized zero coordinates contribute `max(|gⱼ| − λwⱼ, 0)`, penalized
/// nonzero ones `|gⱼ + λwⱼ sign(xⱼ)|`, unpenalized ones `|gⱼ|`. Pinned
/// coordinates are skipped.
pub fn kkt_residual(x: &[f64], grad: &[f64], lambda: f64, penalty: &L1Penalty) -> f64 {
    x.iter()
        .zip(grad)
        .zip(penalty.weights())
        .map(|((&xj, &gj), &w)| {
            if w.is_infinite() {
                0.0
            } else if w == 0.0 {
                gj.abs()
            } else if xj == 0.0 {
                (gj.abs() - lambda * w).max(0.0)
            } else {
                (gj + lambda * w * xj.signum()).abs()
            }
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub kkt_residual: f64,
    /// Penalized objective at `x`.
    pub objective: f64,
    /// Penalized objective of each accepted iterate, when recorded.
    pub trace: Vec<f64>,
}

impl Solution {
    pub fn nonzero_count(&self) -> usize {
        self.x.iter().filter(|v| **v != 0.0).count()
    }
}

/// Minimizes `obj(x) + λ Σ wⱼ|xⱼ|` starting from `init`.
pub fn minimize_l1<O: SmoothObjective + ?Sized>(
    obj: &O,
    lambda: f64,
    penalty: &L1Penalty,
    init: &[f64],
    settings: &SolverSettings,
) -> Result<Solution> {
    settings.validate()?;
    let d = obj.dim();
    if init.len() != d || penalty.len() != d {
        return Err(Error::InvalidInput(format!(
            "dimension mismatch: objective {d}, init {}, penalty {}",
            init.len(),
            penalty.len()
        )));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidInput(format!("penalty level {lambda} must be finite and nonnegative")));
    }
    let mut x0 = init.to_vec();
    for (j, v) in x0.iter_mut().enumerate() {
        if penalty.weights[j].is_infinite() {
            *v = 0.0;
        }
    }
    if obj.restrict(&[]).is_some() {
        working_set(obj, lambda, penalty, x0, settings)
    } else {
        fista(obj, lambda, penalty, x0, settings)
    }
}

/// Relative size of objective changes treated as rounding noise.
pub const VALUE_NOISE: f64 = 1e-13;

fn fista<O: SmoothObjective + ?Sized>(
    obj: &O,
    lambda: f64,
    penalty: &L1Penalty,
    mut x: Vec<f64>,
    settings: &SolverSettings,
) -> Result<Solution> {
    let d = x.len();
    let mut grad_x = vec![0.0; d];
    let mut f_x = obj.value_and_gradient(&x, &mut grad_x);
    if !f_x.is_finite() || grad_x.iter().any(|g| !g.is_finite()) {
        return Err(Error::InvalidObjective);
    }
    let mut big_f_x = f_x + penalty.value(&x, lambda);
    let mut trace = Vec::new();
    if settings.record_trace {
        trace.push(big_f_x);
    }

    let mut y = x.clone();
    let mut grad_y = grad_x.clone();
    let mut f_y = f_x;
    let mut y_is_x = true;
    let mut momentum = 1.0_f64;
    let mut step = settings.initial_step;
    let mut z = vec![0.0; d];
    let mut grad_z = vec![0.0; d];
    let grow = settings.shrink.powf(-0.25);

    for iteration in 0..settings.max_iterations {
        let residual = kkt_residual(&x, &grad_x, lambda, penalty);
        if residual <= settings.tolerance {
            return Ok(Solution {
                x,
                iterations: iteration,
                kkt_residual: residual,
                objective: big_f_x,
                trace,
            });
        }

        if !y_is_x {
            f_y = obj.value_and_gradient(&y, &mut grad_y);
            if !f_y.is_finite() || grad_y.iter().any(|g| !g.is_finite()) {
                // Extrapolated point left the domain: drop the momentum.
                y.copy_from_slice(&x);
                grad_y.copy_from_slice(&grad_x);
                f_y = f_x;
                y_is_x = true;
                momentum = 1.0;
            }
        }

        step *= grow;
        let noise = VALUE_NOISE * f_y.abs().max(1.0);
        let mut f_z;
        loop {
            for j in 0..d {
                z[j] = penalty.prox(j, y[j] - step * grad_y[j], step * lambda);
            }
            f_z = obj.value_and_gradient(&z, &mut grad_z);
            let (mut lin, mut quad, mut curv) = (0.0, 0.0, 0.0);
            for j in 0..d {
                let dz = z[j] - y[j];
                lin += grad_y[j] * dz;
                quad += dz * dz;
                curv += (grad_z[j] - grad_y[j]) * dz;
            }
            let bound = f_y + lin + quad / (2.0 * step);
            let finite = f_z.is_finite() && grad_z.iter().all(|g| g.is_finite());
            // Once value differences sink into rounding noise, fall back to
            // the curvature along the step, which gradients resolve exactly.
            if finite && (f_z <= bound || (f_z <= bound + noise && curv <= quad / step)) {
                break;
            }
            step *= settings.shrink;
            if step < 1e-30 {
                return Err(Error::NotConverged {
                    iterations: iteration,
                    residual,
                    iterate: x,
                });
            }
        }

        let big_f_z = f_z + penalty.value(&z, lambda);
        if big_f_z > big_f_x + VALUE_NOISE * big_f_x.abs().max(1.0) {
            if y_is_x {
                // A proximal gradient step from x failed to descend: we are
                // at the floating-point floor of the objective.
                return Err(Error::NotConverged {
                    iterations: iteration,
                    residual,
                    iterate: x,
                });
            }
            y.copy_from_slice(&x);
            grad_y.copy_from_slice(&grad_x);
            f_y = f_x;
            y_is_x = true;
            momentum = 1.0;
            continue;
        }

        if obj.saturated(&z) {
            return Err(Error::Saturated);
        }
        f_x = f_z;
        let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let beta = (momentum - 1.0) / next_momentum;
        for j in 0..d {
            y[j] = z[j] + beta * (z[j] - x[j]);
        }
        y_is_x = beta == 0.0;
        if y_is_x {
            grad_y.copy_from_slice(&grad_z);
            f_y = f_x;
        }
        momentum = next_momentum;
        std::mem::swap(&mut x, &mut z);
        std::mem::swap(&mut grad_x, &mut grad_z);
        big_f_x = big_f_z;
        if settings.record_trace {
            trace.push(big_f_x);
        }
    }

    let residual = kkt_residual(&x, &grad_x, lambda, penalty);
    if residual <= settings.tolerance {
        return Ok(Solution {
            x,
            iterations: settings.max_iterations,
            kkt_residual: residual,
            objective: big_f_x,
            trace,
        });
    }
    Err(Error::NotConverged {
        iterations: settings.max_iterations,
        residual,
        iterate: x,
    })
}

fn working_set<O: SmoothObjective + ?Sized>(
    obj: &O,
    lambda: f64,
    penalty: &L1Penalty,
    mut x: Vec<f64>,
    settings: &SolverSettings,
) -> Result<Solution> {
    let d = x.len();
    let tol = settings.tolerance;
    let mut in_set = vec![false; d];
    for j in 0..d {
        let w = penalty.weights[j];
        in_set[j] = w.is_finite() && (w == 0.0 || x[j] != 0.0);
    }
    let mut grad: Vec<f64> = vec![0.0; d];
    let mut iterations = 0usize;
    let mut trace = Vec::new();
    let mut first = true;

    loop {
        if !first {
            // Penalized zero coordinates outside the set that violate KKT.
            let mut violators: Vec<(f64, usize)> = (0..d)
                .filter(|&j| !in_set[j] && penalty.weights[j].is_finite())
                .filter_map(|j| {
                    let excess = grad[j].abs() - lambda * penalty.weights[j];
                    (excess > tol).then_some((excess, j))
                })
                .collect();
            if violators.is_empty() {
                let residual = kkt_residual(&x, &grad, lambda, penalty);
                let objective = obj.value(&x) + penalty.value(&x, lambda);
                if residual <= tol {
                    return Ok(Solution {
                        x,
                        iterations,
                        kkt_residual: residual,
                        objective,
                        trace,
                    });
                }
                return Err(Error::NotConverged {
                    iterations,
                    residual,
                    iterate: x,
                });
            }
            violators.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let active = in_set.iter().filter(|&&b| b).count();
            for &(_, j) in violators.iter().take(active.max(10)) {
                in_set[j] = true;
            }
        }
        first = false;

        let coords: Vec<usize> = (0..d).filter(|&j| in_set[j]).collect();
        let remaining = settings.max_iterations.saturating_sub(iterations);
        if remaining == 0 {
            obj.value_and_gradient(&x, &mut grad);
            return Err(Error::NotConverged {
                iterations,
                residual: kkt_residual(&x, &grad, lambda, penalty),
                iterate: x,
            });
        }
        let sub_settings = SolverSettings {
            max_iterations: remaining,
            ..*settings
        };
        let sub_obj = obj
            .restrict(&coords)
            .expect("objective stopped supporting restriction");
        let sub_penalty = penalty.subset(&coords);
        let sub_init: Vec<f64> = coords.iter().map(|&j| x[j]).collect();
        let outcome = fista(sub_obj.as_ref(), lambda, &sub_penalty, sub_init, &sub_settings);
        let sub = match outcome {
            Ok(sub) => sub,
            Err(Error::NotConverged { iterations: it, iterate, .. }) => {
                for (k, &j) in coords.iter().enumerate() {
                    x[j] = iterate[k];
                }
                obj.value_and_gradient(&x, &mut grad);
                return Err(Error::NotConverged {
                    iterations: iterations + it,
                    residual: kkt_residual(&x, &grad, lambda, penalty),
                    iterate: x,
                });
            }
            Err(e) => return Err(e),
        };
        iterations += sub.iterations;
        if settings.record_trace {
            trace.extend(sub.trace);
        }
        for (k, &j) in coords.iter().enumerate() {
            x[j] = sub.x[k];
        }
        let f = obj.value_and_gradient(&x, &mut grad);
        if !f.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::InvalidObjective);
        }
    }
}

/// Row-separable loss of a linear index, `f(β) = scale · Σᵢ ℓᵢ(Xᵢᵀβ)`.
pub trait IndexLoss: Sync {
    fn rows(&self) -> usize;

    /// Returns the loss at the linear indices and, when `deriv` is given,
    /// writes `scale · ℓᵢ'(mᵢ)` into it.
    fn evaluate(&self, index: &[f64], deriv: Option<&mut [f64]>) -> f64;

    fn saturated(&self, _index: &[f64]) -> bool {
        false
    }
}

impl<L: IndexLoss + ?Sized> IndexLoss for &L {
    fn rows(&self) -> usize {
        (**self).rows()
    }

    fn evaluate(&self, index: &[f64], deriv: Option<&mut [f64]>) -> f64 {
        (**self).evaluate(index, deriv)
    }

    fn saturated(&self, index: &[f64]) -> bool {
        (**self).saturated(index)
    }
}

/// A smooth objective of the form `loss(X β)` for a dense design `X`.
pub struct IndexObjective<'a, L> {
    design: CowArray<'a, f64, Ix2>,
    loss: LossRef<'a, L>,
}

enum LossRef<'a, L> {
    Owned(L),
    Borrowed(&'a L),
}

impl<L> std::ops::Deref for LossRef<'_, L> {
    type Target = L;

    fn deref(&self) -> &L {
        match self {
            LossRef::Owned(l) => l,
            LossRef::Borrowed(l) => l,
        }
    }
}

impl<'a, L: IndexLoss> IndexObjective<'a, L> {
    pub fn new(design: impl Into<CowArray<'a, f64, Ix2>>, loss: L) -> Result<Self> {
        let design = design.into();
        if design.nrows() != loss.rows() {
            return Err(Error::InvalidInput(format!(
                "design has {} rows, loss has {}",
                design.nrows(),
                loss.rows()
            )));
        }
        let design = if design.is_standard_layout() {
            design
        } else {
            CowArray::from(design.as_standard_layout().into_owned())
        };
        Ok(Self {
            design,
            loss: LossRef::Owned(loss),
        })
    }

    pub fn loss(&self) -> &L {
        &self.loss
    }

    pub fn design(&self) -> ArrayView2<'_, f64> {
        self.design.view()
    }

    /// `X β`, skipping zero coefficients.
    pub fn index(&self, beta: &[f64]) -> Vec<f64> {
        linear_index(self.design.view(), beta)
    }
}

pub(crate) fn linear_index(design: ArrayView2<'_, f64>, beta: &[f64]) -> Vec<f64> {
    let d = design.ncols();
    let nz: Vec<usize> = (0..d).filter(|&j| beta[j] != 0.0).collect();
    let data = design
        .as_slice()
        .expect("design must be in standard layout");
    let mut out = Vec::with_capacity(design.nrows());
    if nz.len() * 3 > d {
        for row in data.chunks_exact(d) {
            out.push(row.iter().zip(beta).map(|(a, b)| a * b).sum());
        }
    } else {
        for row in data.chunks_exact(d) {
            out.push(nz.iter().map(|&j| row[j] * beta[j]).sum());
        }
    }
    out
}

impl<L: IndexLoss> SmoothObjective for IndexObjective<'_, L> {
    fn dim(&self) -> usize {
        self.design.ncols()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let index = self.index(x);
        self.loss.evaluate(&index, None)
    }

    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let index = self.index(x);
        let mut deriv = vec![0.0; index.len()];
        let value = self.loss.evaluate(&index, Some(&mut deriv));
        grad.iter_mut().for_each(|g| *g = 0.0);
        let d = self.design.ncols();
        let data = self.design.as_slice().expect("standard layout");
        for (row, &r) in data.chunks_exact(d).zip(&deriv) {
            if r != 0.0 {
                for (g, a) in grad.iter_mut().zip(row) {
                    *g += r * a;
                }
            }
        }
        value
    }

    fn saturated(&self, x: &[f64]) -> bool {
        self.loss.saturated(&self.index(x))
    }

    fn restrict(&self, coords: &[usize]) -> Option<Box<dyn SmoothObjective + '_>> {
        let sub = self.design.select(Axis(1), coords);
        Some(Box::new(IndexObjective {
            design: CowArray::from(sub.as_standard_layout().into_owned()),
            loss: LossRef::Borrowed(&*self.loss),
        }))
    }
}

/// Decreasing geometric grid from `lambda_max` to `ratio · lambda_max`.
pub fn geometric_grid(lambda_max: f64, len: usize, ratio: f64) -> Vec<f64> {
    if len == 1 {
        return vec![lambda_max];
    }
    let step = ratio.ln() / (len - 1) as f64;
    (0..len).map(|k| lambda_max * (step * k as f64).exp()).collect()
}

pub const DEFAULT_GRID_LEN: usize = 50;
pub const DEFAULT_GRID_RATIO: f64 = 1e-3;

/// Fit with every penalized coordinate held at zero, and the smallest `λ`
/// for which that fit is optimal.
pub fn null_fit<O: SmoothObjective + ?Sized>(
    obj: &O,
    penalty: &L1Penalty,
    settings: &SolverSettings,
) -> Result<(f64, Solution)> {
    let pinned = L1Penalty {
        weights: penalty
            .weights
            .iter()
            .map(|&w| if w == 0.0 { 0.0 } else { f64::INFINITY })
            .collect(),
    };
    let sol = minimize_l1(obj, 0.0, &pinned, &vec![0.0; obj.dim()], settings)?;
    let mut grad = vec![0.0; obj.dim()];
    obj.value_and_gradient(&sol.x, &mut grad);
    let lambda_max = (0..obj.dim())
        .filter(|&j| penalty.is_penalized(j))
        .map(|j| grad[j].abs() / penalty.weights[j])
        .fold(0.0, f64::max);
    Ok((lambda_max, sol))
}

/// Solutions along a decreasing grid with warm starts. The path stops at the
/// first grid point the solver fails on; the error is returned alongside the
/// solved prefix.
pub fn solve_path<O: SmoothObjective + ?Sized>(
    obj: &O,
    grid: &[f64],
    penalty: &L1Penalty,
    init: &[f64],
    settings: &SolverSettings,
) -> (Vec<Solution>, Option<Error>) {
    let mut out: Vec<Solution> = Vec::with_capacity(grid.len());
    let mut start = init.to_vec();
    for &lambda in grid {
        match minimize_l1(obj, lambda, penalty, &start, settings) {
            Ok(sol) => {
                start.clone_from(&sol.x);
                out.push(sol);
            }
            Err(e) => return (out, Some(e)),
        }
    }
    (out, None)
}

/// Fold labels for K-fold cross-validation, stratified by a boolean label so
/// every fold sees both classes whenever each class has at least K members.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    fold_of: Vec<usize>,
    folds: usize,
}

impl FoldAssignment {
    pub fn stratified(labels: &[bool], folds: usize, seed: u64) -> Result<Self> {
        if folds < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 folds, got {folds}")));
        }
        if labels.len() < folds {
            return Err(Error::InvalidInput(format!(
                "{} rows cannot fill {folds} folds",
                labels.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fold_of = vec![0; labels.len()];
        let mut offset = 0;
        for class in [true, false] {
            let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
            rows.shuffle(&mut rng);
            for (k, &i) in rows.iter().enumerate() {
                fold_of[i] = (offset + k) % folds;
            }
            offset = (offset + rows.len()) % folds;
        }
        Ok(Self { fold_of, folds })
    }

    pub fn folds(&self) -> usize {
        self.folds
    }

    pub fn fold_of(&self, row: usize) -> usize {
        self.fold_of[row]
    }

    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }

    pub fn test_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }
}

/// Cross-validation record over a penalty grid.
#[derive(Debug, Clone, Serialize)]
pub struct PenaltyPath {
    /// Strictly decreasing penalty levels.
    pub grid: Vec<f64>,
    pub folds: usize,
    /// Held-out loss, one row per fold; `+∞` at grid points not evaluated.
    pub heldout: Vec<Vec<f64>>,
    pub mean_loss: Vec<f64>,
    pub selected: usize,
}

impl PenaltyPath {
    pub fn selected_lambda(&self) -> f64 {
        self.grid[self.selected]
    }
}

/// Grid points after the running minimum of the mean held-out loss that
/// cross-validation evaluates before it stops descending the grid.
pub const CV_PATIENCE: usize = 10;

/// Tolerance for solutions that only feed cross-validation or warm starts.
pub const PATH_TOLERANCE: f64 = 1e-6;

fn path_settings(settings: &SolverSettings) -> SolverSettings {
    SolverSettings {
        tolerance: settings.tolerance.max(PATH_TOLERANCE),
        ..*settings
    }
}

/// Picks the grid element with the smallest average held-out loss; ties go
/// to the larger penalty.
///
/// `build` maps a set of rows to the objective restricted to those rows. The
/// held-out loss of a fold is the objective built on its test rows,
/// evaluated at the training solution. All folds descend the grid together
/// with warm starts; the descent stops once the mean held-out loss has not
/// improved for [`CV_PATIENCE`] grid points, or as soon as a fold's solver
/// fails. Grid points never reached hold `+∞`.
pub fn select_lambda_cv<O, B>(
    folds: &FoldAssignment,
    build: B,
    grid: &[f64],
    penalty: &L1Penalty,
    settings: &SolverSettings,
) -> Result<PenaltyPath>
where
    O: SmoothObjective,
    B: Fn(&[usize]) -> Result<O>,
{
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty penalty grid".into()));
    }
    if grid.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidInput("penalty grid must be strictly decreasing".into()));
    }
    let k = folds.folds();
    let mut splits = Vec::with_capacity(k);
    for fold in 0..k {
        let as_fold_error = |e: Error| match e {
            Error::DegenerateData(reason) => Error::DegenerateFold { fold, reason },
            other => other,
        };
        let train = build(&folds.train_rows(fold)).map_err(as_fold_error)?;
        let test = build(&folds.test_rows(fold)).map_err(as_fold_error)?;
        splits.push((train, test));
    }
    let inner = path_settings(settings);
    let mut starts: Vec<Vec<f64>> = splits.iter().map(|(train, _)| vec![0.0; train.dim()]).collect();
    let mut heldout = vec![vec![f64::INFINITY; grid.len()]; k];
    let mut mean_loss = vec![f64::INFINITY; grid.len()];
    let mut selected = 0;
    'grid: for (l, &lambda) in grid.iter().enumerate() {
        for (fold, (train, test)) in splits.iter().enumerate() {
            match minimize_l1(train, lambda, penalty, &starts[fold], &inner) {
                Ok(sol) => {
                    let v = test.value(&sol.x);
                    heldout[fold][l] = if v.is_nan() { f64::INFINITY } else { v };
                    starts[fold] = sol.x;
                }
                Err(_) => break 'grid,
            }
        }
        mean_loss[l] = heldout.iter().map(|row| row[l]).sum::<f64>() / k as f64;
        if mean_loss[l] < mean_loss[selected] {
            selected = l;
        }
        if l >= selected + CV_PATIENCE {
            break;
        }
    }
    if !mean_loss[selected].is_finite() {
        return Err(Error::NotConverged {
            iterations: 0,
            residual: f64::INFINITY,
            iterate: Vec::new(),
        });
    }
    Ok(PenaltyPath {
        grid: grid.to_vec(),
        folds: k,
        heldout,
        mean_loss,
        selected,
    })
}

/// How a penalty level is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum PenaltySpec {
    Fixed { lambda: f64 },
    CrossValidated { folds: usize, seed: u64 },
}

impl Default for PenaltySpec {
    fn default() -> Self {
        PenaltySpec::CrossValidated { folds: 5, seed: 0 }
    }
}

/// Final solution of a penalized fit and how its penalty was chosen.
#[derive(Debug, Clone)]
pub struct PenalizedFit {
    pub solution: Solution,
    pub lambda: f64,
    pub converged: bool,
    pub path: Option<PenaltyPath>,
}

/// Fits `build(all rows)` under `spec`. In cross-validated mode the grid runs
/// from the null-model `λ_max` down by [`DEFAULT_GRID_RATIO`], folds are
/// stratified on `strata`, and the full-data fit is obtained by walking the
/// grid down to the selected level. A final fit that stops short of the
/// tolerance is returned with `converged = false`.
pub fn fit_penalized<O, B>(
    build: B,
    rows: usize,
    penalty: &L1Penalty,
    spec: &PenaltySpec,
    strata: &[bool],
    settings: &SolverSettings,
) -> Result<PenalizedFit>
where
    O: SmoothObjective,
    B: Fn(&[usize]) -> Result<O>,
{
    let all: Vec<usize> = (0..rows).collect();
    let full = build(&all)?;
    let d = full.dim();
    let (lambda, outcome, path) = match *spec {
        PenaltySpec::Fixed { lambda } => {
            (lambda, minimize_l1(&full, lambda, penalty, &vec![0.0; d], settings), None)
        }
        PenaltySpec::CrossValidated { folds, seed } => {
            let (lambda_max, null) = null_fit(&full, penalty, settings)?;
            if !(lambda_max > 0.0) {
                let lambda = 0.0;
                let sol = minimize_l1(&full, lambda, penalty, &null.x, settings);
                (lambda, sol, None)
            } else {
                let grid = geometric_grid(lambda_max, DEFAULT_GRID_LEN, DEFAULT_GRID_RATIO);
                let assignment = FoldAssignment::stratified(strata, folds, seed)?;
                let cv = select_lambda_cv(&assignment, &build, &grid, penalty, settings)?;
                let (warm, _) = solve_path(&full, &grid[..cv.selected], penalty, &null.x, &path_settings(settings));
                let start = warm.last().map_or(null.x, |s| s.x.clone());
                let lambda = cv.selected_lambda();
                let sol = minimize_l1(&full, lambda, penalty, &start, settings);
                (lambda, sol, Some(cv))
            }
        }
    };
    match outcome {
        Ok(solution) => Ok(PenalizedFit {
            solution,
            lambda,
            converged: true,
            path,
        }),
        Err(Error::NotConverged {
            iterations,
            residual,
            iterate,
        }) if residual.is_finite() && iterate.len() == d => {
            let objective = full.value(&iterate) + penalty.value(&iterate, lambda);
            Ok(PenalizedFit {
                solution: Solution {
                    x: iterate,
                    iterations,
                    kkt_residual: residual,
                    objective,
                    trace: Vec::new(),
                },
                lambda,
                converged: false,
                path,
            })
        }
        Err(e) => Err(e),
    }
}

/// Rows `rows` of `design`, as an owned standard-layout matrix.
pub(crate) fn select_rows(design: ArrayView2<'_, f64>, rows: &[usize]) -> Array2<f64> {
    design.select(Axis(0), rows)
}
