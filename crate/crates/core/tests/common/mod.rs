//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use hdcbps::optimize::SmoothObjective;
use hdcbps::Dataset;
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut impl Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal))
}

/// `½‖Ax − b‖² / n`.
pub struct LeastSquares {
    pub a: Array2<f64>,
    pub b: Vec<f64>,
}

impl LeastSquares {
    pub fn random(rng: &mut impl Rng, n: usize, d: usize) -> Self {
        let a = normal_matrix(rng, n, d);
        let truth: Vec<f64> = (0..d).map(|j| if j % 2 == 0 { 1.5 / (j + 1) as f64 } else { 0.0 }).collect();
        let b = (0..n)
            .map(|i| (0..d).map(|j| a[[i, j]] * truth[j]).sum::<f64>() + 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { a, b }
    }

    fn residual(&self, x: &[f64]) -> Vec<f64> {
        (0..self.a.nrows())
            .map(|i| (0..x.len()).map(|j| self.a[[i, j]] * x[j]).sum::<f64>() - self.b[i])
            .collect()
    }
}

impl SmoothObjective for LeastSquares {
    fn dim(&self) -> usize {
        self.a.ncols()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let r = self.residual(x);
        0.5 * r.iter().map(|v| v * v).sum::<f64>() / self.a.nrows() as f64
    }

    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let r = self.residual(x);
        let n = self.a.nrows() as f64;
        for (j, g) in grad.iter_mut().enumerate() {
            *g = (0..r.len()).map(|i| self.a[[i, j]] * r[i]).sum::<f64>() / n;
        }
        0.5 * r.iter().map(|v| v * v).sum::<f64>() / n
    }
}

/// Cyclic coordinate descent for `½‖Ax − b‖²/n + λ Σ wⱼ|xⱼ|`, run until no
/// coordinate moves by more than `1e-13`.
pub fn coordinate_descent_lasso(a: &Array2<f64>, b: &[f64], lambda: f64, weights: &[f64]) -> Vec<f64> {
    let (n, d) = a.dim();
    let nf = n as f64;
    let mut x = vec![0.0; d];
    let mut r: Vec<f64> = b.to_vec();
    let col_sq: Vec<f64> = (0..d).map(|j| a.column(j).iter().map(|v| v * v).sum::<f64>() / nf).collect();
    for _ in 0..1_000_000 {
        let mut max_change: f64 = 0.0;
        for j in 0..d {
            let rho = (0..n).map(|i| a[[i, j]] * r[i]).sum::<f64>() / nf + col_sq[j] * x[j];
            let t = lambda * weights[j];
            let new = rho.signum() * (rho.abs() - t).max(0.0) / col_sq[j];
            let delta = new - x[j];
            if delta != 0.0 {
                for i in 0..n {
                    r[i] -= a[[i, j]] * delta;
                }
                x[j] = new;
            }
            max_change = max_change.max(delta.abs());
        }
        if max_change < 1e-13 {
            break;
        }
    }
    x
}

/// Stationarity violation of `x` for `f + λ Σ wⱼ|xⱼ|`, computed from scratch.
pub fn independent_kkt(grad: &[f64], x: &[f64], lambda: f64, weights: &[f64]) -> f64 {
    (0..x.len())
        .map(|j| {
            let t = lambda * weights[j];
            if weights[j].is_infinite() {
                0.0
            } else if x[j] == 0.0 {
                (grad[j].abs() - t).max(0.0)
            } else {
                (grad[j] + t * x[j].signum()).abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Newton–Raphson for `Σᵢ wᵢ [yᵢ mᵢ − b(mᵢ)]` over rows with `include[i]`,
/// where `mean`/`var` are `b'` and `b''`. Solves the normal equations with
/// a dense Cholesky at every step until the step is below `1e-12`.
pub fn irls(
    x: &Array2<f64>,
    y: &[f64],
    w: &[f64],
    include: &[bool],
    mean: impl Fn(f64) -> f64,
    var: impl Fn(f64) -> f64,
) -> Vec<f64> {
    let (n, d) = x.dim();
    let mut beta = DVector::<f64>::zeros(d);
    for _ in 0..200 {
        let mut h = DMatrix::<f64>::zeros(d, d);
        let mut g = DVector::<f64>::zeros(d);
        for i in (0..n).filter(|&i| include[i]) {
            let m: f64 = (0..d).map(|j| x[[i, j]] * beta[j]).sum();
            let (mu, v) = (mean(m), var(m));
            for j in 0..d {
                g[j] += w[i] * (y[i] - mu) * x[[i, j]];
                for k in 0..d {
                    h[(j, k)] += w[i] * v * x[[i, j]] * x[[i, k]];
                }
            }
        }
        let step = h.cholesky().expect("positive definite information").solve(&g);
        beta += &step;
        if step.amax() < 1e-12 {
            break;
        }
    }
    beta.iter().copied().collect()
}

/// Weighted least squares on rows with `include[i]` via the normal
/// equations.
pub fn weighted_ols(x: &Array2<f64>, y: &[f64], w: &[f64], include: &[bool]) -> Vec<f64> {
    irls(x, y, w, include, |m| m, |_| 1.0)
}

pub fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let flo = f(lo);
    assert!(flo * f(hi) <= 0.0, "root not bracketed");
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (f(mid) > 0.0) == (flo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Central differences with step `h` in every coordinate.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|j| {
            p[j] = x[j] + h;
            let up = f(&p);
            p[j] = x[j] - h;
            let down = f(&p);
            p[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Treatment drawn from a logistic model in the first covariate, outcome
/// linear in the first two.
pub fn random_dataset(rng: &mut impl Rng, n: usize, p: usize) -> Dataset {
    loop {
        let cov = normal_matrix(rng, n, p);
        let t: Vec<f64> = (0..n)
            .map(|i| {
                let pi = 1.0 / (1.0 + (-0.5 * cov[[i, 0]]).exp());
                f64::from(rng.random::<f64>() < pi)
            })
            .collect();
        let treated = t.iter().filter(|&&v| v == 1.0).count();
        if treated < 3 || treated > n - 3 {
            continue;
        }
        let y = (0..n)
            .map(|i| 1.0 + cov[[i, 0]] - 0.5 * cov[[i, p.min(2) - 1]] + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let names = (1..=p).map(|j| format!("X{j}")).collect();
        return Dataset::from_covariates(&cov, t, y, names).unwrap();
    }
}
