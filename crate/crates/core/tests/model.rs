mod common;

use common::{finite_difference, random_dataset, relative_error, rng};
use hdcbps::model::{closed_form_q, Family, Link, OutcomeWeight, PropensityWeight};
use hdcbps::propensity::{bpp_weight, quasi_score};
use proptest::prelude::*;
use rand::Rng;

fn families() -> [Family; 4] {
    [
        Family::Gaussian,
        Family::Binomial { trials: 1 },
        Family::Binomial { trials: 8 },
        Family::Poisson,
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn family_identities(u in -8.0f64..8.0) {
        let p = 1.0 / (1.0 + (-u).exp());
        for f in families() {
            prop_assert!(f.b_double_prime(u) >= 0.0);
            let (b, b1, b2) = match f {
                Family::Gaussian => (u * u / 2.0, u, 1.0),
                Family::Binomial { trials } => {
                    let m = f64::from(trials);
                    (m * (1.0 + u.exp()).ln(), m * p, m * p * (1.0 - p))
                }
                Family::Poisson => (u.exp(), u.exp(), u.exp()),
            };
            let tol = 1e-12 * b.abs().max(1.0);
            prop_assert!((f.b(u) - b).abs() <= tol);
            prop_assert!((f.b_prime(u) - b1).abs() <= tol);
            prop_assert!((f.b_double_prime(u) - b2).abs() <= tol);
            let h = 1e-5;
            let fd1 = (f.b(u + h) - f.b(u - h)) / (2.0 * h);
            let fd2 = (f.b_prime(u + h) - f.b_prime(u - h)) / (2.0 * h);
            let scale = f.b_prime(u).abs().max(1.0);
            prop_assert!((fd1 - f.b_prime(u)).abs() <= 1e-6 * scale);
            prop_assert!((fd2 - f.b_double_prime(u)).abs() <= 1e-6 * f.b_double_prime(u).abs().max(1.0));
        }
    }

    #[test]
    fn logistic_link_invariants(u in -25.0f64..25.0, v in -25.0f64..25.0) {
        let l = Link::Logistic;
        prop_assert!(l.pi(u) > 0.0 && l.pi(u) < 1.0);
        prop_assert!((l.pi(u) + l.pi(-u) - 1.0).abs() <= 1e-15);
        if u < v {
            prop_assert!(l.pi(u) <= l.pi(v));
        }
        let h = 1e-5;
        let fd = (l.pi(u + h) - l.pi(u - h)) / (2.0 * h);
        prop_assert!((fd - l.pi_prime(u)).abs() <= 1e-7);
        for w in [OutcomeWeight::One, OutcomeWeight::InvPi, OutcomeWeight::PsAdjusted] {
            prop_assert!(w.value(l, u) > 0.0);
        }
        let e = (-u).exp();
        prop_assert!((OutcomeWeight::PsAdjusted.value(l, u) - e).abs() <= 1e-14 * e);
        for w1 in [PropensityWeight::Pi, PropensityWeight::One, bpp_weight(vec![0.3])] {
            prop_assert!(w1.value(l, 0, u) > 0.0);
        }
    }
}

#[test]
fn logistic_at_zero() {
    assert_eq!(Link::Logistic.pi(0.0), 0.5);
}

fn log_likelihood(beta: &[f64], data: &hdcbps::Dataset) -> f64 {
    let m = data.linear_index(beta);
    m.iter()
        .zip(data.t())
        .map(|(&m, &t)| t * m - (1.0 + m.exp()).ln())
        .sum::<f64>()
        / data.n() as f64
}

#[test]
fn pi_quasi_likelihood_is_log_likelihood_up_to_a_constant() {
    let mut r = rng(3);
    for _ in 0..20 {
        let data = random_dataset(&mut r, 40, 3);
        let a: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let dq = closed_form_q(&a, &data, &PropensityWeight::Pi, Link::Logistic)
            - closed_form_q(&b, &data, &PropensityWeight::Pi, Link::Logistic);
        let dl = log_likelihood(&a, &data) - log_likelihood(&b, &data);
        assert!((dq - dl).abs() <= 1e-10, "{dq} vs {dl}");
    }
}

#[test]
fn quasi_score_is_the_gradient_of_the_quasi_likelihood() {
    let mut r = rng(4);
    for _ in 0..20 {
        let data = random_dataset(&mut r, 30, 3);
        let consts: Vec<f64> = (0..data.n()).map(|_| r.random_range(0.2..2.0)).collect();
        let beta: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        for w1 in [PropensityWeight::Pi, PropensityWeight::One, bpp_weight(consts.clone())] {
            let score = quasi_score(&beta, &data, &w1, Link::Logistic);
            let fd = finite_difference(|b| closed_form_q(b, &data, &w1, Link::Logistic), &beta, 1e-5);
            for (s, f) in score.iter().zip(&fd) {
                assert!((s - f).abs() <= 1e-7, "{w1:?}: {score:?} vs {fd:?}");
            }
        }
    }
}

#[test]
fn pi_weight_score_equals_logistic_score_exactly() {
    let mut r = rng(8);
    let data = random_dataset(&mut r, 20, 2);
    let beta: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
    let score = quasi_score(&beta, &data, &PropensityWeight::Pi, Link::Logistic);
    let m = data.linear_index(&beta);
    let expected: Vec<f64> = (0..3)
        .map(|j| {
            (0..20)
                .map(|i| (data.t()[i] - Link::Logistic.pi(m[i])) * data.x()[[i, j]])
                .sum::<f64>()
                / 20.0
        })
        .collect();
    assert!(relative_error(&score, &expected) <= 1e-15);
}

#[test]
fn one_weight_score_matches_finite_differences() {
    let mut r = rng(9);
    let data = random_dataset(&mut r, 30, 3);
    let beta: Vec<f64> = (0..4).map(|_| r.random_range(-0.5..0.5)).collect();
    let score = quasi_score(&beta, &data, &PropensityWeight::One, Link::Logistic);
    let fd = finite_difference(|b| closed_form_q(b, &data, &PropensityWeight::One, Link::Logistic), &beta, 1e-5);
    assert!(score.iter().zip(&fd).all(|(a, b)| (a - b).abs() <= 1e-6));
}
