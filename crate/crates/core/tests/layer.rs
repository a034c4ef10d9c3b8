mod common;

use cdgp::kernels::{kff_diag, kzz};
use cdgp::numerics::linalg::cholesky;
use cdgp::svgp_layer::{LayerState, MeanMap};
use common::*;
use proptest::prelude::*;

/// `∫ q log(q / p)` for 1-D Gaussians by the midpoint rule over ±12σ_q.
fn kl_by_quadrature(mq: f64, vq: f64, mp: f64, vp: f64) -> f64 {
    let log_pdf = |x: f64, m: f64, v: f64| -0.5 * ((x - m).powi(2) / v + (2.0 * std::f64::consts::PI * v).ln());
    let sd = vq.sqrt();
    let steps = 200_000;
    let h = 24.0 * sd / steps as f64;
    (0..steps)
        .map(|i| {
            let x = mq - 12.0 * sd + (i as f64 + 0.5) * h;
            let lq = log_pdf(x, mq, vq);
            lq.exp() * (lq - log_pdf(x, mp, vp)) * h
        })
        .sum()
}

#[test]
fn one_inducing_point_kl_matches_quadrature() {
    let mut r = rng(50);
    for _ in 0..10 {
        let w = MeanMap::Linear(symmetric_matrix(&mut r, 2, 2, 0.5));
        let layer = random_layer(&mut r, 1, 2, 2, w);
        let vp = kzz(&layer.z, &layer.kernel).unwrap()[(0, 0)];
        let mp = layer.prior_mean_at_z();
        let m = layer.variational_mean();
        let want: f64 = (0..2)
            .map(|j| {
                let l = layer.covariance_factor(j)[(0, 0)];
                kl_by_quadrature(m[(0, j)], l * l, mp[(0, j)], vp)
            })
            .sum();
        let got = layer.kl().unwrap();
        assert!((got - want).abs() < 1e-7 * want.max(1.0), "{got} vs {want}");
    }
}

fn prior_layer(seed: u64, m: usize) -> LayerState<f64> {
    let mut r = rng(seed);
    let w = MeanMap::Linear(symmetric_matrix(&mut r, 3, 2, 0.5));
    let mut layer = random_layer(&mut r, m, 3, 2, w);
    let lz = cholesky(&kzz(&layer.z, &layer.kernel).unwrap(), 0.0).unwrap().factor;
    layer.set_variational_mean(&layer.prior_mean_at_z());
    for j in 0..2 {
        layer.set_covariance_factor(j, &lz);
    }
    layer
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn kl_is_nonnegative_and_matches_the_dense_formula(seed in any::<u64>(), m in 1usize..7) {
        let mut r = rng(seed);
        let w = MeanMap::Linear(symmetric_matrix(&mut r, 2, 2, 0.5));
        let layer = random_layer(&mut r, m, 2, 2, w);
        let kl = layer.kl().unwrap();
        prop_assert!(kl >= -1e-10);
        let oracle = kl_oracle(&layer);
        prop_assert!((kl - oracle).abs() < 1e-9 * oracle.abs().max(1.0), "{} vs {}", kl, oracle);
    }

    #[test]
    fn kl_vanishes_at_the_prior(seed in any::<u64>(), m in 1usize..7) {
        prop_assert!(prior_layer(seed, m).kl().unwrap().abs() < 1e-8);
    }

    #[test]
    fn prior_marginals_are_recovered(seed in any::<u64>(), m in 2usize..7) {
        let layer = prior_layer(seed, m);
        let x = symmetric_matrix(&mut rng(seed ^ 1), 4, 3, 1.5);
        let (mean, var) = layer.conditional(&x).unwrap();
        let prior_mean = layer.mean_map.apply(&x, 2);
        let kff = kff_diag(&x, &layer.kernel).unwrap();
        for n in 0..4 {
            for j in 0..2 {
                prop_assert!((mean[(n, j)] - prior_mean[(n, j)]).abs() < 1e-10);
                prop_assert!((var[(n, j)] - kff[n]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn conditional_variances_are_nonnegative(seed in any::<u64>(), m in 1usize..8) {
        let mut r = rng(seed);
        let layer = random_layer(&mut r, m, 3, 2, MeanMap::Zero);
        let x = symmetric_matrix(&mut r, 6, 3, 2.0);
        let (_, var) = layer.conditional(&x).unwrap();
        prop_assert!(var.as_slice().iter().all(|&v| v >= 0.0));
    }
}
