#![allow(dead_code)]

use cdgp::kernels::{BaseKernel, ConvParams};
use cdgp::numerics::Matrix;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(0.0..1.0))
}

/// Patch `(i, j)` of a row-major `W × H × C` image, read pixel by pixel.
pub fn patch_at(img: &[f64], g: &cdgp::patching::PatchGeometry, i: usize, j: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for r in 0..g.patch_h {
        for c in 0..g.patch_w {
            let (y, x) = (i * g.stride + r, j * g.stride + c);
            for ch in 0..g.channels {
                out.push(img[(y * g.width + x) * g.channels + ch]);
            }
        }
    }
    out
}

pub fn all_patches(img: &[f64], g: &cdgp::patching::PatchGeometry) -> Vec<Vec<f64>> {
    let rows = (g.height - g.patch_h) / g.stride + 1;
    let cols = (g.width - g.patch_w) / g.stride + 1;
    let mut out = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            out.push(patch_at(img, g, i, j));
        }
    }
    out
}

/// The double loop over patch pairs, in the order `p` outer, `p′` inner.
pub fn brute_conv(xi: &[f64], xj: &[f64], p: &ConvParams<f64>) -> f64 {
    let (pi, pj) = (all_patches(xi, &p.geom), all_patches(xj, &p.geom));
    let n = pi.len();
    let (left, right): (Vec<usize>, Vec<usize>) = match &p.subsets {
        Some(s) => (s.left.indices.clone(), s.right.indices.clone()),
        None => ((0..n).collect(), (0..n).collect()),
    };
    let mut acc = 0.0;
    for &a in &left {
        for &b in &right {
            let k = p.base.eval(&pi[a], &pj[b]).unwrap();
            acc += match &p.weights {
                Some(w) => w[a] * w[b] * k,
                None => k,
            };
        }
    }
    acc
}

/// Plain-loop RBF with no shared code.
pub fn naive_rbf(a: &[f64], b: &[f64], var: f64, kappa: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).powi(2);
    }
    var * (-0.5 * s / kappa).exp()
}

pub fn naive_base(base: &BaseKernel<f64>, a: &[f64], b: &[f64]) -> f64 {
    base.components()
        .iter()
        .map(|c| naive_rbf(a, b, c.variance(), c.kappa()))
        .sum()
}

pub fn min_eigenvalue(k: &Matrix<f64>) -> f64 {
    let m = DMatrix::from_row_slice(k.rows(), k.cols(), k.as_slice());
    m.symmetric_eigen().eigenvalues.min()
}

pub fn to_dmatrix(k: &Matrix<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(k.rows(), k.cols(), k.as_slice())
}

pub fn symmetric_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

pub fn rbf_spec(var: f64, kappa: f64, noise: f64) -> cdgp::kernels::KernelSpec<f64> {
    cdgp::kernels::KernelSpec::Plain {
        base: BaseKernel::Rbf(cdgp::kernels::RbfParams::new(var, kappa)),
        log_noise: noise.ln(),
    }
}

/// A layer with random inducing inputs, means and lower-triangular factors.
pub fn random_layer(
    rng: &mut ChaCha8Rng,
    m: usize,
    d_in: usize,
    width: usize,
    mean_map: cdgp::svgp_layer::MeanMap<f64>,
) -> cdgp::svgp_layer::LayerState<f64> {
    let z = symmetric_matrix(rng, m, d_in, 1.0);
    let var = rng.random_range(0.5..2.0);
    let kappa = rng.random_range(0.3..2.0);
    let mut layer = cdgp::svgp_layer::LayerState::new(rbf_spec(var, kappa, 0.05), z, d_in, width, mean_map, false).unwrap();
    layer.q_mu = symmetric_matrix(rng, m, width, 1.0);
    for j in 0..width {
        let mut l = symmetric_matrix(rng, m, m, 0.3);
        for r in 0..m {
            for c in r + 1..m {
                l[(r, c)] = 0.0;
            }
            l[(r, r)] = 0.2 + l[(r, r)].abs();
        }
        layer.set_covariance_factor(j, &l);
    }
    layer
}

/// KL between Gaussians from explicit inverses and determinants.
pub fn kl_oracle(layer: &cdgp::svgp_layer::LayerState<f64>) -> f64 {
    let k = to_dmatrix(&cdgp::kernels::kzz(&layer.z, &layer.kernel).unwrap());
    let k_inv = k.clone().try_inverse().unwrap();
    let m = layer.num_inducing() as f64;
    let mean = to_dmatrix(&layer.variational_mean());
    let prior = to_dmatrix(&layer.prior_mean_at_z());
    (0..layer.width())
        .map(|j| {
            let l = to_dmatrix(&layer.covariance_factor(j));
            let s = &l * l.transpose();
            let delta = (&mean - &prior).column(j).into_owned();
            let maha = (delta.transpose() * &k_inv * &delta)[(0, 0)];
            0.5 * ((&k_inv * &s).trace() + maha - m + k.determinant().ln() - s.determinant().ln())
        })
        .sum()
}
