//! Cholesky factorization with jitter escalation and triangular solves.

use crate::numerics::{Matrix, NumericsError};
use crate::scalar::Scalar;

/// Relative tolerance for the symmetry precondition of [`cholesky`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// First escalation level, relative to the mean diagonal.
pub const JITTER_START: f64 = 1e-6;
/// Last escalation level, relative to the mean diagonal.
pub const JITTER_MAX: f64 = 1e-2;

/// A lower-triangular factor together with the jitter that was needed.
#[derive(Clone, Debug)]
pub struct Cholesky<T> {
    pub factor: Matrix<T>,
    pub jitter: T,
}

/// Factorizes `a + jitter·I`.
///
/// When the factorization fails at the requested jitter the diagonal shift is
/// escalated through `1e-6, 1e-5, …, 1e-2` times the mean diagonal before
/// giving up with [`NumericsError::NotPositiveDefinite`].
pub fn cholesky<T: Scalar>(a: &Matrix<T>, jitter: T) -> Result<Cholesky<T>, NumericsError> {
    check_square(a)?;
    if !a.is_symmetric(T::lit(SYMMETRY_TOL)) {
        return Err(NumericsError::NotSymmetric);
    }
    if let Some(factor) = cholesky_shifted(a, jitter) {
        return Ok(Cholesky { factor, jitter });
    }
    let n = a.rows();
    let mean_diag = (0..n).map(|i| a[(i, i)]).sum::<T>() / T::from_count(n);
    let scale = if mean_diag > T::zero() {
        mean_diag
    } else {
        T::one()
    };
    let mut level = T::lit(JITTER_START);
    while level <= T::lit(JITTER_MAX) * T::lit(1.0 + 1e-9) {
        let shift = level * scale;
        if shift > jitter {
            if let Some(factor) = cholesky_shifted(a, shift) {
                return Ok(Cholesky {
                    factor,
                    jitter: shift,
                });
            }
        }
        level = level * T::lit(10.0);
    }
    Err(NumericsError::NotPositiveDefinite)
}

/// Plain factorization of `a + shift·I`; `None` on a non-positive pivot.
/// Only the lower triangle of `a` is read.
pub fn cholesky_shifted<T: Scalar>(a: &Matrix<T>, shift: T) -> Option<Matrix<T>> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + shift;
        {
            let lj = l.row(j);
            for &v in &lj[..j] {
                d -= v * v;
            }
        }
        if !(d > T::zero()) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            let (ri, rj) = (i * n, j * n);
            let ls = l.as_slice();
            for k in 0..j {
                s -= ls[ri + k] * ls[rj + k];
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(l)
}

/// Solves `L·X = B`, or `Lᵀ·X = B` when `transposed` is set, for
/// lower-triangular `L`.
pub fn tri_solve<T: Scalar>(
    l: &Matrix<T>,
    b: &Matrix<T>,
    transposed: bool,
) -> Result<Matrix<T>, NumericsError> {
    check_square(l)?;
    let n = l.rows();
    if b.rows() != n {
        return Err(NumericsError::ShapeMismatch {
            expected: (n, b.cols()),
            found: b.shape(),
        });
    }
    if (0..n).any(|i| l[(i, i)] == T::zero()) {
        return Err(NumericsError::SingularMatrix);
    }
    let m = b.cols();
    let mut x = b.clone();
    if !transposed {
        for i in 0..n {
            for k in 0..i {
                let lik = l[(i, k)];
                if lik == T::zero() {
                    continue;
                }
                let (head, tail) = x.as_mut_slice().split_at_mut(i * m);
                let xk = &head[k * m..(k + 1) * m];
                for (xi, &v) in tail[..m].iter_mut().zip(xk) {
                    *xi -= lik * v;
                }
            }
            let d = l[(i, i)];
            for v in x.row_mut(i) {
                *v /= d;
            }
        }
    } else {
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let lki = l[(k, i)];
                if lki == T::zero() {
                    continue;
                }
                let (head, tail) = x.as_mut_slice().split_at_mut(k * m);
                let xk = &tail[..m];
                for (xi, &v) in head[i * m..(i + 1) * m].iter_mut().zip(xk) {
                    *xi -= lki * v;
                }
            }
            let d = l[(i, i)];
            for v in x.row_mut(i) {
                *v /= d;
            }
        }
    }
    Ok(x)
}

/// `log|L·Lᵀ|` from a Cholesky factor.
pub fn log_det_from_factor<T: Scalar>(l: &Matrix<T>) -> T {
    (0..l.rows())
        .map(|i| l[(i, i)].ln())
        .sum::<T>()
        * T::lit(2.0)
}

fn check_square<T: Scalar>(a: &Matrix<T>) -> Result<(), NumericsError> {
    if a.rows() != a.cols() {
        return Err(NumericsError::NotSquare(a.shape()));
    }
    Ok(())
}
