//! Dense linear algebra, seeded sampling and reverse-mode differentiation.

pub mod gradcheck;
pub mod linalg;
mod matrix;
pub mod random;
pub mod tape;

pub use linalg::{cholesky, tri_solve, Cholesky};
pub use matrix::Matrix;
pub use random::gaussian_samples;
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix is not positive definite even after jitter escalation")]
    NotPositiveDefinite,
    #[error("triangular matrix has a zero on its diagonal")]
    SingularMatrix,
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("matrix of shape {0:?} is not square")]
    NotSquare((usize, usize)),
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("matrices must have at least one row and one column")]
    EmptyMatrix,
    #[error("rows have different lengths")]
    RaggedRows,
    #[error("loss of shape {0:?} is not a scalar")]
    NotScalar((usize, usize)),
    #[error("operation record {0} refers to a later node")]
    GraphCycle(usize),
}
