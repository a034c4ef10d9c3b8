//! One sparse variational GP layer.
//!
//! The variational mean of every output is stored as an offset from the
//! prior mean at the inducing inputs, so `q_mu = 0` means `m_j = mean(Z)`.
//! Covariance factors are stored raw: the strict lower triangle is used as
//! is and the diagonal passes through softplus.

use rand::Rng;
use thiserror::Error;

use crate::kernels::{kff_diag_var, kfz, kfz_var, kzz, kzz_var, KernelError, KernelSpec, KernelStructure, KernelVars};
use crate::numerics::tape::{softplus_inverse, softplus_value};
use crate::numerics::linalg::{cholesky, tri_solve};
use crate::numerics::{gaussian_samples, Matrix, NumericsError, Tape, Var};
use crate::scalar::Scalar;

/// Initial variance of every inducing output.
pub const INITIAL_VARIANCE: f64 = 1e-5;
/// Floor applied to conditional variances before taking square roots.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayerError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("negative variance {0}")]
    NegativeVariance(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Fixed mean function of a layer, applied to its input.
#[derive(Clone, Debug, PartialEq)]
pub enum MeanMap<T> {
    Zero,
    Identity,
    /// `d_in × D` projection.
    Linear(Matrix<T>),
}

impl<T: Scalar> MeanMap<T> {
    pub fn apply(&self, f: &Matrix<T>, width: usize) -> Matrix<T> {
        match self {
            MeanMap::Zero => Matrix::zeros(f.rows(), width),
            MeanMap::Identity => f.clone(),
            MeanMap::Linear(w) => f.matmul(w),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<T> {
    /// Inducing inputs, `M × d_z`.
    pub z: Matrix<T>,
    /// Offsets `m_j − mean(Z)`, one column per output.
    pub q_mu: Matrix<T>,
    /// Raw covariance factors, one `M × M` matrix per output.
    pub q_sqrt: Vec<Matrix<T>>,
    pub mean_map: MeanMap<T>,
    pub kernel: KernelSpec<T>,
    pub trainable_z: bool,
    pub input_dim: usize,
}

impl<T: Scalar> LayerState<T> {
    /// A layer with zero mean offsets and `S_j = 1e-5·I`.
    pub fn new(
        kernel: KernelSpec<T>,
        z: Matrix<T>,
        input_dim: usize,
        width: usize,
        mean_map: MeanMap<T>,
        trainable_z: bool,
    ) -> Result<Self, LayerError> {
        let m = z.rows();
        let raw_diag = softplus_inverse(T::lit(INITIAL_VARIANCE).sqrt());
        let mut raw = Matrix::zeros(m, m);
        for i in 0..m {
            raw[(i, i)] = raw_diag;
        }
        let layer = Self {
            z,
            q_mu: Matrix::zeros(m, width),
            q_sqrt: vec![raw; width],
            mean_map,
            kernel,
            trainable_z,
            input_dim,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<(), LayerError> {
        let bad = |m: String| Err(LayerError::DimensionMismatch(m));
        let (m, d) = (self.num_inducing(), self.width());
        self.kernel.structure(self.input_dim)?;
        if m == 0 || d == 0 {
            return bad("layer needs inducing points and outputs".into());
        }
        let dz = self.kernel.inducing_dim(self.input_dim);
        if self.z.cols() != dz {
            return bad(format!("inducing inputs have {} columns, expected {dz}", self.z.cols()));
        }
        if self.q_mu.shape() != (m, d) || self.q_sqrt.len() != d {
            return bad("variational parameters do not match M and width".into());
        }
        if self.q_sqrt.iter().any(|l| l.shape() != (m, m)) {
            return bad("covariance factors must be M x M".into());
        }
        match &self.mean_map {
            MeanMap::Identity if self.input_dim != d => {
                bad(format!("identity mean needs input dim {} = width {d}", self.input_dim))
            }
            MeanMap::Linear(w) if w.shape() != (self.input_dim, d) => {
                bad(format!("mean map is {:?}, expected ({}, {d})", w.shape(), self.input_dim))
            }
            _ => Ok(()),
        }
    }

    pub fn num_inducing(&self) -> usize {
        self.z.rows()
    }

    pub fn width(&self) -> usize {
        self.q_mu.cols()
    }

    /// Lower-triangular `L_j` with `S_j = L_j L_jᵀ`.
    pub fn covariance_factor(&self, j: usize) -> Matrix<T> {
        let raw = &self.q_sqrt[j];
        Matrix::from_fn(raw.rows(), raw.cols(), |r, c| match r.cmp(&c) {
            std::cmp::Ordering::Greater => raw[(r, c)],
            std::cmp::Ordering::Equal => softplus_value(raw[(r, r)]),
            std::cmp::Ordering::Less => T::zero(),
        })
    }

    /// Stores a lower-triangular factor with positive diagonal as `L_j`.
    pub fn set_covariance_factor(&mut self, j: usize, l: &Matrix<T>) {
        self.q_sqrt[j] = Matrix::from_fn(l.rows(), l.cols(), |r, c| match r.cmp(&c) {
            std::cmp::Ordering::Greater => l[(r, c)],
            std::cmp::Ordering::Equal => softplus_inverse(l[(r, r)]),
            std::cmp::Ordering::Less => T::zero(),
        });
    }

    /// Prior mean of the inducing outputs, `M × D`. Zero for convolutional
    /// layers, whose inducing inputs live in patch space.
    pub fn prior_mean_at_z(&self) -> Matrix<T> {
        if self.kernel.is_conv() {
            return Matrix::zeros(self.num_inducing(), self.width());
        }
        self.mean_map.apply(&self.z, self.width())
    }

    /// Absolute variational means `m_j`, one column per output.
    pub fn variational_mean(&self) -> Matrix<T> {
        self.q_mu.add(&self.prior_mean_at_z())
    }

    pub fn set_variational_mean(&mut self, m: &Matrix<T>) {
        self.q_mu = m.sub(&self.prior_mean_at_z());
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["q_mu".to_string()];
        names.extend((0..self.width()).map(|j| format!("q_sqrt.{j}")));
        names.push("kernel.base".into());
        names.push("kernel.log_noise".into());
        if self.kernel.weights().is_some() {
            names.push("kernel.weights".into());
        }
        if self.trainable_z {
            names.push("z".into());
        }
        names
    }

    /// Trainable parameters in the order of [`Self::param_names`].
    pub fn trainable_params(&self) -> Vec<Matrix<T>> {
        let mut out = vec![self.q_mu.clone()];
        out.extend(self.q_sqrt.iter().cloned());
        out.push(Matrix::row_vector(self.kernel.base().to_log_params()));
        out.push(Matrix::scalar(self.kernel.log_noise()));
        if let Some(w) = self.kernel.weights() {
            out.push(Matrix::row_vector(w.to_vec()));
        }
        if self.trainable_z {
            out.push(self.z.clone());
        }
        out
    }

    /// Inverse of [`Self::trainable_params`]; returns how many were used.
    pub fn set_trainable_params(&mut self, params: &[Matrix<T>]) -> Result<usize, LayerError> {
        let expected = self.trainable_params();
        if params.len() < expected.len() {
            return Err(LayerError::DimensionMismatch(format!(
                "{} parameter arrays, layer needs {}",
                params.len(),
                expected.len()
            )));
        }
        for (p, e) in params.iter().zip(&expected) {
            if p.shape() != e.shape() {
                return Err(LayerError::DimensionMismatch(format!(
                    "parameter of shape {:?}, expected {:?}",
                    p.shape(),
                    e.shape()
                )));
            }
        }
        let mut it = params.iter();
        self.q_mu = it.next().expect("checked").clone();
        for l in &mut self.q_sqrt {
            *l = it.next().expect("checked").clone();
        }
        self.kernel
            .base_mut()
            .set_log_params(it.next().expect("checked").as_slice());
        self.kernel.set_log_noise(it.next().expect("checked").to_scalar());
        if let Some(w) = self.kernel.weights_mut() {
            w.copy_from_slice(it.next().expect("checked").as_slice());
        }
        if self.trainable_z {
            self.z = it.next().expect("checked").clone();
        }
        Ok(expected.len())
    }

    /// Records the layer's parameters on `tape`, as leaves when `trainable`.
    pub fn attach<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Result<LayerVars<'t, T>, LayerError> {
        let params = self.trainable_params();
        let mut it = params.into_iter();
        let mut next = || tape.input(it.next().expect("parameter count"), trainable);
        let q_mu = next();
        let q_sqrt: Vec<_> = (0..self.width()).map(|_| next()).collect();
        let base = next();
        let log_noise = next();
        let weights = self.kernel.weights().map(|_| next());
        let z = if self.trainable_z {
            next()
        } else {
            tape.constant(self.z.clone())
        };
        let mean_w = match &self.mean_map {
            MeanMap::Linear(w) => Some(tape.constant(w.clone())),
            _ => None,
        };
        Ok(LayerVars {
            z,
            q_mu,
            q_sqrt,
            kernel: KernelVars {
                base,
                weights,
                log_noise,
            },
            mean_w,
            identity_mean: matches!(self.mean_map, MeanMap::Identity),
            structure: self.kernel.structure(self.input_dim)?,
        })
    }

    /// Marginal mean and variance (`B × D` each) of the layer output at `f`.
    pub fn conditional(&self, f: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>), LayerError> {
        let tape = Tape::new();
        let vars = self.attach(&tape, false)?;
        let fact = vars.factorize()?;
        let (mean, var) = vars.conditional(&fact, tape.constant(f.clone()))?;
        Ok(((*mean.value()).clone(), (*var.value()).clone()))
    }

    /// Conditional mean alone; skips the marginal variances.
    pub fn conditional_mean(&self, f: &Matrix<T>) -> Result<Matrix<T>, LayerError> {
        let lz = cholesky(&kzz(&self.z, &self.kernel)?, T::zero())?.factor;
        let alpha = tri_solve(&lz, &tri_solve(&lz, &self.q_mu, false)?, true)?;
        let mut mean = kfz(f, &self.z, &self.kernel)?.matmul(&alpha);
        mean.add_assign(&self.mean_map.apply(f, self.width()));
        Ok(mean)
    }

    /// `Σ_j KL(q(u_j) ‖ p(u_j))`.
    pub fn kl(&self) -> Result<T, LayerError> {
        let tape = Tape::new();
        let vars = self.attach(&tape, false)?;
        let fact = vars.factorize()?;
        Ok(vars.kl(&fact)?.scalar())
    }
}

/// A layer's parameters on a tape.
#[derive(Clone, Debug)]
pub struct LayerVars<'t, T> {
    pub z: Var<'t, T>,
    pub q_mu: Var<'t, T>,
    pub q_sqrt: Vec<Var<'t, T>>,
    pub kernel: KernelVars<'t, T>,
    mean_w: Option<Var<'t, T>>,
    identity_mean: bool,
    structure: KernelStructure,
}

/// Per-step factorization of `K_zz`, shared by the conditional and the KL.
#[derive(Clone, Debug)]
pub struct Factorized<'t, T> {
    pub lz: Var<'t, T>,
    /// Lower-triangular `L_j` for every output.
    pub factors: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> LayerVars<'t, T> {
    /// Leaves in the order of [`LayerState::param_names`].
    pub fn leaves(&self) -> Vec<Var<'t, T>> {
        let mut v = vec![self.q_mu];
        v.extend(self.q_sqrt.iter().copied());
        v.push(self.kernel.base);
        v.push(self.kernel.log_noise);
        v.extend(self.kernel.weights);
        if self.z.requires_grad() {
            v.push(self.z);
        }
        v
    }

    pub fn factorize(&self) -> Result<Factorized<'t, T>, LayerError> {
        let kzz = kzz_var(&self.structure, &self.kernel, self.z)?;
        Ok(Factorized {
            lz: kzz.cholesky(T::zero())?,
            factors: self.q_sqrt.iter().map(|q| q.tril_softplus_diag()).collect(),
        })
    }

    /// Conditional mean and clamped variance at `f`, both `B × D`.
    pub fn conditional(
        &self,
        fact: &Factorized<'t, T>,
        f: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>), LayerError> {
        let kfz = kfz_var(&self.structure, &self.kernel, f, self.z)?;
        let kff = kff_diag_var(&self.structure, &self.kernel, f)?;
        let a = fact.lz.tri_solve(kfz.transpose(), false)?;
        let at = fact.lz.tri_solve(a, true)?;
        let mut mean = at.matmul_tn(self.q_mu);
        if self.identity_mean {
            mean = mean + f;
        } else if let Some(w) = self.mean_w {
            mean = mean + f.matmul(w);
        }
        let prior = kff - a.square().column_sums().transpose();
        let explained: Vec<_> = fact
            .factors
            .iter()
            .map(|l| l.matmul_tn(at).square().column_sums().transpose())
            .collect();
        let var = Var::concat_cols(&explained)
            .add_col_broadcast(prior)
            .clamp_min(T::lit(VARIANCE_FLOOR));
        Ok((mean, var))
    }

    /// Closed-form `Σ_j KL(N(m_j, S_j) ‖ N(mean(Z), K_zz))`.
    pub fn kl(&self, fact: &Factorized<'t, T>) -> Result<Var<'t, T>, LayerError> {
        let (m, d) = self.q_mu.shape();
        let two = T::lit(2.0);
        let trace = fact
            .lz
            .tri_solve(Var::concat_cols(&fact.factors), false)?
            .square()
            .sum();
        let maha = fact.lz.tri_solve(self.q_mu, false)?.square().sum();
        let logdet_k = fact.lz.diag().ln().sum().scale(two * T::from_count(d));
        let diags: Vec<_> = fact.factors.iter().map(|l| l.diag()).collect();
        let logdet_s = Var::concat_cols(&diags).ln().sum().scale(two);
        Ok((trace + maha + logdet_k - logdet_s)
            .add_scalar(-T::from_count(m * d))
            .scale(T::lit(0.5)))
    }
}

/// `mean + ε ⊙ √var` with fresh standard normal `ε`.
pub fn sample<T: Scalar, R: Rng + ?Sized>(
    mean: &Matrix<T>,
    var: &Matrix<T>,
    rng: &mut R,
) -> Result<Matrix<T>, LayerError> {
    let eps = gaussian_samples(rng, mean.rows(), mean.cols());
    sample_with(mean, var, &eps)
}

/// As [`sample`] with the standard normal draws supplied.
pub fn sample_with<T: Scalar>(mean: &Matrix<T>, var: &Matrix<T>, eps: &Matrix<T>) -> Result<Matrix<T>, LayerError> {
    if mean.shape() != var.shape() || mean.shape() != eps.shape() {
        return Err(LayerError::DimensionMismatch("mean, variance and noise shapes differ".into()));
    }
    check_variance(var)?;
    let sd = var.map(|v| v.max(T::zero()).sqrt());
    Ok(mean.add(&sd.zip_map(eps, |s, e| s * e)))
}

fn check_variance<T: Scalar>(var: &Matrix<T>) -> Result<(), LayerError> {
    let min = var.as_slice().iter().copied().fold(T::infinity(), T::min);
    if min < -T::lit(VARIANCE_FLOOR) {
        return Err(LayerError::NegativeVariance(min.to_f64_lossy()));
    }
    Ok(())
}

/// Reparameterized sample on a tape; `var` must already be clamped.
pub fn sample_var<'t, T: Scalar>(mean: Var<'t, T>, var: Var<'t, T>, eps: &Matrix<T>) -> Var<'t, T> {
    let e = mean.tape().constant(eps.clone());
    mean + var.sqrt() * e
}
