//! Covariance functions and kernel-matrix builders.
//!
//! Every layer kernel is a base kernel (one RBF or a sum of two) applied
//! either to whole inputs or summed over image patches. Plain kernels are
//! handled as the one-patch special case of the convolutional kernel, so a
//! single set of fused routines builds `K_ff` diagonals, `K_fz` and `K_zz`
//! together with their gradients.
//!
//! The convolutional sums always run in ascending patch order (`p`, then
//! `p'`) and every base evaluation goes through [`rbf_from_sq_dist`], so
//! [`conv_kernel`] agrees bit-for-bit with a naive double loop over
//! [`rbf`].

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::tape::BackwardFn;
use crate::numerics::{Matrix, Var};
use crate::patching::{PatchError, PatchGeometry, PatchIndex, PatchSubset};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("vectors of length {0} and {1} cannot be compared")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Geometry(#[from] PatchError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// RBF hyperparameters, stored as logarithms so both stay positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfParams<T> {
    /// `log σ_f²`
    pub log_variance: T,
    /// `log κ`, κ being the squared lengthscale.
    pub log_kappa: T,
}

impl<T: Scalar> RbfParams<T> {
    pub fn new(variance: T, kappa: T) -> Self {
        Self {
            log_variance: variance.ln(),
            log_kappa: kappa.ln(),
        }
    }

    /// From a lengthscale `ℓ`, with `κ = ℓ²`.
    pub fn with_lengthscale(variance: T, lengthscale: T) -> Self {
        Self::new(variance, lengthscale * lengthscale)
    }

    pub fn variance(&self) -> T {
        self.log_variance.exp()
    }

    pub fn kappa(&self) -> T {
        self.log_kappa.exp()
    }
}

/// Squared Euclidean distance with a fixed four-lane summation order.
#[inline]
pub fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ta.iter().zip(tb) {
        let d = x - y;
        tail += d * d;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `σ² exp(−d² / 2κ)`.
#[inline]
pub fn rbf_from_sq_dist<T: Scalar>(sq: T, variance: T, kappa: T) -> T {
    variance * (-sq / (kappa + kappa)).exp()
}

/// RBF kernel between two vectors.
pub fn rbf<T: Scalar>(a: &[T], b: &[T], p: &RbfParams<T>) -> Result<T, KernelError> {
    if a.len() != b.len() {
        return Err(KernelError::LengthMismatch(a.len(), b.len()));
    }
    Ok(rbf_from_sq_dist(sq_dist(a, b), p.variance(), p.kappa()))
}

/// Sum of two RBF kernels.
pub fn sum_rbf<T: Scalar>(
    a: &[T],
    b: &[T],
    p1: &RbfParams<T>,
    p2: &RbfParams<T>,
) -> Result<T, KernelError> {
    Ok(rbf(a, b, p1)? + rbf(a, b, p2)?)
}

/// Base kernel applied to patches (or whole inputs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BaseKernel<T> {
    Rbf(RbfParams<T>),
    SumRbf(RbfParams<T>, RbfParams<T>),
}

impl<T: Scalar> BaseKernel<T> {
    pub fn components(&self) -> Vec<RbfParams<T>> {
        match self {
            BaseKernel::Rbf(p) => vec![*p],
            BaseKernel::SumRbf(p, q) => vec![*p, *q],
        }
    }

    /// Flat `[log σ², log κ, …]` vector, the layout used for training.
    pub fn to_log_params(&self) -> Vec<T> {
        self.components()
            .iter()
            .flat_map(|p| [p.log_variance, p.log_kappa])
            .collect()
    }

    pub fn set_log_params(&mut self, values: &[T]) {
        match self {
            BaseKernel::Rbf(p) => {
                p.log_variance = values[0];
                p.log_kappa = values[1];
            }
            BaseKernel::SumRbf(p, q) => {
                p.log_variance = values[0];
                p.log_kappa = values[1];
                q.log_variance = values[2];
                q.log_kappa = values[3];
            }
        }
    }

    pub fn eval(&self, a: &[T], b: &[T]) -> Result<T, KernelError> {
        match self {
            BaseKernel::Rbf(p) => rbf(a, b, p),
            BaseKernel::SumRbf(p, q) => sum_rbf(a, b, p, q),
        }
    }

    /// `k(a, a)`.
    pub fn variance_sum(&self) -> T {
        self.components().iter().map(RbfParams::variance).sum()
    }
}

/// Independent patch subsets for the two arguments of the image kernel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetPair {
    pub left: PatchSubset,
    pub right: PatchSubset,
}

/// Convolutional kernel: base kernel summed over patch pairs, optionally
/// weighted per patch and restricted to patch subsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvParams<T> {
    pub base: BaseKernel<T>,
    pub geom: PatchGeometry,
    pub weights: Option<Vec<T>>,
    pub subsets: Option<SubsetPair>,
    /// `log σ_n²`, the between-layer noise absorbed into the kernel.
    pub log_noise: T,
}

impl<T: Scalar> ConvParams<T> {
    pub fn validate(&self) -> Result<(), KernelError> {
        self.geom.validate()?;
        let p = self.geom.num_patches();
        if let Some(w) = &self.weights {
            if w.len() != p {
                return Err(KernelError::DimensionMismatch(format!(
                    "{} patch weights for {p} patches",
                    w.len()
                )));
            }
        }
        if let Some(s) = &self.subsets {
            for sub in [&s.left, &s.right] {
                if sub.is_empty() || sub.indices.iter().any(|&i| i >= p) {
                    return Err(KernelError::DimensionMismatch(format!(
                        "patch subset out of range for {p} patches"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Convolutional kernel `k_f(x_i, x_j)` between two images (noise excluded).
pub fn conv_kernel<T: Scalar>(xi: &[T], xj: &[T], p: &ConvParams<T>) -> Result<T, KernelError> {
    p.validate()?;
    let n = p.geom.input_dim();
    for x in [xi, xj] {
        if x.len() != n {
            return Err(PatchError::GeometryMismatch {
                expected: n,
                found: x.len(),
            }
            .into());
        }
    }
    let index = PatchIndex::new(p.geom);
    let (mut pi, mut pj) = (Vec::new(), Vec::new());
    index.gather_into(xi, &mut pi);
    index.gather_into(xj, &mut pj);
    let d = p.geom.patch_dim();
    let comps = Comps::new(&p.base);
    let all: Vec<usize>;
    let (left, right) = match &p.subsets {
        Some(s) => (&s.left.indices[..], &s.right.indices[..]),
        None => {
            all = (0..p.geom.num_patches()).collect();
            (&all[..], &all[..])
        }
    };
    let mut acc = T::zero();
    for &a in left {
        let xa = &pi[a * d..(a + 1) * d];
        for &b in right {
            let k = comps.eval(sq_dist(xa, &pj[b * d..(b + 1) * d]));
            acc += match &p.weights {
                Some(w) => w[a] * w[b] * k,
                None => k,
            };
        }
    }
    Ok(acc)
}

/// A layer's covariance function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum KernelSpec<T> {
    /// Base kernel on whole inputs.
    Plain { base: BaseKernel<T>, log_noise: T },
    Conv(ConvParams<T>),
}

impl<T: Scalar> KernelSpec<T> {
    pub fn base(&self) -> &BaseKernel<T> {
        match self {
            KernelSpec::Plain { base, .. } => base,
            KernelSpec::Conv(c) => &c.base,
        }
    }

    pub fn base_mut(&mut self) -> &mut BaseKernel<T> {
        match self {
            KernelSpec::Plain { base, .. } => base,
            KernelSpec::Conv(c) => &mut c.base,
        }
    }

    pub fn log_noise(&self) -> T {
        match self {
            KernelSpec::Plain { log_noise, .. } => *log_noise,
            KernelSpec::Conv(c) => c.log_noise,
        }
    }

    pub fn set_log_noise(&mut self, v: T) {
        match self {
            KernelSpec::Plain { log_noise, .. } => *log_noise = v,
            KernelSpec::Conv(c) => c.log_noise = v,
        }
    }

    pub fn noise_variance(&self) -> T {
        self.log_noise().exp()
    }

    pub fn weights(&self) -> Option<&[T]> {
        match self {
            KernelSpec::Conv(c) => c.weights.as_deref(),
            KernelSpec::Plain { .. } => None,
        }
    }

    pub fn weights_mut(&mut self) -> Option<&mut Vec<T>> {
        match self {
            KernelSpec::Conv(c) => c.weights.as_mut(),
            KernelSpec::Plain { .. } => None,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, KernelSpec::Conv(_))
    }

    /// Patch structure seen by inputs of length `input_dim`.
    pub fn structure(&self, input_dim: usize) -> Result<KernelStructure, KernelError> {
        match self {
            KernelSpec::Plain { .. } => Ok(KernelStructure {
                geom: PatchGeometry::whole(input_dim, 1, 1),
                subsets: None,
                weighted: false,
            }),
            KernelSpec::Conv(c) => {
                c.validate()?;
                if c.geom.input_dim() != input_dim {
                    return Err(PatchError::GeometryMismatch {
                        expected: c.geom.input_dim(),
                        found: input_dim,
                    }
                    .into());
                }
                Ok(KernelStructure {
                    geom: c.geom,
                    subsets: c.subsets.clone(),
                    weighted: c.weights.is_some(),
                })
            }
        }
    }

    /// Row dimension of inducing inputs: patch space for convolutional
    /// kernels, input space otherwise.
    pub fn inducing_dim(&self, input_dim: usize) -> usize {
        match self {
            KernelSpec::Plain { .. } => input_dim,
            KernelSpec::Conv(c) => c.geom.patch_dim(),
        }
    }

    fn values(&self) -> KernelValues<T> {
        KernelValues {
            base: self.base().to_log_params(),
            weights: self.weights().map(<[T]>::to_vec),
            log_noise: self.log_noise(),
        }
    }
}

/// Structural (non-trainable) part of a kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelStructure {
    pub geom: PatchGeometry,
    pub subsets: Option<SubsetPair>,
    pub weighted: bool,
}

#[derive(Clone, Debug)]
struct KernelValues<T> {
    base: Vec<T>,
    weights: Option<Vec<T>>,
    log_noise: T,
}

/// Precomputed `(σ², 2κ)` per base component.
#[derive(Clone, Debug)]
struct Comps<T> {
    var: Vec<T>,
    two_kappa: Vec<T>,
}

impl<T: Scalar> Comps<T> {
    fn new(base: &BaseKernel<T>) -> Self {
        Self::from_log_params(&base.to_log_params())
    }

    fn from_log_params(lp: &[T]) -> Self {
        let mut var = Vec::new();
        let mut two_kappa = Vec::new();
        for c in lp.chunks_exact(2) {
            var.push(c[0].exp());
            let k = c[1].exp();
            two_kappa.push(k + k);
        }
        Self { var, two_kappa }
    }

    fn n(&self) -> usize {
        self.var.len()
    }

    #[inline]
    fn eval(&self, sq: T) -> T {
        let mut k = self.var[0] * (-sq / self.two_kappa[0]).exp();
        for b in 1..self.var.len() {
            k += self.var[b] * (-sq / self.two_kappa[b]).exp();
        }
        k
    }

    /// Value, `∂k/∂log σ²_b`, `∂k/∂log κ_b` (interleaved) and `∂k/∂d²`.
    #[inline]
    fn eval_grad(&self, sq: T, parts: &mut [T]) -> (T, T) {
        let mut k = T::zero();
        let mut dsq = T::zero();
        for b in 0..self.var.len() {
            let kb = self.var[b] * (-sq / self.two_kappa[b]).exp();
            k += kb;
            parts[2 * b] = kb;
            parts[2 * b + 1] = kb * sq / self.two_kappa[b];
            dsq -= kb / self.two_kappa[b];
        }
        (k, dsq)
    }

    fn sum_var(&self) -> T {
        self.var.iter().copied().sum()
    }
}

/// What the fused routines should differentiate.
#[derive(Clone, Copy, Debug, Default)]
struct Wants {
    base: bool,
    weights: bool,
    input: bool,
}

impl Wants {
    fn any(&self) -> bool {
        self.base || self.weights || self.input
    }
}

struct SelfKernel<T> {
    value: T,
    g_base: Vec<T>,
    g_w: Vec<T>,
    g_input: Vec<T>,
}

/// `Σ_{p∈S} Σ_{p'∈S'} w_p w_p' k(x^p, x^p')` for one input, with gradients.
fn self_kernel<T: Scalar>(
    x: &[T],
    index: &PatchIndex,
    st: &KernelStructure,
    comps: &Comps<T>,
    weights: Option<&[T]>,
    wants: Wants,
) -> SelfKernel<T> {
    let g = &st.geom;
    let (np, d) = (g.num_patches(), g.patch_dim());
    let mut patches = Vec::with_capacity(np * d);
    index.gather_into(x, &mut patches);
    if !wants.input {
        return self_kernel_grouped(&patches, d, np, st, comps, weights, wants);
    }
    let nb = 2 * comps.n();
    let mut out = SelfKernel {
        value: T::zero(),
        g_base: vec![T::zero(); if wants.base { nb } else { 0 }],
        g_w: vec![T::zero(); if wants.weights { np } else { 0 }],
        g_input: Vec::new(),
    };
    let mut g_patch = vec![T::zero(); if wants.input { np * d } else { 0 }];
    let mut parts = vec![T::zero(); nb];
    let w = |p: usize| weights.map_or(T::one(), |w| w[p]);
    let two = T::lit(2.0);

    let mut visit = |a: usize, b: usize, mult: T, out: &mut SelfKernel<T>, g_patch: &mut [T]| {
        let xa = &patches[a * d..(a + 1) * d];
        let xb = &patches[b * d..(b + 1) * d];
        let sq = sq_dist(xa, xb);
        let (wa, wb) = (w(a), w(b));
        let coef = mult * wa * wb;
        if !wants.any() {
            out.value += coef * comps.eval(sq);
            return;
        }
        let (k, dsq) = comps.eval_grad(sq, &mut parts);
        out.value += coef * k;
        if wants.base {
            for (gb, &pb) in out.g_base.iter_mut().zip(&parts) {
                *gb += coef * pb;
            }
        }
        if wants.weights {
            out.g_w[a] += mult * wb * k;
            out.g_w[b] += mult * wa * k;
        }
        if wants.input && a != b {
            let s = coef * dsq * two;
            for t in 0..d {
                let diff = s * (xa[t] - xb[t]);
                g_patch[a * d + t] += diff;
                g_patch[b * d + t] -= diff;
            }
        }
    };

    let all: Vec<usize>;
    let symmetric = match &st.subsets {
        None => {
            all = (0..np).collect();
            Some(&all[..])
        }
        Some(s) if s.left.indices == s.right.indices => Some(&s.left.indices[..]),
        Some(_) => None,
    };
    if let Some(idx) = symmetric {
        for (i, &a) in idx.iter().enumerate() {
            visit(a, a, T::one(), &mut out, &mut g_patch);
            for &b in &idx[i + 1..] {
                visit(a, b, two, &mut out, &mut g_patch);
            }
        }
    } else if let Some(s) = &st.subsets {
        for &a in &s.left.indices {
            for &b in &s.right.indices {
                visit(a, b, T::one(), &mut out, &mut g_patch);
            }
        }
    }
    if wants.input {
        out.g_input = vec![T::zero(); x.len()];
        scatter_patch_grad(index, &g_patch, &mut out.g_input);
    }
    out
}

/// Identical patches among `idx`, merged with their summed weights.
struct Groups<T> {
    reps: Vec<usize>,
    weight: Vec<T>,
    member: Vec<(usize, usize)>,
}

fn group_patches<T: Scalar>(patches: &[T], d: usize, idx: &[usize], weights: Option<&[T]>) -> Groups<T> {
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::with_capacity(idx.len());
    let mut g = Groups {
        reps: Vec::new(),
        weight: Vec::new(),
        member: Vec::with_capacity(idx.len()),
    };
    for &p in idx {
        let key: Vec<u64> = patches[p * d..(p + 1) * d]
            .iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN).to_bits())
            .collect();
        let u = *seen.entry(key).or_insert_with(|| {
            g.reps.push(p);
            g.weight.push(T::zero());
            g.reps.len() - 1
        });
        g.weight[u] += weights.map_or(T::one(), |w| w[p]);
        g.member.push((p, u));
    }
    g
}

/// [`self_kernel`] without input gradients, evaluating each distinct pair of
/// patch values once.
fn self_kernel_grouped<T: Scalar>(
    patches: &[T],
    d: usize,
    np: usize,
    st: &KernelStructure,
    comps: &Comps<T>,
    weights: Option<&[T]>,
    wants: Wants,
) -> SelfKernel<T> {
    let nb = 2 * comps.n();
    let mut out = SelfKernel {
        value: T::zero(),
        g_base: vec![T::zero(); if wants.base { nb } else { 0 }],
        g_w: vec![T::zero(); if wants.weights { np } else { 0 }],
        g_input: Vec::new(),
    };
    let mut parts = vec![T::zero(); nb];
    let two = T::lit(2.0);
    let patch = |p: usize| &patches[p * d..(p + 1) * d];
    let mut pair = |a: usize, b: usize, coef: T, out: &mut SelfKernel<T>| -> T {
        let sq = sq_dist(patch(a), patch(b));
        if !wants.any() {
            let k = comps.eval(sq);
            out.value += coef * k;
            return k;
        }
        let (k, _) = comps.eval_grad(sq, &mut parts);
        out.value += coef * k;
        if wants.base {
            for (gb, &pb) in out.g_base.iter_mut().zip(&parts) {
                *gb += coef * pb;
            }
        }
        k
    };

    let all: Vec<usize>;
    let symmetric = match &st.subsets {
        None => {
            all = (0..np).collect();
            Some(&all[..])
        }
        Some(s) if s.left.indices == s.right.indices => Some(&s.left.indices[..]),
        Some(_) => None,
    };
    if let Some(idx) = symmetric {
        let g = group_patches(patches, d, idx, weights);
        let u = g.reps.len();
        let mut rows = vec![T::zero(); if wants.weights { u } else { 0 }];
        for i in 0..u {
            let wi = g.weight[i];
            let k = pair(g.reps[i], g.reps[i], wi * wi, &mut out);
            if wants.weights {
                rows[i] += wi * k;
            }
            for j in i + 1..u {
                let wj = g.weight[j];
                let k = pair(g.reps[i], g.reps[j], two * wi * wj, &mut out);
                if wants.weights {
                    rows[i] += wj * k;
                    rows[j] += wi * k;
                }
            }
        }
        if wants.weights {
            for &(p, i) in &g.member {
                out.g_w[p] += two * rows[i];
            }
        }
    } else if let Some(s) = &st.subsets {
        let gl = group_patches(patches, d, &s.left.indices, weights);
        let gr = group_patches(patches, d, &s.right.indices, weights);
        let mut rows = vec![T::zero(); if wants.weights { gl.reps.len() } else { 0 }];
        let mut cols = vec![T::zero(); if wants.weights { gr.reps.len() } else { 0 }];
        for (i, (&a, &wa)) in gl.reps.iter().zip(&gl.weight).enumerate() {
            for (j, (&b, &wb)) in gr.reps.iter().zip(&gr.weight).enumerate() {
                let k = pair(a, b, wa * wb, &mut out);
                if wants.weights {
                    rows[i] += wb * k;
                    cols[j] += wa * k;
                }
            }
        }
        if wants.weights {
            for &(p, i) in &gl.member {
                out.g_w[p] += rows[i];
            }
            for &(p, j) in &gr.member {
                out.g_w[p] += cols[j];
            }
        }
    }
    out
}

fn scatter_patch_grad<T: Scalar>(index: &PatchIndex, g_patch: &[T], g_input: &mut [T]) {
    let d = index.geometry().patch_dim();
    for p in 0..index.geometry().num_patches() {
        for (&o, &g) in index.patch_offsets(p).iter().zip(&g_patch[p * d..(p + 1) * d]) {
            g_input[o] += g;
        }
    }
}

fn check_input<T: Scalar>(x: &Matrix<T>, st: &KernelStructure) -> Result<(), KernelError> {
    if x.cols() != st.geom.input_dim() {
        return Err(KernelError::DimensionMismatch(format!(
            "inputs have {} columns, kernel expects {}",
            x.cols(),
            st.geom.input_dim()
        )));
    }
    Ok(())
}

fn check_inducing<T: Scalar>(z: &Matrix<T>, st: &KernelStructure) -> Result<(), KernelError> {
    if z.cols() != st.geom.patch_dim() {
        return Err(KernelError::DimensionMismatch(format!(
            "inducing inputs have {} columns, kernel expects {}",
            z.cols(),
            st.geom.patch_dim()
        )));
    }
    Ok(())
}

/// Rows per parallel work item; fixed so reductions happen in a fixed order.
const CHUNK: usize = 4;

/// Per-chunk partial gradients, summed in chunk order.
struct Partial<T> {
    g_base: Vec<T>,
    g_w: Vec<T>,
    g_z: Vec<T>,
}

fn reduce_partials<T: Scalar>(parts: Vec<Partial<T>>, nb: usize, nw: usize, nz: usize) -> Partial<T> {
    let mut total = Partial {
        g_base: vec![T::zero(); nb],
        g_w: vec![T::zero(); nw],
        g_z: vec![T::zero(); nz],
    };
    for p in parts {
        for (a, b) in total.g_base.iter_mut().zip(&p.g_base) {
            *a += *b;
        }
        for (a, b) in total.g_w.iter_mut().zip(&p.g_w) {
            *a += *b;
        }
        for (a, b) in total.g_z.iter_mut().zip(&p.g_z) {
            *a += *b;
        }
    }
    total
}

/// `k(x_n, x_n) + σ_n²` for every row of `x`.
pub fn kff_diag<T: Scalar>(x: &Matrix<T>, spec: &KernelSpec<T>) -> Result<Vec<T>, KernelError> {
    let st = spec.structure(x.cols())?;
    check_input(x, &st)?;
    let vals = spec.values();
    Ok(kff_diag_core(x, &st, &vals, Wants::default())
        .into_iter()
        .map(|r| r.value)
        .collect())
}

fn kff_diag_core<T: Scalar>(
    x: &Matrix<T>,
    st: &KernelStructure,
    vals: &KernelValues<T>,
    wants: Wants,
) -> Vec<SelfKernel<T>> {
    let comps = Comps::from_log_params(&vals.base);
    let noise = vals.log_noise.exp();
    if vals.weights.is_none() && st.geom.num_patches() == 1 && st.geom.patch_dim() == st.geom.input_dim() {
        // whole-input kernel: k(x, x) = Σ σ_b²
        let nb = 2 * comps.n();
        return (0..x.rows())
            .map(|_| {
                let mut g_base = vec![T::zero(); if wants.base { nb } else { 0 }];
                if wants.base {
                    for b in 0..comps.n() {
                        g_base[2 * b] = comps.var[b];
                    }
                }
                SelfKernel {
                    value: comps.sum_var() + noise,
                    g_base,
                    g_w: Vec::new(),
                    g_input: if wants.input {
                        vec![T::zero(); x.cols()]
                    } else {
                        Vec::new()
                    },
                }
            })
            .collect();
    }
    let index = PatchIndex::new(st.geom);
    let weights = vals.weights.as_deref();
    (0..x.rows())
        .into_par_iter()
        .map(|n| {
            let mut r = self_kernel(x.row(n), &index, st, &comps, weights, wants);
            r.value += noise;
            r
        })
        .collect()
}

/// Cross-covariance `K_fz[n, j] = Σ_{p∈S} w_p k(x_n^[p], z_j)`.
pub fn kfz<T: Scalar>(
    x: &Matrix<T>,
    z: &Matrix<T>,
    spec: &KernelSpec<T>,
) -> Result<Matrix<T>, KernelError> {
    let st = spec.structure(x.cols())?;
    check_input(x, &st)?;
    check_inducing(z, &st)?;
    Ok(kfz_value(x, z, &st, &spec.values()))
}

fn left_patches(st: &KernelStructure) -> Vec<usize> {
    match &st.subsets {
        Some(s) => s.left.indices.clone(),
        None => (0..st.geom.num_patches()).collect(),
    }
}

fn kfz_value<T: Scalar>(
    x: &Matrix<T>,
    z: &Matrix<T>,
    st: &KernelStructure,
    vals: &KernelValues<T>,
) -> Matrix<T> {
    let comps = Comps::from_log_params(&vals.base);
    let index = PatchIndex::new(st.geom);
    let d = st.geom.patch_dim();
    let m = z.rows();
    let left = left_patches(st);
    let weights = vals.weights.as_deref();
    let rows: Vec<Vec<T>> = (0..x.rows())
        .into_par_iter()
        .map(|n| {
            let mut patches = Vec::new();
            index.gather_into(x.row(n), &mut patches);
            let g = group_patches(&patches, d, &left, weights);
            (0..m)
                .map(|j| {
                    let zj = z.row(j);
                    let mut acc = T::zero();
                    for (&p, &w) in g.reps.iter().zip(&g.weight) {
                        acc += w * comps.eval(sq_dist(&patches[p * d..(p + 1) * d], zj));
                    }
                    acc
                })
                .collect()
        })
        .collect();
    Matrix::from_vec(x.rows(), m, rows.concat()).expect("kfz shape")
}

/// Inducing covariance `K_zz[i, j] = k(z_i, z_j) + σ_n² δ_ij`.
pub fn kzz<T: Scalar>(z: &Matrix<T>, spec: &KernelSpec<T>) -> Result<Matrix<T>, KernelError> {
    let d = z.cols();
    let base = spec.base();
    let comps = Comps::new(base);
    let noise = spec.noise_variance();
    if let KernelSpec::Conv(c) = spec {
        if c.geom.patch_dim() != d {
            return Err(KernelError::DimensionMismatch(format!(
                "inducing inputs have {d} columns, patches have {}",
                c.geom.patch_dim()
            )));
        }
    }
    Ok(kzz_value(z, &comps, noise))
}

fn kzz_value<T: Scalar>(z: &Matrix<T>, comps: &Comps<T>, noise: T) -> Matrix<T> {
    let m = z.rows();
    let mut k = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let v = comps.eval(sq_dist(z.row(i), z.row(j)));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] += noise;
    }
    k
}

/// Tape handles for a layer kernel's trainable hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct KernelVars<'t, T> {
    /// `1 × 2B` row of `[log σ², log κ]` pairs.
    pub base: Var<'t, T>,
    /// `1 × P` patch weights.
    pub weights: Option<Var<'t, T>>,
    /// `1 × 1` log noise variance.
    pub log_noise: Var<'t, T>,
}

impl<'t, T: Scalar> KernelVars<'t, T> {
    fn values(&self) -> KernelValues<T> {
        KernelValues {
            base: self.base.value().as_slice().to_vec(),
            weights: self.weights.map(|w| w.value().as_slice().to_vec()),
            log_noise: self.log_noise.scalar(),
        }
    }

    fn parents(&self, extra: &[Var<'t, T>]) -> Vec<Var<'t, T>> {
        let mut v = vec![self.base, self.log_noise];
        if let Some(w) = self.weights {
            v.push(w);
        }
        v.extend_from_slice(extra);
        v
    }
}

/// Differentiable `K_ff` diagonal as a `B × 1` column.
///
/// Gradients are accumulated during the forward sweep, so the backward
/// pass only rescales them by the upstream gradient.
pub fn kff_diag_var<'t, T: Scalar>(
    st: &KernelStructure,
    kv: &KernelVars<'t, T>,
    x: Var<'t, T>,
) -> Result<Var<'t, T>, KernelError> {
    let xv = x.value();
    check_input(&xv, st)?;
    let wants = Wants {
        base: kv.base.requires_grad(),
        weights: kv.weights.is_some_and(|w| w.requires_grad()),
        input: x.requires_grad(),
    };
    let vals = kv.values();
    let rows = kff_diag_core(&xv, st, &vals, wants);
    let value = Matrix::column(rows.iter().map(|r| r.value).collect());
    let noise = vals.log_noise.exp();
    let parents = kv.parents(&[x]);
    let has_w = kv.weights.is_some();
    let backward: BackwardFn<T> = Box::new(move |a| {
        let g = a.grad;
        let nb = a.parents[0].len();
        let mut g_base = Matrix::zeros(1, nb);
        let mut g_noise = T::zero();
        let np = if has_w { a.parents[2].len() } else { 0 };
        let mut g_w = Matrix::zeros(1, np.max(1));
        let x_shape = a.parents[a.parents.len() - 1].shape();
        let mut g_x = wants.input.then(|| Matrix::zeros(x_shape.0, x_shape.1));
        for (n, r) in rows.iter().enumerate() {
            let gn = g[(n, 0)];
            g_noise += gn * noise;
            if wants.base {
                for (t, &v) in r.g_base.iter().enumerate() {
                    g_base[(0, t)] += gn * v;
                }
            }
            if wants.weights {
                for (t, &v) in r.g_w.iter().enumerate() {
                    g_w[(0, t)] += gn * v;
                }
            }
            if let Some(gx) = g_x.as_mut() {
                for (o, &v) in gx.row_mut(n).iter_mut().zip(&r.g_input) {
                    *o = gn * v;
                }
            }
        }
        let mut out = vec![wants.base.then_some(g_base), Some(Matrix::scalar(g_noise))];
        if has_w {
            out.push(wants.weights.then_some(g_w));
        }
        out.push(g_x);
        out
    });
    Ok(x.tape().custom(&parents, value, backward))
}

/// Differentiable cross-covariance `K_fz` (`B × M`).
pub fn kfz_var<'t, T: Scalar>(
    st: &KernelStructure,
    kv: &KernelVars<'t, T>,
    x: Var<'t, T>,
    z: Var<'t, T>,
) -> Result<Var<'t, T>, KernelError> {
    let (xv, zv) = (x.value(), z.value());
    check_input(&xv, st)?;
    check_inducing(&zv, st)?;
    let value = kfz_value(&xv, &zv, st, &kv.values());
    let parents = kv.parents(&[x, z]);
    let has_w = kv.weights.is_some();
    let st = st.clone();
    let backward: BackwardFn<T> = Box::new(move |a| {
        let k = a.parents.len();
        let (lp, xm, zm) = (&a.parents[0], &a.parents[k - 2], &a.parents[k - 1]);
        let weights = has_w.then(|| a.parents[2].as_slice());
        let wants = Wants {
            base: a.needs[0],
            weights: has_w && a.needs[2],
            input: a.needs[k - 2],
        };
        let want_z = a.needs[k - 1];
        let (g_base, g_w, g_x, g_z) = kfz_backward(&st, lp.as_slice(), weights, xm, zm, a.grad, wants, want_z);
        let mut out = vec![wants.base.then_some(g_base), None];
        if has_w {
            out.push(wants.weights.then_some(g_w));
        }
        out.push(wants.input.then_some(g_x));
        out.push(want_z.then_some(g_z));
        out
    });
    Ok(x.tape().custom(&parents, value, backward))
}

#[allow(clippy::too_many_arguments)]
fn kfz_backward<T: Scalar>(
    st: &KernelStructure,
    log_params: &[T],
    weights: Option<&[T]>,
    x: &Matrix<T>,
    z: &Matrix<T>,
    grad: &Matrix<T>,
    wants: Wants,
    want_z: bool,
) -> (Matrix<T>, Matrix<T>, Matrix<T>, Matrix<T>) {
    let comps = Comps::from_log_params(log_params);
    let index = PatchIndex::new(st.geom);
    let (np, d) = (st.geom.num_patches(), st.geom.patch_dim());
    let (b, m) = (x.rows(), z.rows());
    let nb = log_params.len();
    let left = left_patches(st);
    let two = T::lit(2.0);
    let rows: Vec<usize> = (0..b).collect();
    let results: Vec<(Partial<T>, Vec<(usize, Vec<T>)>)> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut part = Partial {
                g_base: vec![T::zero(); nb],
                g_w: vec![T::zero(); if wants.weights { np } else { 0 }],
                g_z: vec![T::zero(); if want_z { m * d } else { 0 }],
            };
            let mut x_rows = Vec::new();
            let mut patches = Vec::new();
            let mut parts = vec![T::zero(); nb];
            for &n in chunk {
                index.gather_into(x.row(n), &mut patches);
                if !wants.input {
                    let g = group_patches(&patches, d, &left, weights);
                    let mut gk = vec![T::zero(); if wants.weights { g.reps.len() } else { 0 }];
                    for j in 0..m {
                        let gnj = grad[(n, j)];
                        if gnj == T::zero() {
                            continue;
                        }
                        let zj = z.row(j);
                        for (u, (&p, &wu)) in g.reps.iter().zip(&g.weight).enumerate() {
                            let xp = &patches[p * d..(p + 1) * d];
                            let (k, dsq) = comps.eval_grad(sq_dist(xp, zj), &mut parts);
                            let c = gnj * wu;
                            if wants.base {
                                for (gb, &pb) in part.g_base.iter_mut().zip(&parts) {
                                    *gb += c * pb;
                                }
                            }
                            if wants.weights {
                                gk[u] += gnj * k;
                            }
                            if want_z {
                                let s = c * dsq * two;
                                for t in 0..d {
                                    part.g_z[j * d + t] -= s * (xp[t] - zj[t]);
                                }
                            }
                        }
                    }
                    if wants.weights {
                        for &(p, u) in &g.member {
                            part.g_w[p] += gk[u];
                        }
                    }
                    continue;
                }
                let mut g_patch = vec![T::zero(); np * d];
                for j in 0..m {
                    let gnj = grad[(n, j)];
                    if gnj == T::zero() {
                        continue;
                    }
                    let zj = z.row(j);
                    for &p in &left {
                        let xp = &patches[p * d..(p + 1) * d];
                        let (k, dsq) = comps.eval_grad(sq_dist(xp, zj), &mut parts);
                        let wp = weights.map_or(T::one(), |w| w[p]);
                        let c = gnj * wp;
                        if wants.base {
                            for (gb, &pb) in part.g_base.iter_mut().zip(&parts) {
                                *gb += c * pb;
                            }
                        }
                        if wants.weights {
                            part.g_w[p] += gnj * k;
                        }
                        if wants.input || want_z {
                            let s = c * dsq * two;
                            for t in 0..d {
                                let diff = s * (xp[t] - zj[t]);
                                if wants.input {
                                    g_patch[p * d + t] += diff;
                                }
                                if want_z {
                                    part.g_z[j * d + t] -= diff;
                                }
                            }
                        }
                    }
                }
                if wants.input {
                    let mut gx = vec![T::zero(); x.cols()];
                    scatter_patch_grad(&index, &g_patch, &mut gx);
                    x_rows.push((n, gx));
                }
            }
            (part, x_rows)
        })
        .collect();
    let mut g_x = Matrix::zeros(b, x.cols());
    let mut partials = Vec::with_capacity(results.len());
    for (part, x_rows) in results {
        for (n, gx) in x_rows {
            g_x.row_mut(n).copy_from_slice(&gx);
        }
        partials.push(part);
    }
    let total = reduce_partials(
        partials,
        nb,
        if wants.weights { np } else { 0 },
        if want_z { m * d } else { 0 },
    );
    let g_base = Matrix::row_vector(total.g_base);
    let g_w = if wants.weights {
        Matrix::row_vector(total.g_w)
    } else {
        Matrix::zeros(1, 1)
    };
    let g_z = if want_z {
        Matrix::from_vec(m, d, total.g_z).expect("z gradient shape")
    } else {
        Matrix::zeros(1, 1)
    };
    (g_base, g_w, g_x, g_z)
}

/// Differentiable inducing covariance `K_zz` (`M × M`).
pub fn kzz_var<'t, T: Scalar>(
    st: &KernelStructure,
    kv: &KernelVars<'t, T>,
    z: Var<'t, T>,
) -> Result<Var<'t, T>, KernelError> {
    let zv = z.value();
    check_inducing(&zv, st)?;
    let vals = kv.values();
    let comps = Comps::from_log_params(&vals.base);
    let value = kzz_value(&zv, &comps, vals.log_noise.exp());
    let parents = vec![kv.base, kv.log_noise, z];
    let backward: BackwardFn<T> = Box::new(move |a| {
        let (lp, zm, g) = (&a.parents[0], &a.parents[2], a.grad);
        let comps = Comps::from_log_params(lp.as_slice());
        let noise = a.parents[1].to_scalar().exp();
        let (m, d) = zm.shape();
        let nb = lp.len();
        let mut g_base = vec![T::zero(); nb];
        let mut g_z = Matrix::zeros(m, d);
        let mut parts = vec![T::zero(); nb];
        let mut g_noise = T::zero();
        let two = T::lit(2.0);
        for i in 0..m {
            g_noise += g[(i, i)] * noise;
            for j in 0..=i {
                let gij = if i == j { g[(i, i)] } else { g[(i, j)] + g[(j, i)] };
                let (zi, zj) = (zm.row(i), zm.row(j));
                let (_, dsq) = comps.eval_grad(sq_dist(zi, zj), &mut parts);
                for (gb, &pb) in g_base.iter_mut().zip(&parts) {
                    *gb += gij * pb;
                }
                if a.needs[2] && i != j {
                    let s = gij * dsq * two;
                    for t in 0..d {
                        let diff = s * (zi[t] - zj[t]);
                        g_z[(i, t)] += diff;
                        g_z[(j, t)] -= diff;
                    }
                }
            }
        }
        vec![
            a.needs[0].then(|| Matrix::row_vector(g_base)),
            Some(Matrix::scalar(g_noise)),
            a.needs[2].then_some(g_z),
        ]
    });
    Ok(z.tape().custom(&parents, value, backward))
}
