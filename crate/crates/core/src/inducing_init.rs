//! Inducing input initialization by k-means and SVD mean maps for inner
//! layers.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::kernels::{sq_dist, KernelError, KernelSpec};
use crate::numerics::random::{substream, Stream};
use crate::numerics::{gaussian_samples, Matrix};
use crate::patching::PatchIndex;
use crate::scalar::Scalar;
use crate::svgp_layer::{sample_with, LayerError, LayerState, MeanMap};

pub const MAX_ITER: usize = 100;
pub const IMAGE_CAP: usize = 10_000;
pub const PATCH_CAP: usize = 100_000;

#[derive(Debug, Error)]
pub enum InitError {
    #[error("need at least {needed} points, got {available}")]
    TooFewPoints { needed: usize, available: usize },
    #[error("only {distinct} distinct points, {needed} centroids requested")]
    Degenerate { distinct: usize, needed: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error("no layers to initialize")]
    Empty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult<T> {
    pub centroids: Matrix<T>,
    pub counts: Vec<usize>,
    pub iterations: usize,
    /// Within-cluster sum of squares after each iteration.
    pub objectives: Vec<T>,
}

/// Lloyd's algorithm from k-means++ seeds. Stops once assignments repeat
/// or after `max_iter` iterations.
pub fn kmeans<T: Scalar, R: Rng + ?Sized>(
    points: &Matrix<T>,
    m: usize,
    rng: &mut R,
    max_iter: usize,
) -> Result<KMeansResult<T>, InitError> {
    let n = points.rows();
    if m == 0 || n < m {
        return Err(InitError::TooFewPoints {
            needed: m.max(1),
            available: n,
        });
    }
    let d = points.cols();
    let mut centroids = seed_plus_plus(points, m, rng)?;
    let mut bounds: Vec<Bounds<T>> = vec![Bounds::unset(); n];
    let mut objectives = Vec::new();
    let mut counts = vec![0; m];
    let mut iterations = 0;
    while iterations < max_iter.max(1) {
        iterations += 1;
        let half_gap = half_separation(&centroids);
        let changed = bounds
            .par_iter_mut()
            .enumerate()
            .map(|(i, b)| b.refresh(points.row(i), &centroids, &half_gap))
            .reduce(|| false, |a, b| a || b);
        let mut assign: Vec<usize> = bounds.iter().map(|b| b.assign).collect();
        counts.iter_mut().for_each(|c| *c = 0);
        assign.iter().for_each(|&k| counts[k] += 1);
        let repaired = counts.contains(&0) && {
            let nearest: Vec<(usize, T)> = (0..n)
                .into_par_iter()
                .map(|i| nearest_centroid(points.row(i), &centroids))
                .collect();
            repair_empty(&mut assign, &mut counts, &nearest)
        };
        if repaired {
            for (b, &k) in bounds.iter_mut().zip(&assign) {
                if b.assign != k {
                    *b = Bounds::unset();
                    b.assign = k;
                }
            }
        }
        let mut sums = Matrix::zeros(m, d);
        for (i, &k) in assign.iter().enumerate() {
            for (s, &v) in sums.row_mut(k).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for (k, &c) in counts.iter().enumerate() {
            let inv = T::one() / T::from_count(c);
            sums.row_mut(k).iter_mut().for_each(|s| *s *= inv);
        }
        let shift: Vec<T> = (0..m).map(|k| sq_dist(sums.row(k), centroids.row(k)).sqrt()).collect();
        let max_shift = shift.iter().copied().fold(T::zero(), T::max);
        centroids = sums;
        for b in bounds.iter_mut() {
            if b.assign != usize::MAX {
                b.upper += shift[b.assign];
                b.lower -= max_shift;
            }
        }
        objectives.push(
            (0..n)
                .map(|i| sq_dist(points.row(i), centroids.row(assign[i])))
                .sum(),
        );
        if !changed && !repaired {
            break;
        }
    }
    Ok(KMeansResult {
        centroids,
        counts,
        iterations,
        objectives,
    })
}

/// Distance bounds that let an assignment be confirmed without scanning
/// every centroid.
#[derive(Clone, Copy, Debug)]
struct Bounds<T> {
    assign: usize,
    upper: T,
    lower: T,
}

impl<T: Scalar> Bounds<T> {
    fn unset() -> Self {
        Self {
            assign: usize::MAX,
            upper: T::infinity(),
            lower: T::neg_infinity(),
        }
    }

    /// Reassigns `x` to its nearest centroid; true when the assignment moved.
    fn refresh(&mut self, x: &[T], centroids: &Matrix<T>, half_gap: &[T]) -> bool {
        let slack = T::one() + T::lit(1e-9);
        if self.assign != usize::MAX {
            let bound = half_gap[self.assign].max(self.lower);
            if self.upper * slack < bound {
                return false;
            }
            self.upper = sq_dist(x, centroids.row(self.assign)).sqrt();
            if self.upper * slack < bound {
                return false;
            }
        }
        let (mut best, mut d1, mut d2) = (0, T::infinity(), T::infinity());
        for k in 0..centroids.rows() {
            let dk = sq_dist(x, centroids.row(k));
            if dk < d1 {
                d2 = d1;
                d1 = dk;
                best = k;
            } else if dk < d2 {
                d2 = dk;
            }
        }
        let moved = self.assign != best;
        *self = Self {
            assign: best,
            upper: d1.sqrt(),
            lower: d2.sqrt(),
        };
        moved
    }
}

/// Half the distance from each centroid to its closest neighbour.
fn half_separation<T: Scalar>(centroids: &Matrix<T>) -> Vec<T> {
    let m = centroids.rows();
    let half = T::lit(0.5);
    (0..m)
        .into_par_iter()
        .map(|k| {
            (0..m)
                .filter(|&j| j != k)
                .map(|j| sq_dist(centroids.row(k), centroids.row(j)))
                .fold(T::infinity(), T::min)
                .sqrt()
                * half
        })
        .collect()
}

fn nearest_centroid<T: Scalar>(x: &[T], centroids: &Matrix<T>) -> (usize, T) {
    (0..centroids.rows())
        .map(|k| (k, sq_dist(x, centroids.row(k))))
        .fold((0, T::infinity()), |best, c| if c.1 < best.1 { c } else { best })
}

fn seed_plus_plus<T: Scalar, R: Rng + ?Sized>(points: &Matrix<T>, m: usize, rng: &mut R) -> Result<Matrix<T>, InitError> {
    let n = points.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])).to_f64_lossy())
        .collect();
    while chosen.len() < m {
        let total: f64 = d2.iter().sum();
        if !(total > 0.0) {
            return Err(InitError::Degenerate {
                distinct: chosen.len(),
                needed: m,
            });
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 {
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
        }
        let next = pick.expect("positive total weight");
        chosen.push(next);
        let c = points.row(next);
        d2.par_iter_mut().enumerate().for_each(|(i, w)| {
            *w = w.min(sq_dist(points.row(i), c).to_f64_lossy());
        });
    }
    Ok(points.select_rows(&chosen))
}

/// Moves the points farthest from their centroids into empty clusters.
fn repair_empty<T: Scalar>(assign: &mut [usize], counts: &mut [usize], nearest: &[(usize, T)]) -> bool {
    let empty: Vec<usize> = (0..counts.len()).filter(|&k| counts[k] == 0).collect();
    if empty.is_empty() {
        return false;
    }
    let mut order: Vec<usize> = (0..assign.len()).collect();
    order.sort_by(|&a, &b| nearest[b].1.partial_cmp(&nearest[a].1).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut candidates = order.into_iter();
    for k in empty {
        let i = candidates
            .by_ref()
            .find(|&i| counts[assign[i]] > 1)
            .expect("n >= m leaves a donor cluster");
        counts[assign[i]] -= 1;
        assign[i] = k;
        counts[k] = 1;
    }
    true
}

/// `k` of `n` row indices (sorted), or all of them when `n ≤ k`.
fn capped_rows<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut idx = sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Candidate inducing inputs for a layer: the inputs themselves for
/// whole-input kernels, otherwise (at most `cap`) extracted patches.
pub fn inducing_candidates<T: Scalar, R: Rng + ?Sized>(
    kernel: &KernelSpec<T>,
    inputs: &Matrix<T>,
    cap: usize,
    rng: &mut R,
) -> Result<Matrix<T>, InitError> {
    if !kernel.is_conv() {
        return Ok(inputs.clone());
    }
    let geom = kernel.structure(inputs.cols())?.geom;
    let index = PatchIndex::new(geom);
    let (p, dz) = (geom.num_patches(), geom.patch_dim());
    let picks = capped_rows(inputs.rows() * p, cap, rng);
    let mut buf = Vec::new();
    let mut out = Vec::with_capacity(picks.len() * dz);
    let mut last = usize::MAX;
    for flat in picks {
        let (img, patch) = (flat / p, flat % p);
        if img != last {
            index.gather_into(inputs.row(img), &mut buf);
            last = img;
        }
        out.extend_from_slice(&buf[patch * dz..(patch + 1) * dz]);
    }
    Ok(Matrix::from_vec(out.len() / dz, dz, out).expect("patch rows"))
}

/// Fixed linear mean map for an inner layer with inputs `h`: identity when
/// widths agree, `[I 0]` when the layer widens, otherwise the top `width`
/// right singular vectors of `h`.
pub fn svd_mean_map<T: Scalar>(h: &Matrix<T>, width: usize) -> MeanMap<T> {
    let d_in = h.cols();
    if d_in == width {
        return MeanMap::Identity;
    }
    if d_in < width {
        return MeanMap::Linear(Matrix::from_fn(d_in, width, |i, j| if i == j { T::one() } else { T::zero() }));
    }
    let a = DMatrix::from_row_iterator(h.rows(), d_in, h.as_slice().iter().map(|v| v.to_f64_lossy()));
    let eig = a.tr_mul(&a).symmetric_eigen();
    let mut order: Vec<usize> = (0..d_in).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let mut w = Matrix::zeros(d_in, width);
    for (c, &k) in order.iter().take(width).enumerate() {
        let v = eig.eigenvectors.column(k);
        let pivot = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for r in 0..d_in {
            w[(r, c)] = T::lit(sign * v[r]);
        }
    }
    MeanMap::Linear(w)
}

/// What a layer should look like before its inducing inputs are known.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerBlueprint<T> {
    pub kernel: KernelSpec<T>,
    pub width: usize,
    pub num_inducing: usize,
    pub trainable_z: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InitOptions {
    pub seed: u64,
    pub max_iter: usize,
    pub image_cap: usize,
    pub patch_cap: usize,
}

impl InitOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            max_iter: MAX_ITER,
            image_cap: IMAGE_CAP,
            patch_cap: PATCH_CAP,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Initialized<T> {
    pub layers: Vec<LayerState<T>>,
    /// Layers whose inputs were a sampled pass because the mean pass
    /// collapsed to fewer distinct points than inducing inputs.
    pub sampled_inputs: Vec<usize>,
}

/// Builds every layer, choosing inducing inputs by k-means over the
/// layer's inputs (or their patches) under a deterministic mean-only pass
/// of `x`. Conv and final layers get a zero mean; inner RBF layers the
/// [`svd_mean_map`].
pub fn init_layers<T: Scalar>(
    blueprints: &[LayerBlueprint<T>],
    x: &Matrix<T>,
    opts: &InitOptions,
) -> Result<Initialized<T>, InitError> {
    if blueprints.is_empty() {
        return Err(InitError::Empty);
    }
    let seed = opts.seed;
    let rows = capped_rows(x.rows(), opts.image_cap, &mut substream(seed, Stream::Init, &[0]));
    let mut h = x.select_rows(&rows);
    let mut prev: Option<(LayerState<T>, Matrix<T>)> = None;
    let mut layers = Vec::with_capacity(blueprints.len());
    let mut sampled_inputs = Vec::new();
    for (l, bp) in blueprints.iter().enumerate() {
        let tag = l as u64;
        let cluster = |h: &Matrix<T>| {
            let mut rng = substream(seed, Stream::Init, &[1, tag]);
            let points = inducing_candidates(&bp.kernel, h, opts.patch_cap, &mut rng)?;
            kmeans(&points, bp.num_inducing, &mut rng, opts.max_iter)
        };
        let km = match (cluster(&h), &prev) {
            (Err(InitError::Degenerate { .. }), Some((layer, input))) => {
                let (mean, var) = layer.conditional(input)?;
                let eps = gaussian_samples(&mut substream(seed, Stream::Init, &[2, tag]), mean.rows(), mean.cols());
                h = sample_with(&mean, &var, &eps)?;
                sampled_inputs.push(l);
                cluster(&h)?
            }
            (r, _) => r?,
        };
        let last = l + 1 == blueprints.len();
        let mean_map = if bp.kernel.is_conv() || last {
            MeanMap::Zero
        } else {
            svd_mean_map(&h, bp.width)
        };
        let layer = LayerState::new(bp.kernel.clone(), km.centroids, h.cols(), bp.width, mean_map, bp.trainable_z)?;
        if !last {
            let next = layer.conditional_mean(&h)?;
            prev = Some((layer.clone(), std::mem::replace(&mut h, next)));
        }
        layers.push(layer);
    }
    Ok(Initialized {
        layers,
        sampled_inputs,
    })
}
