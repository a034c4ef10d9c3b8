//! Seeded random streams.
//!
//! Every stochastic step draws from a [`ChaCha8Rng`] whose key is derived
//! from the run's root seed and whose stream id is derived from a tag path
//! such as `("noise", step)`. Identical seeds therefore replay identically
//! no matter how work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// Stream purposes; the discriminant becomes part of the stream id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Shuffle = 1,
    Noise = 2,
    Init = 3,
    Subset = 4,
    Predict = 5,
    Data = 6,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a root seed with a purpose and counters into one 64-bit seed.
pub fn derive_seed(root: u64, purpose: Stream, counters: &[u64]) -> u64 {
    let mut h = splitmix(root ^ splitmix(purpose as u64));
    for &c in counters {
        h = splitmix(h ^ splitmix(c.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

/// Generator for one `(purpose, counters…)` substream of `root`.
pub fn substream(root: u64, purpose: Stream, counters: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(derive_seed(root, purpose, counters));
    rng
}

/// `rows × cols` i.i.d. standard normal draws.
pub fn gaussian_samples<T: Scalar, R: rand::Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let a: Matrix<f64> = gaussian_samples(&mut substream(0, Stream::Noise, &[3]), 4, 5);
        let b: Matrix<f64> = gaussian_samples(&mut substream(0, Stream::Noise, &[3]), 4, 5);
        assert_eq!(a, b);
        let c: Matrix<f64> = gaussian_samples(&mut substream(0, Stream::Noise, &[4]), 4, 5);
        assert_ne!(a, c);
    }

    #[test]
    fn shape_is_respected() {
        let m: Matrix<f64> = gaussian_samples(&mut substream(1, Stream::Init, &[]), 2, 3);
        assert_eq!(m.shape(), (2, 3));
        assert_eq!(m.len(), 6);
    }

    #[test]
    fn moments_of_a_million_draws() {
        let m: Matrix<f64> = gaussian_samples(&mut substream(0, Stream::Noise, &[]), 1000, 1000);
        let n = m.len() as f64;
        let mean = m.sum() / n;
        let var = m.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "variance {var}");
    }
}
