//! Patch geometry, patch extraction and random patch subsets.
//!
//! Images are stored row-major with channels interleaved last: pixel
//! `(y, x, c)` of a `W×H×C` image lives at `(y·W + x)·C + c`. Patches are
//! enumerated row-major over the grid of top-left corners, and each patch is
//! flattened the same way as an image, so a patch vector spans all channels.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::random::{substream, Stream};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatchError {
    #[error("invalid patch geometry: {0}")]
    InvalidGeometry(String),
    #[error("input of length {found} does not match geometry expecting {expected}")]
    GeometryMismatch { expected: usize, found: usize },
    #[error("cannot draw {k} distinct patches out of {total}")]
    InvalidSize { k: usize, total: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub patch_w: usize,
    pub patch_h: usize,
    pub stride: usize,
}

impl PatchGeometry {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        patch_w: usize,
        patch_h: usize,
        stride: usize,
    ) -> Result<Self, PatchError> {
        let g = Self {
            width,
            height,
            channels,
            patch_w,
            patch_h,
            stride,
        };
        g.validate()?;
        Ok(g)
    }

    /// A single patch covering the whole input; the kernel then reduces to
    /// its base kernel on the flattened input.
    pub fn whole(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            patch_w: width,
            patch_h: height,
            stride: 1,
        }
    }

    /// Hidden representations are 1-D signals of length `len`, windowed into
    /// contiguous patches of `window` entries.
    pub fn signal(len: usize, window: usize, stride: usize) -> Result<Self, PatchError> {
        Self::new(len, 1, 1, window, 1, stride)
    }

    pub fn validate(&self) -> Result<(), PatchError> {
        let bad = |m: &str| Err(PatchError::InvalidGeometry(m.to_string()));
        if self.width == 0 || self.height == 0 || self.channels == 0 {
            return bad("image dimensions must be positive");
        }
        if self.patch_w == 0 || self.patch_h == 0 {
            return bad("patch dimensions must be positive");
        }
        if self.patch_w > self.width || self.patch_h > self.height {
            return bad("patch larger than image");
        }
        if self.stride == 0 {
            return bad("stride must be at least 1");
        }
        Ok(())
    }

    /// Patch grid as `(columns, rows)`.
    pub fn grid(&self) -> (usize, usize) {
        (
            (self.width - self.patch_w) / self.stride + 1,
            (self.height - self.patch_h) / self.stride + 1,
        )
    }

    pub fn num_patches(&self) -> usize {
        let (gx, gy) = self.grid();
        gx * gy
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_w * self.patch_h * self.channels
    }

    pub fn input_dim(&self) -> usize {
        self.width * self.height * self.channels
    }

    /// For every patch, the input offsets of its entries in patch order;
    /// `P × patch_dim` offsets laid out patch by patch.
    pub fn offsets(&self) -> Vec<usize> {
        let (gx, gy) = self.grid();
        let mut out = Vec::with_capacity(self.num_patches() * self.patch_dim());
        for py in 0..gy {
            for px in 0..gx {
                let (y0, x0) = (py * self.stride, px * self.stride);
                for dy in 0..self.patch_h {
                    for dx in 0..self.patch_w {
                        let base = ((y0 + dy) * self.width + x0 + dx) * self.channels;
                        out.extend(base..base + self.channels);
                    }
                }
            }
        }
        out
    }
}

/// Precomputed gather map for one geometry.
#[derive(Clone, Debug)]
pub struct PatchIndex {
    geom: PatchGeometry,
    offsets: Vec<usize>,
}

impl PatchIndex {
    pub fn new(geom: PatchGeometry) -> Self {
        Self {
            offsets: geom.offsets(),
            geom,
        }
    }

    pub fn geometry(&self) -> &PatchGeometry {
        &self.geom
    }

    /// Input offsets read by patch `p`.
    pub fn patch_offsets(&self, p: usize) -> &[usize] {
        let d = self.geom.patch_dim();
        &self.offsets[p * d..(p + 1) * d]
    }

    /// Writes all patches of `image` into `out` (`P·d` entries).
    pub fn gather_into<T: Copy>(&self, image: &[T], out: &mut Vec<T>) {
        out.clear();
        out.extend(self.offsets.iter().map(|&o| image[o]));
    }
}

/// All patches of `image` as a `P × (w·h·C)` matrix, row `p` being the
/// patch at row-major grid position `p`.
pub fn extract_patches<T: Scalar>(image: &[T], geom: &PatchGeometry) -> Result<Matrix<T>, PatchError> {
    geom.validate()?;
    if image.len() != geom.input_dim() {
        return Err(PatchError::GeometryMismatch {
            expected: geom.input_dim(),
            found: image.len(),
        });
    }
    let index = PatchIndex::new(*geom);
    let mut buf = Vec::new();
    index.gather_into(image, &mut buf);
    Ok(Matrix::from_vec(geom.num_patches(), geom.patch_dim(), buf).expect("patch buffer shape"))
}

/// Sorted distinct patch indices together with the seed they were drawn with.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSubset {
    pub indices: Vec<usize>,
    pub seed: u64,
}

impl PatchSubset {
    pub fn full(total: usize) -> Self {
        Self {
            indices: (0..total).collect(),
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Draws `k` of `total` patch indices uniformly without replacement.
pub fn draw_subset(total: usize, k: usize, seed: u64) -> Result<PatchSubset, PatchError> {
    if k == 0 || k > total {
        return Err(PatchError::InvalidSize { k, total });
    }
    let mut rng = substream(seed, Stream::Subset, &[total as u64, k as u64]);
    let mut indices = sample(&mut rng, total, k).into_vec();
    indices.sort_unstable();
    Ok(PatchSubset { indices, seed })
}

/// Size of a subset covering `fraction` of `total` patches, at least one.
pub fn subset_size(total: usize, fraction: f64) -> usize {
    ((total as f64 * fraction).floor() as usize).clamp(1, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mnist_patch_counts() {
        let g5 = PatchGeometry::new(28, 28, 1, 5, 5, 1).unwrap();
        assert_eq!(g5.num_patches(), 576);
        assert_eq!(g5.patch_dim(), 25);
        let g3 = PatchGeometry::new(28, 28, 1, 3, 3, 1).unwrap();
        assert_eq!(g3.num_patches(), 676);
        let caltech = PatchGeometry::new(50, 50, 3, 5, 5, 1).unwrap();
        assert_eq!(caltech.num_patches(), 2116);
        assert_eq!(caltech.patch_dim(), 75);
    }

    #[test]
    fn extraction_layout() {
        let img: Vec<f64> = (0..28 * 28).map(|v| v as f64).collect();
        let g = PatchGeometry::new(28, 28, 1, 5, 5, 1).unwrap();
        let p = extract_patches(&img, &g).unwrap();
        assert_eq!(p.shape(), (576, 25));
        // patch 1 starts one pixel to the right of patch 0
        assert_eq!(p[(1, 0)], 1.0);
        // patch 24 starts at the beginning of row 1
        assert_eq!(p[(24, 0)], 28.0);
        // second row of patch 0
        assert_eq!(p[(0, 5)], 28.0);
    }

    #[test]
    fn whole_image_patch_is_the_image() {
        let img: Vec<f64> = (0..4 * 3 * 2).map(|v| v as f64 * 0.1).collect();
        let g = PatchGeometry::whole(4, 3, 2);
        let p = extract_patches(&img, &g).unwrap();
        assert_eq!(p.shape(), (1, 24));
        assert_eq!(p.as_slice(), &img[..]);
    }

    #[test]
    fn channels_are_interleaved_within_a_patch() {
        // 2x2 image, 2 channels, 1x1 patches
        let img = vec![0.0, 10.0, 1.0, 11.0, 2.0, 12.0, 3.0, 13.0];
        let g = PatchGeometry::new(2, 2, 2, 1, 1, 1).unwrap();
        let p = extract_patches(&img, &g).unwrap();
        assert_eq!(p.row(2), &[2.0, 12.0]);
    }

    #[test]
    fn mismatched_image_is_rejected() {
        let g = PatchGeometry::new(4, 4, 1, 2, 2, 1).unwrap();
        assert!(matches!(
            extract_patches(&[0.0; 15], &g),
            Err(PatchError::GeometryMismatch { .. })
        ));
        assert!(PatchGeometry::new(4, 4, 1, 5, 2, 1).is_err());
        assert!(PatchGeometry::new(4, 4, 1, 2, 2, 0).is_err());
    }

    #[test]
    fn subset_examples() {
        assert_eq!(draw_subset(10, 10, 3).unwrap().indices, (0..10).collect::<Vec<_>>());
        let one = draw_subset(576, 1, 9).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one.indices[0] < 576);
        let tenth = draw_subset(2116, subset_size(2116, 0.1), 0).unwrap();
        assert_eq!(tenth.len(), 211);
        assert!(tenth.indices.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(tenth, draw_subset(2116, 211, 0).unwrap());
        assert!(matches!(draw_subset(5, 6, 0), Err(PatchError::InvalidSize { .. })));
    }

    proptest! {
        #[test]
        fn patch_count_matches_closed_form(
            w in 1usize..20, h in 1usize..20, pw in 1usize..20, ph in 1usize..20, s in 1usize..6
        ) {
            prop_assume!(pw <= w && ph <= h);
            let g = PatchGeometry::new(w, h, 1, pw, ph, s).unwrap();
            let expected = ((w - pw) / s + 1) * ((h - ph) / s + 1);
            prop_assert_eq!(g.num_patches(), expected);
            let img: Vec<f64> = (0..w * h).map(|v| v as f64).collect();
            prop_assert_eq!(extract_patches(&img, &g).unwrap().rows(), expected);
        }

        #[test]
        fn tiling_patches_partition_the_image(tiles_x in 1usize..5, tiles_y in 1usize..5, pw in 1usize..4, ph in 1usize..4, c in 1usize..3) {
            // stride = patch size and the image an exact multiple: a partition
            let g = PatchGeometry { width: tiles_x * pw, height: tiles_y * ph, channels: c, patch_w: pw, patch_h: ph, stride: 0 };
            let g = PatchGeometry { stride: pw, ..g };
            prop_assume!(pw == ph);
            let img: Vec<f64> = (0..g.input_dim()).map(|v| v as f64).collect();
            let patches = extract_patches(&img, &g).unwrap();
            let mut pixels = patches.into_vec();
            pixels.sort_by(f64::total_cmp);
            prop_assert_eq!(pixels, img);
        }

        #[test]
        fn subsets_are_sorted_and_distinct(total in 1usize..3000, frac in 0.0f64..1.0, seed in any::<u64>()) {
            let k = subset_size(total, frac);
            let s = draw_subset(total, k, seed).unwrap();
            prop_assert_eq!(s.len(), k);
            prop_assert!(s.indices.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(s.indices.iter().all(|&i| i < total));
        }
    }
}
