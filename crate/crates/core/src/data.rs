//! Dataset loaders and synthetic generators.
//!
//! Images are flattened row-major with channels interleaved last, the
//! layout expected by [`crate::patching`].

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::random::{substream, Stream};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("malformed row {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("bad label {label} at record {line}")]
    BadLabel { line: usize, label: String },
    #[error("file of {len} bytes is not a whole number of {record}-byte records")]
    BadRecordSize { len: usize, record: usize },
    #[error("invalid size: {0}")]
    InvalidSize(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    /// `N × (W·H·C)`, values in `[0, 1]`.
    pub images: Matrix<T>,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        images: Matrix<T>,
        (width, height, channels): (usize, usize, usize),
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self, DataError> {
        let d = Self {
            images,
            width,
            height,
            channels,
            labels,
            num_classes,
            split,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.labels.len();
        if n == 0 {
            return Err(DataError::InvalidSize("dataset is empty".into()));
        }
        if self.images.rows() != n {
            return Err(DataError::CountMismatch {
                images: self.images.rows(),
                labels: n,
            });
        }
        if self.images.cols() != self.input_dim() {
            return Err(DataError::InvalidSize(format!(
                "images have {} values, geometry needs {}",
                self.images.cols(),
                self.input_dim()
            )));
        }
        if let Some((i, &l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= self.num_classes) {
            return Err(DataError::BadLabel {
                line: i,
                label: l.to_string(),
            });
        }
        let (lo, hi) = (T::zero(), T::one());
        if self.images.as_slice().iter().any(|&v| !(v >= lo && v <= hi)) {
            return Err(DataError::InvalidSize("pixel values outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.width * self.height * self.channels
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_meta()
        }
    }

    /// The first `n` records (all when `n` exceeds the size).
    pub fn take(&self, n: usize) -> Self {
        self.select(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// Keeps records whose label is in `classes`, relabelled by position in
    /// `classes`.
    pub fn filter_classes(&self, classes: &[usize]) -> Result<Self, DataError> {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        if keep.is_empty() {
            return Err(DataError::InvalidSize(format!("no records with labels {classes:?}")));
        }
        let mut out = self.select(&keep);
        for l in &mut out.labels {
            *l = classes.iter().position(|c| c == l).expect("kept label");
        }
        out.num_classes = classes.len();
        Ok(out)
    }

    fn clone_meta(&self) -> Self {
        Self {
            images: Matrix::zeros(1, 1),
            width: self.width,
            height: self.height,
            channels: self.channels,
            labels: Vec::new(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::TruncatedFile(format!("{what} header")))
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8]), DataError> {
    let magic = be_u32(bytes, 0, "image")?;
    if magic != IDX_IMAGES {
        return Err(DataError::BadMagic {
            expected: IDX_IMAGES,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, "image")? as usize;
    let rows = be_u32(bytes, 8, "image")? as usize;
    let cols = be_u32(bytes, 12, "image")? as usize;
    let body = &bytes[16..];
    let need = n * rows * cols;
    if body.len() < need {
        return Err(DataError::TruncatedFile(format!(
            "{} pixel bytes, header promises {need}",
            body.len()
        )));
    }
    Ok((n, rows, cols, &body[..need]))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8], DataError> {
    let magic = be_u32(bytes, 0, "label")?;
    if magic != IDX_LABELS {
        return Err(DataError::BadMagic {
            expected: IDX_LABELS,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, "label")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(DataError::TruncatedFile(format!(
            "{} label bytes, header promises {n}",
            body.len()
        )));
    }
    Ok(&body[..n])
}

/// MNIST from a pair of IDX files, pixels scaled by 1/255.
pub fn load_mnist<T: Scalar>(images: &Path, labels: &Path, split: Split) -> Result<Dataset<T>, DataError> {
    let img_bytes = read_file(images)?;
    let lbl_bytes = read_file(labels)?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes)?;
    let lbl = parse_idx_labels(&lbl_bytes)?;
    if lbl.len() != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: lbl.len(),
        });
    }
    if n == 0 {
        return Err(DataError::InvalidSize("no images".into()));
    }
    let scale = T::one() / T::lit(255.0);
    let data = pixels.iter().map(|&p| T::from_count(p as usize) * scale).collect();
    let labels = lbl
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if l < 10 {
                Ok(l as usize)
            } else {
                Err(DataError::BadLabel {
                    line: i,
                    label: l.to_string(),
                })
            }
        })
        .collect::<Result<_, _>>()?;
    let images = Matrix::from_vec(n, rows * cols, data).map_err(|e| DataError::InvalidSize(e.to_string()))?;
    Dataset::new(images, (cols, rows, 1), labels, 10, split)
}

/// Rectangles-image text file: each row holds 784 pixel values in `[0, 1]`
/// followed by a 0/1 label.
pub fn load_rectangles_image<T: Scalar>(path: &Path, split: Split) -> Result<Dataset<T>, DataError> {
    let text = String::from_utf8(read_file(path)?).map_err(|e| DataError::MalformedRow {
        line: 0,
        reason: e.to_string(),
    })?;
    parse_rectangles_image(&text, split)
}

pub fn parse_rectangles_image<T: Scalar>(text: &str, split: Split) -> Result<Dataset<T>, DataError> {
    const PIXELS: usize = 28 * 28;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|_| DataError::MalformedRow {
                    line: line_no,
                    reason: format!("not a number: {t:?}"),
                })
            })
            .collect::<Result<_, _>>()?;
        if values.len() != PIXELS + 1 {
            return Err(DataError::MalformedRow {
                line: line_no,
                reason: format!("{} values, expected {}", values.len(), PIXELS + 1),
            });
        }
        let label = values[PIXELS];
        if label != 0.0 && label != 1.0 {
            return Err(DataError::BadLabel {
                line: line_no,
                label: label.to_string(),
            });
        }
        if let Some(v) = values[..PIXELS].iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::MalformedRow {
                line: line_no,
                reason: format!("pixel {v} outside [0, 1]"),
            });
        }
        data.extend(values[..PIXELS].iter().map(|&v| T::lit(v)));
        labels.push(label as usize);
    }
    if labels.is_empty() {
        return Err(DataError::InvalidSize("no rows".into()));
    }
    let images = Matrix::from_vec(labels.len(), PIXELS, data).map_err(|e| DataError::InvalidSize(e.to_string()))?;
    Dataset::new(images, (28, 28, 1), labels, 2, split)
}

/// CIFAR-10 binary batches: records of one label byte followed by the red,
/// green and blue 32×32 planes.
pub fn load_cifar10<T: Scalar>(paths: &[&Path], split: Split) -> Result<Dataset<T>, DataError> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read_file(path)?;
        decode_cifar10(&bytes, &mut data, &mut labels)?;
    }
    if labels.is_empty() {
        return Err(DataError::InvalidSize("no records".into()));
    }
    let n = labels.len();
    let images = Matrix::from_vec(n, CIFAR_RECORD - 1, data).map_err(|e| DataError::InvalidSize(e.to_string()))?;
    Dataset::new(images, (CIFAR_SIDE, CIFAR_SIDE, 3), labels, 10, split)
}

/// Appends the decoded records of one CIFAR-10 batch.
pub fn decode_cifar10<T: Scalar>(bytes: &[u8], data: &mut Vec<T>, labels: &mut Vec<usize>) -> Result<(), DataError> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(DataError::BadRecordSize {
            len: bytes.len(),
            record: CIFAR_RECORD,
        });
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let scale = T::one() / T::lit(255.0);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(DataError::BadLabel {
                line: labels.len() + r,
                label: label.to_string(),
            });
        }
        labels.push(label);
        let px = &rec[1..];
        for i in 0..plane {
            for c in 0..3 {
                data.push(T::from_count(px[c * plane + i] as usize) * scale);
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyTask {
    /// Rectangle outlines; label 1 when taller than wide.
    Rectangles,
    /// One Gaussian blob per image; label 1 for blobs in the lower-right.
    Blobs,
}

/// Balanced synthetic two-class images of `size × size` pixels.
pub fn generate_toy<T: Scalar>(seed: u64, n: usize, size: usize, task: ToyTask) -> Result<Dataset<T>, DataError> {
    if n == 0 || n % 2 != 0 {
        return Err(DataError::InvalidSize(format!("toy sets need an even, positive size, got {n}")));
    }
    if size < 4 {
        return Err(DataError::InvalidSize(format!("toy images need at least 4 pixels a side, got {size}")));
    }
    let mut rng = substream(seed, Stream::Data, &[n as u64, size as u64, task as u64]);
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let img = match task {
            ToyTask::Rectangles => rectangle_image(&mut rng, size, label == 1),
            ToyTask::Blobs => blob_image(&mut rng, size, label == 1),
        };
        data.extend(img.into_iter().map(T::lit));
        labels.push(label);
    }
    let images = Matrix::from_vec(n, size * size, data).map_err(|e| DataError::InvalidSize(e.to_string()))?;
    Dataset::new(images, (size, size, 1), labels, 2, Split::Train)
}

fn rectangle_image<R: Rng + ?Sized>(rng: &mut R, size: usize, tall: bool) -> Vec<f64> {
    let long = rng.random_range(3..=size);
    let short = rng.random_range(2..long);
    let (w, h) = if tall { (short, long) } else { (long, short) };
    let x0 = rng.random_range(0..=size - w);
    let y0 = rng.random_range(0..=size - h);
    let mut img = vec![0.0; size * size];
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            if y == y0 || y == y0 + h - 1 || x == x0 || x == x0 + w - 1 {
                img[y * size + x] = 1.0;
            }
        }
    }
    img
}

fn blob_image<R: Rng + ?Sized>(rng: &mut R, size: usize, lower_right: bool) -> Vec<f64> {
    let s = size as f64;
    let (lo, hi) = if lower_right { (0.55 * s, 0.85 * s) } else { (0.15 * s, 0.45 * s) };
    let cx = rng.random_range(lo..hi);
    let cy = rng.random_range(lo..hi);
    let two_sigma2 = 2.0 * (s / 6.0).powi(2);
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
            (-((x - cx).powi(2) + (y - cy).powi(2)) / two_sigma2).exp()
        })
        .collect()
}

/// Uniform random `n × (w·h·c)` images, used for kernel timing studies.
pub fn synthetic_images<T: Scalar>(seed: u64, n: usize, (w, h, c): (usize, usize, usize)) -> Matrix<T> {
    let mut rng = substream(seed, Stream::Data, &[n as u64, (w * h * c) as u64]);
    Matrix::from_fn(n, w * h * c, |_, _| T::lit(rng.random_range(0.0..1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES, n, rows, cols] {
            v.extend(x.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    #[test]
    fn idx_parsing() {
        let bytes = idx_images(2, 2, 2, &[0, 255, 51, 102, 1, 2, 3, 4]);
        let (n, r, c, px) = parse_idx_images(&bytes).unwrap();
        assert_eq!((n, r, c, px.len()), (2, 2, 2, 8));
        let header_only = idx_images(2, 2, 2, &[]);
        assert!(matches!(parse_idx_images(&header_only), Err(DataError::TruncatedFile(_))));
        assert!(matches!(parse_idx_images(&bytes[..10]), Err(DataError::TruncatedFile(_))));
        let mut labels = Vec::new();
        labels.extend(IDX_IMAGES.to_be_bytes());
        assert!(matches!(parse_idx_labels(&labels), Err(DataError::BadMagic { .. })));
    }

    #[test]
    fn mnist_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        fs::write(&img, idx_images(2, 2, 2, &[0, 255, 51, 102, 1, 2, 3, 4])).unwrap();
        let mut l = Vec::new();
        l.extend(IDX_LABELS.to_be_bytes());
        l.extend(2u32.to_be_bytes());
        l.extend([7, 3]);
        fs::write(&lbl, &l).unwrap();
        let d: Dataset<f64> = load_mnist(&img, &lbl, Split::Train).unwrap();
        assert_eq!(d.labels, vec![7, 3]);
        assert_eq!(d.images[(0, 1)], 1.0);
        assert!((d.images[(0, 2)] - 0.2).abs() < 1e-15);

        let mut l3 = Vec::new();
        l3.extend(IDX_LABELS.to_be_bytes());
        l3.extend(3u32.to_be_bytes());
        l3.extend([1, 2, 3]);
        fs::write(&lbl, &l3).unwrap();
        assert!(matches!(
            load_mnist::<f64>(&img, &lbl, Split::Train),
            Err(DataError::CountMismatch { images: 2, labels: 3 })
        ));
    }

    fn amat_row(label: &str, fill: f64) -> String {
        let mut parts: Vec<String> = (0..784).map(|i| format!("{}", if i % 7 == 0 { fill } else { 0.0 })).collect();
        parts.push(label.to_string());
        parts.join("  ")
    }

    #[test]
    fn rectangles_parsing() {
        let text = [amat_row("1", 0.5), amat_row("0.000000", 1.0), String::new(), amat_row("1.0", 0.25)].join("\n");
        let d: Dataset<f64> = parse_rectangles_image(&text, Split::Test).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.images.shape(), (3, 784));
        assert_eq!(d.labels, vec![1, 0, 1]);
        assert!(d.images.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));

        let bad_label = amat_row("2", 0.5);
        assert!(matches!(parse_rectangles_image::<f64>(&bad_label, Split::Test), Err(DataError::BadLabel { .. })));
        let short = "0.1 0.2 1";
        assert!(matches!(parse_rectangles_image::<f64>(short, Split::Test), Err(DataError::MalformedRow { line: 1, .. })));
        let out_of_range = amat_row("1", 1.5);
        assert!(parse_rectangles_image::<f64>(&out_of_range, Split::Test).is_err());
    }

    #[test]
    fn cifar_record_decoding() {
        let mut rec = vec![3u8];
        for c in 0..3u8 {
            for i in 0..1024usize {
                rec.push((i % 200) as u8 + c * 20);
            }
        }
        let (mut data, mut labels) = (Vec::<f64>::new(), Vec::new());
        decode_cifar10(&rec, &mut data, &mut labels).unwrap();
        assert_eq!(labels, vec![3]);
        assert_eq!(data.len(), 3072);
        // pixel (y=0, x=5): planes hold 5, 25, 45
        for (got, want) in data[15..18].iter().zip([5.0, 25.0, 45.0]) {
            assert!((got - want / 255.0).abs() < 1e-15);
        }
        assert!(matches!(
            decode_cifar10(&rec[..100], &mut data, &mut labels),
            Err(DataError::BadRecordSize { .. })
        ));
    }

    #[test]
    fn toy_sets_are_balanced_and_deterministic() {
        for task in [ToyTask::Rectangles, ToyTask::Blobs] {
            let a: Dataset<f64> = generate_toy(7, 200, 8, task).unwrap();
            assert_eq!(a.labels.iter().filter(|&&l| l == 1).count(), 100);
            assert_eq!(a, generate_toy(7, 200, 8, task).unwrap());
            assert_ne!(a, generate_toy(8, 200, 8, task).unwrap());
        }
        assert!(generate_toy::<f64>(0, 3, 8, ToyTask::Rectangles).is_err());
    }

    #[test]
    fn wide_rectangles_span_more_columns_than_rows() {
        let d: Dataset<f64> = generate_toy(3, 100, 8, ToyTask::Rectangles).unwrap();
        for n in 0..d.len() {
            let img = d.images.row(n);
            let cols = (0..8).filter(|&x| (0..8).any(|y| img[y * 8 + x] > 0.0)).count();
            let rows = (0..8).filter(|&y| (0..8).any(|x| img[y * 8 + x] > 0.0)).count();
            if d.labels[n] == 0 {
                assert!(cols > rows);
            } else {
                assert!(rows > cols);
            }
        }
    }

    #[test]
    fn class_filtering_relabels() {
        let d: Dataset<f64> = generate_toy(1, 10, 4, ToyTask::Blobs).unwrap();
        let ones = d.filter_classes(&[1]).unwrap();
        assert_eq!(ones.len(), 5);
        assert!(ones.labels.iter().all(|&l| l == 0));
        assert_eq!(ones.num_classes, 1);
        assert_eq!(d.take(3).len(), 3);
    }
}
