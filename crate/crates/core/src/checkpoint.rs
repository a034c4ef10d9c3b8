//! Binary checkpoints: a `CDGP` magic, a version, and named `f64` arrays.
//!
//! Layout (little-endian): `b"CDGP"`, `u32` version, `u32` record count,
//! then per record a `u32` name length, the UTF-8 name, a `u8` rank, `rank`
//! `u64` dimensions and the `f64` payload in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kernels::KernelSpec;
use crate::model::DgpModel;
use crate::numerics::Matrix;
use crate::patching::PatchSubset;
use crate::scalar::Scalar;
use crate::svgp_layer::MeanMap;

pub const MAGIC: &[u8; 4] = b"CDGP";
pub const VERSION: u32 = 1;
pub const DIGEST_RECORD: &str = "config.digest";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match the architecture: {0}")]
    ArchitectureMismatch(String),
    #[error("checkpoint was written for a different configuration")]
    DigestMismatch,
    #[error("checkpoint I/O on {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a record.
    pub fn put(&mut self, name: impl Into<String>, dims: Vec<u64>, data: Vec<f64>) {
        let name = name.into();
        debug_assert_eq!(dims.iter().product::<u64>() as usize, data.len());
        let rec = Record { name, dims, data };
        match self.records.iter_mut().find(|r| r.name == rec.name) {
            Some(slot) => *slot = rec,
            None => self.records.push(rec),
        }
    }

    pub fn put_matrix<T: Scalar>(&mut self, name: impl Into<String>, m: &Matrix<T>) {
        let data = m.as_slice().iter().map(|v| v.to_f64_lossy()).collect();
        self.put(name, vec![m.rows() as u64, m.cols() as u64], data);
    }

    pub fn put_values(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.put(name, vec![values.len() as u64], values);
    }

    /// Counters are split into 32-bit halves so every `u64` survives.
    pub fn put_counts(&mut self, name: impl Into<String>, counts: &[u64]) {
        let data = counts.iter().flat_map(|&c| [(c >> 32) as f64, (c & 0xffff_ffff) as f64]).collect();
        self.put(name, vec![counts.len() as u64, 2], data);
    }

    pub fn get(&self, name: &str) -> Result<&Record, CheckpointError> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| CheckpointError::ArchitectureMismatch(format!("missing record {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.records.iter().any(|r| r.name == name)
    }

    pub fn matrix<T: Scalar>(&self, name: &str, shape: (usize, usize)) -> Result<Matrix<T>, CheckpointError> {
        let r = self.get(name)?;
        if r.dims != [shape.0 as u64, shape.1 as u64] {
            return Err(CheckpointError::ArchitectureMismatch(format!(
                "record {name:?} has dims {:?}, expected {shape:?}",
                r.dims
            )));
        }
        Ok(Matrix::from_vec(shape.0, shape.1, r.data.iter().map(|&v| T::lit(v)).collect()).expect("checked dims"))
    }

    pub fn values(&self, name: &str) -> Result<&[f64], CheckpointError> {
        Ok(&self.get(name)?.data)
    }

    pub fn counts(&self, name: &str) -> Result<Vec<u64>, CheckpointError> {
        let r = self.get(name)?;
        if r.dims.len() != 2 || r.dims[1] != 2 {
            return Err(CheckpointError::Corrupt(format!("record {name:?} is not a counter array")));
        }
        r.data
            .chunks_exact(2)
            .map(|h| {
                let ok = |v: f64| v >= 0.0 && v <= u32::MAX as f64 && v.fract() == 0.0;
                if ok(h[0]) && ok(h[1]) {
                    Ok(((h[0] as u64) << 32) | h[1] as u64)
                } else {
                    Err(CheckpointError::Corrupt(format!("record {name:?} holds a non-counter")))
                }
            })
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend((r.name.len() as u32).to_le_bytes());
            out.extend(r.name.as_bytes());
            out.push(r.dims.len() as u8);
            for d in &r.dims {
                out.extend(d.to_le_bytes());
            }
            for v in &r.data {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut rd = Reader { bytes, at: 0 };
        if rd.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(CheckpointError::BadMagic);
        }
        let version = rd.u32()?;
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let count = rd.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = rd.u32()? as usize;
            let name = String::from_utf8(rd.take(len)?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("record name is not UTF-8".into()))?;
            let rank = rd.take(1)?[0] as usize;
            let dims = (0..rank).map(|_| rd.u64()).collect::<Result<Vec<_>, _>>()?;
            let n = dims
                .iter()
                .try_fold(1u64, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= (rd.remaining() / 8) as u64)
                .ok_or_else(|| CheckpointError::Corrupt(format!("record {name:?} overruns the file")))?;
            let data = rd
                .take(n as usize * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            records.push(Record { name, dims, data });
        }
        if rd.remaining() != 0 {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", rd.remaining())));
        }
        Ok(Self { records })
    }

    /// Writes through a temporary file in the same directory, then renames.
    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |e: std::io::Error| CheckpointError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        };
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.encode()).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::decode(&bytes)
    }

    pub fn set_digest(&mut self, digest: &[u8; 32]) {
        self.put_values(DIGEST_RECORD, digest.iter().map(|&b| b as f64).collect());
    }

    pub fn check_digest(&self, digest: &[u8; 32]) -> Result<(), CheckpointError> {
        let stored = self.values(DIGEST_RECORD)?;
        if stored.len() == 32 && stored.iter().zip(digest).all(|(&s, &d)| s == d as f64) {
            Ok(())
        } else {
            Err(CheckpointError::DigestMismatch)
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Corrupt("unexpected end of file".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.at
    }
}

/// SHA-256 of arbitrary configuration bytes.
pub fn digest(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

fn subset_values(s: &PatchSubset) -> Vec<u64> {
    let mut v = vec![s.seed];
    v.extend(s.indices.iter().map(|&i| i as u64));
    v
}

fn subset_from(values: &[u64]) -> Result<PatchSubset, CheckpointError> {
    let (&seed, rest) = values
        .split_first()
        .ok_or_else(|| CheckpointError::Corrupt("empty subset record".into()))?;
    Ok(PatchSubset {
        indices: rest.iter().map(|&i| i as usize).collect(),
        seed,
    })
}

/// Stores every model array under `layer{l}.…` names.
pub fn save_model<T: Scalar>(model: &DgpModel<T>, ck: &mut Checkpoint) {
    ck.put_counts(
        "model.sizes",
        &[
            model.layers.len() as u64,
            model.num_train as u64,
            model.num_classes as u64,
        ],
    );
    for (l, layer) in model.layers.iter().enumerate() {
        let p = format!("layer{l}");
        ck.put_matrix(format!("{p}.z"), &layer.z);
        ck.put_matrix(format!("{p}.q_mu"), &layer.q_mu);
        for (j, q) in layer.q_sqrt.iter().enumerate() {
            ck.put_matrix(format!("{p}.q_sqrt.{j}"), q);
        }
        let base = layer.kernel.base().to_log_params();
        ck.put_values(format!("{p}.kernel.base"), base.iter().map(|v| v.to_f64_lossy()).collect());
        ck.put_values(format!("{p}.kernel.log_noise"), vec![layer.kernel.log_noise().to_f64_lossy()]);
        if let Some(w) = layer.kernel.weights() {
            ck.put_values(format!("{p}.kernel.weights"), w.iter().map(|v| v.to_f64_lossy()).collect());
        }
        if let KernelSpec::Conv(c) = &layer.kernel {
            if let Some(s) = &c.subsets {
                ck.put_counts(format!("{p}.kernel.subset.left"), &subset_values(&s.left));
                ck.put_counts(format!("{p}.kernel.subset.right"), &subset_values(&s.right));
            }
        }
        if let MeanMap::Linear(w) = &layer.mean_map {
            ck.put_matrix(format!("{p}.mean_w"), w);
        }
    }
}

/// Overwrites the arrays of `model` (whose architecture must match) with
/// those stored in `ck`.
pub fn load_model<T: Scalar>(ck: &Checkpoint, model: &mut DgpModel<T>) -> Result<(), CheckpointError> {
    let mismatch = |m: String| CheckpointError::ArchitectureMismatch(m);
    let sizes = ck.counts("model.sizes")?;
    if sizes.len() != 3 {
        return Err(CheckpointError::Corrupt("model.sizes must hold three counts".into()));
    }
    if sizes[0] as usize != model.layers.len() || sizes[2] as usize != model.num_classes {
        return Err(mismatch(format!(
            "checkpoint has {} layers and {} classes, model has {} and {}",
            sizes[0],
            sizes[2],
            model.layers.len(),
            model.num_classes
        )));
    }
    for (l, layer) in model.layers.iter_mut().enumerate() {
        let p = format!("layer{l}");
        layer.z = ck.matrix(&format!("{p}.z"), layer.z.shape())?;
        layer.q_mu = ck.matrix(&format!("{p}.q_mu"), layer.q_mu.shape())?;
        for (j, q) in layer.q_sqrt.iter_mut().enumerate() {
            *q = ck.matrix(&format!("{p}.q_sqrt.{j}"), q.shape())?;
        }
        let base = ck.values(&format!("{p}.kernel.base"))?;
        if base.len() != layer.kernel.base().to_log_params().len() {
            return Err(mismatch(format!("{p} base kernel has {} parameters", base.len())));
        }
        let base: Vec<T> = base.iter().map(|&v| T::lit(v)).collect();
        layer.kernel.base_mut().set_log_params(&base);
        match ck.values(&format!("{p}.kernel.log_noise"))? {
            [v] => layer.kernel.set_log_noise(T::lit(*v)),
            _ => return Err(mismatch(format!("{p} noise must be a scalar"))),
        }
        let weights_name = format!("{p}.kernel.weights");
        match layer.kernel.weights_mut() {
            Some(w) => {
                let stored = ck.values(&weights_name)?;
                if stored.len() != w.len() {
                    return Err(mismatch(format!("{p} has {} patch weights, expected {}", stored.len(), w.len())));
                }
                w.iter_mut().zip(stored).for_each(|(a, &b)| *a = T::lit(b));
            }
            None if ck.contains(&weights_name) => return Err(mismatch(format!("{p} is not a weighted kernel"))),
            None => {}
        }
        if let KernelSpec::Conv(c) = &mut layer.kernel {
            if let Some(s) = &mut c.subsets {
                s.left = subset_from(&ck.counts(&format!("{p}.kernel.subset.left"))?)?;
                s.right = subset_from(&ck.counts(&format!("{p}.kernel.subset.right"))?)?;
            }
        }
        if let MeanMap::Linear(w) = &mut layer.mean_map {
            *w = ck.matrix(&format!("{p}.mean_w"), w.shape())?;
        }
    }
    model.validate().map_err(|e| mismatch(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip_bit_exactly() {
        let mut ck = Checkpoint::new();
        let m = Matrix::from_fn(3, 2, |i, j| (i as f64 + 0.1) / (j as f64 + 3.0) - 1e-300);
        ck.put_matrix("a", &m);
        ck.put_values("b", vec![f64::MIN_POSITIVE, -0.0, 1.0 / 3.0]);
        ck.put_counts("c", &[u64::MAX, 0, 1 << 60]);
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.matrix::<f64>("a", (3, 2)).unwrap(), m);
        assert_eq!(back.counts("c").unwrap(), vec![u64::MAX, 0, 1 << 60]);
        assert!(matches!(back.matrix::<f64>("a", (2, 3)), Err(CheckpointError::ArchitectureMismatch(_))));
    }

    #[test]
    fn header_layout() {
        let mut ck = Checkpoint::new();
        ck.put_values("x", vec![2.0]);
        let b = ck.encode();
        assert_eq!(&b[..4], b"CDGP");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(b[16], b'x');
        assert_eq!(b[17], 1);
        assert_eq!(&b[18..26], &1u64.to_le_bytes());
        assert_eq!(&b[26..34], &2.0f64.to_le_bytes());
        assert_eq!(b.len(), 34);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let mut ck = Checkpoint::new();
        ck.put_values("x", vec![1.0, 2.0]);
        let b = ck.encode();
        assert!(matches!(Checkpoint::decode(b"NOPE"), Err(CheckpointError::BadMagic)));
        let mut v2 = b.clone();
        v2[4] = 2;
        assert!(matches!(
            Checkpoint::decode(&v2),
            Err(CheckpointError::VersionMismatch { found: 2, expected: 1 })
        ));
        for cut in [6, 14, 20, b.len() - 1] {
            assert!(matches!(Checkpoint::decode(&b[..cut]), Err(CheckpointError::Corrupt(_))), "cut {cut}");
        }
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::decode(&extra), Err(CheckpointError::Corrupt(_))));
        let mut huge = b;
        huge[18..26].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(Checkpoint::decode(&huge), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn digest_is_checked() {
        let mut ck = Checkpoint::new();
        let d = digest(b"config");
        ck.set_digest(&d);
        assert!(ck.check_digest(&d).is_ok());
        assert!(matches!(ck.check_digest(&digest(b"other")), Err(CheckpointError::DigestMismatch)));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut ck = Checkpoint::new();
        ck.put_values("v", vec![0.5; 4]);
        ck.write(&path).unwrap();
        assert_eq!(Checkpoint::read(&path).unwrap(), ck);
        assert!(!path.with_extension("tmp").exists());
    }
}
