//! Adam ascent on the ELBO over shuffled minibatches.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::model::{DgpModel, ModelError};
use crate::numerics::random::{substream, Stream};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient for parameter array {0}")]
    NonFiniteGradient(usize),
    #[error("non-finite ELBO at step {0}")]
    NonFiniteElbo(u64),
    #[error("{0} parameter arrays but {1} gradients")]
    ShapeMismatch(usize, usize),
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Observer(String),
}

/// Bias-corrected Adam moments for a list of parameter arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
    pub step_size: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Matrix<T>], step_size: T) -> Self {
        let zeros: Vec<_> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
            step_size,
            beta1: T::lit(BETA1),
            beta2: T::lit(BETA2),
            eps: T::lit(EPSILON),
        }
    }

    pub fn save(&self, ck: &mut Checkpoint) {
        ck.put_counts("adam.t", &[self.t]);
        ck.put_values(
            "adam.settings",
            [self.step_size, self.beta1, self.beta2, self.eps]
                .iter()
                .map(|v| v.to_f64_lossy())
                .collect(),
        );
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            ck.put_matrix(format!("adam.m.{i}"), m);
            ck.put_matrix(format!("adam.v.{i}"), v);
        }
    }

    /// Restores moments for parameters shaped like `params`.
    pub fn load(ck: &Checkpoint, params: &[Matrix<T>]) -> Result<Self, CheckpointError> {
        let t = single(&ck.counts("adam.t")?, "adam.t")?;
        let s = ck.values("adam.settings")?;
        let [a, b1, b2, e] = s else {
            return Err(CheckpointError::Corrupt("adam.settings must hold four values".into()));
        };
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            m.push(ck.matrix(&format!("adam.m.{i}"), p.shape())?);
            v.push(ck.matrix(&format!("adam.v.{i}"), p.shape())?);
        }
        if ck.contains(&format!("adam.m.{}", params.len())) {
            return Err(CheckpointError::ArchitectureMismatch("optimizer holds extra parameter arrays".into()));
        }
        Ok(Self {
            t,
            m,
            v,
            step_size: T::lit(*a),
            beta1: T::lit(*b1),
            beta2: T::lit(*b2),
            eps: T::lit(*e),
        })
    }
}

fn single(v: &[u64], name: &str) -> Result<u64, CheckpointError> {
    match v {
        [x] => Ok(*x),
        _ => Err(CheckpointError::Corrupt(format!("{name} must hold one counter"))),
    }
}

/// One Adam step that ascends along `grads`.
pub fn adam_step<T: Scalar>(
    params: &mut [Matrix<T>],
    grads: &[Matrix<T>],
    state: &mut AdamState<T>,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::ShapeMismatch(params.len(), grads.len()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient(i));
    }
    if let Some(i) = (0..params.len()).find(|&i| params[i].shape() != grads[i].shape()) {
        return Err(TrainError::ShapeMismatch(i, i));
    }
    state.t += 1;
    let one = T::one();
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let c1 = one - state.beta1.powi(t);
    let c2 = one - state.beta2.powi(t);
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.eps, state.step_size);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let it = p
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice()));
        for ((p, &g), (m, v)) in it {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p += lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub epochs: usize,
    pub minibatch: usize,
    pub step_size: f64,
    pub seed: u64,
    pub mc_train: usize,
    pub mc_predict: usize,
    /// Epochs between checkpoints; `0` checkpoints only at the end.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Stops after this many optimizer steps in total.
    #[serde(default)]
    pub max_steps: Option<u64>,
}

impl RunConfig {
    pub fn validate(&self, num_train: usize) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.minibatch == 0 || self.minibatch > num_train {
            return bad("minibatch must be between 1 and the training set size");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive");
        }
        if self.mc_train == 0 || self.mc_predict == 0 {
            return bad("mc_train and mc_predict must be positive");
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.minibatch)
    }
}

/// One line of the metric trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub step: u64,
    /// Mean minibatch ELBO over the epoch.
    pub elbo: f64,
    /// Seconds since training began; not persisted in checkpoints.
    pub wall_seconds: f64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub adam: AdamState<T>,
    pub epoch: usize,
    /// Minibatches already taken in `epoch`.
    pub position: usize,
    pub step: u64,
    pub epoch_elbo_sum: f64,
    pub step_elbos: Vec<f64>,
    pub trace: Vec<TraceRow>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: &DgpModel<T>, cfg: &RunConfig) -> Self {
        Self {
            adam: AdamState::new(&model.trainable_params(), T::lit(cfg.step_size)),
            epoch: 0,
            position: 0,
            step: 0,
            epoch_elbo_sum: 0.0,
            step_elbos: Vec::new(),
            trace: Vec::new(),
        }
    }

    pub fn save(&self, ck: &mut Checkpoint) {
        self.adam.save(ck);
        ck.put_counts("train.position", &[self.epoch as u64, self.position as u64, self.step]);
        ck.put_values("train.epoch_elbo_sum", vec![self.epoch_elbo_sum]);
        ck.put_values("train.step_elbo", self.step_elbos.clone());
        let rows: Vec<f64> = self
            .trace
            .iter()
            .flat_map(|r| [r.epoch as f64, r.step as f64, r.elbo])
            .collect();
        ck.put("train.trace", vec![self.trace.len() as u64, 3], rows);
    }

    pub fn load(ck: &Checkpoint, model: &DgpModel<T>) -> Result<Self, CheckpointError> {
        let adam = AdamState::load(ck, &model.trainable_params())?;
        let [epoch, position, step] = ck.counts("train.position")?[..] else {
            return Err(CheckpointError::Corrupt("train.position must hold three counters".into()));
        };
        let epoch_elbo_sum = match ck.values("train.epoch_elbo_sum")? {
            [v] => *v,
            _ => return Err(CheckpointError::Corrupt("train.epoch_elbo_sum must be a scalar".into())),
        };
        let trace = ck
            .values("train.trace")?
            .chunks_exact(3)
            .map(|r| TraceRow {
                epoch: r[0] as usize,
                step: r[1] as u64,
                elbo: r[2],
                wall_seconds: f64::NAN,
            })
            .collect();
        Ok(Self {
            adam,
            epoch: epoch as usize,
            position: position as usize,
            step,
            epoch_elbo_sum,
            step_elbos: ck.values("train.step_elbo")?.to_vec(),
            trace,
        })
    }
}

/// Row order of epoch `epoch`.
pub fn epoch_permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, Stream::Shuffle, &[epoch as u64]));
    idx
}

/// Notifications passed to the observer of [`train`].
pub enum Progress<'a, T> {
    Step { step: u64, elbo: f64 },
    EpochEnd {
        row: TraceRow,
        model: &'a DgpModel<T>,
        state: &'a TrainState<T>,
    },
}

/// Runs (or continues) training until `cfg.epochs` epochs or
/// `cfg.max_steps` steps are done.
pub fn train<T: Scalar>(
    model: &mut DgpModel<T>,
    x: &Matrix<T>,
    y: &[usize],
    cfg: &RunConfig,
    state: &mut TrainState<T>,
    observer: &mut dyn FnMut(Progress<'_, T>) -> Result<(), TrainError>,
) -> Result<(), TrainError> {
    let n = x.rows();
    if y.len() != n {
        return Err(ModelError::SizeMismatch(format!("{n} inputs but {} labels", y.len())).into());
    }
    cfg.validate(n)?;
    model.mc_train = cfg.mc_train;
    model.mc_predict = cfg.mc_predict;
    let batches = cfg.batches_per_epoch(n);
    let start = Instant::now();
    let mut params = model.trainable_params();
    while state.epoch < cfg.epochs {
        let perm = epoch_permutation(cfg.seed, state.epoch, n);
        while state.position < batches {
            if cfg.max_steps.is_some_and(|m| state.step >= m) {
                return Ok(());
            }
            let lo = state.position * cfg.minibatch;
            let rows = &perm[lo..(lo + cfg.minibatch).min(n)];
            let xb = x.select_rows(rows);
            let yb: Vec<usize> = rows.iter().map(|&i| y[i]).collect();
            let noise = model.draw_noise(rows.len(), cfg.mc_train, &mut substream(cfg.seed, Stream::Noise, &[state.step]));
            let (elbo, grads) = model.elbo_and_gradients(&xb, &yb, &noise)?;
            let elbo = elbo.to_f64_lossy();
            if !elbo.is_finite() {
                return Err(TrainError::NonFiniteElbo(state.step));
            }
            adam_step(&mut params, &grads, &mut state.adam)?;
            model.set_trainable_params(&params)?;
            state.step += 1;
            state.position += 1;
            state.epoch_elbo_sum += elbo;
            state.step_elbos.push(elbo);
            observer(Progress::Step { step: state.step, elbo })?;
        }
        let row = TraceRow {
            epoch: state.epoch,
            step: state.step,
            elbo: state.epoch_elbo_sum / batches as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        state.trace.push(row);
        state.epoch += 1;
        state.position = 0;
        state.epoch_elbo_sum = 0.0;
        observer(Progress::EpochEnd { row, model, state })?;
    }
    Ok(())
}

/// Trailing moving average of `values` over `window` entries.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    values
        .windows(window.max(1))
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect()
}

/// The trace as CSV with columns `epoch,step,elbo,wall_seconds`.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("epoch,step,elbo,wall_seconds\n");
    for r in trace {
        s.push_str(&format!("{},{},{},{:.3}\n", r.epoch, r.step, r.elbo, r.wall_seconds));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_the_step_size() {
        let mut p: Vec<Matrix<f64>> = vec![Matrix::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap()];
        let g = vec![Matrix::from_rows(&[vec![3.0, -1e-3, 0.0]]).unwrap()];
        let mut st = AdamState::new(&p, 0.01);
        adam_step(&mut p, &g, &mut st).unwrap();
        assert!((p[0][(0, 0)] - 1.01).abs() < 1e-8);
        assert!((p[0][(0, 1)] + 2.01).abs() < 1e-5);
        assert_eq!(p[0][(0, 2)], 0.5);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradients_leave_parameters_alone() {
        let p0 = vec![Matrix::from_fn(2, 2, |i, j| (i + 2 * j) as f64)];
        let mut p = p0.clone();
        let mut st = AdamState::new(&p, 0.1);
        for _ in 0..5 {
            adam_step(&mut p, &[Matrix::zeros(2, 2)], &mut st).unwrap();
        }
        assert_eq!(p, p0);
    }

    #[test]
    fn non_finite_gradients_are_rejected() {
        let mut p = vec![Matrix::<f64>::zeros(1, 2)];
        let mut st = AdamState::new(&p, 0.1);
        let g = vec![Matrix::from_rows(&[vec![1.0, f64::NAN]]).unwrap()];
        assert!(matches!(adam_step(&mut p, &g, &mut st), Err(TrainError::NonFiniteGradient(0))));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let opt = [1.5f64, -0.5];
        let mut p: Vec<Matrix<f64>> = vec![Matrix::from_rows(&[vec![-2.0, 2.0]]).unwrap()];
        let mut st = AdamState::new(&p, 0.05);
        let mut dist = Vec::new();
        for _ in 0..200 {
            let g = Matrix::from_fn(1, 2, |_, j| -2.0 * (p[0][(0, j)] - opt[j]));
            adam_step(&mut p, &[g], &mut st).unwrap();
            dist.push(((p[0][(0, 0)] - opt[0]).powi(2) + (p[0][(0, 1)] - opt[1]).powi(2)).sqrt());
        }
        assert!(dist[199] < 0.05 * dist[0]);
        for w in dist[..60].windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn permutations_are_seeded_per_epoch() {
        let a = epoch_permutation(3, 0, 50);
        assert_eq!(a, epoch_permutation(3, 0, 50));
        assert_ne!(a, epoch_permutation(3, 1, 50));
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn smoothing_and_csv() {
        assert_eq!(smoothed(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        let csv = trace_csv(&[TraceRow {
            epoch: 0,
            step: 5,
            elbo: -1.5,
            wall_seconds: 0.25,
        }]);
        assert_eq!(csv, "epoch,step,elbo,wall_seconds\n0,5,-1.5,0.250\n");
    }
}
