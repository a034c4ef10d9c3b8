//! The deep GP stack: sample propagation, ELBO, prediction and metrics.

use rand::Rng;
use thiserror::Error;

use crate::numerics::tape::logsumexp;
use crate::numerics::{gaussian_samples, Matrix, NumericsError, Tape, Var};
use crate::scalar::Scalar;
use crate::svgp_layer::{sample_var, Factorized, LayerError, LayerState, LayerVars};

/// Rows per forward chunk during prediction.
pub const PREDICT_CHUNK: usize = 250;
/// Floor on predictive probabilities before taking logs.
pub const PROBABILITY_FLOOR: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DgpModel<T> {
    pub layers: Vec<LayerState<T>>,
    pub num_train: usize,
    pub mc_train: usize,
    pub mc_predict: usize,
    pub num_classes: usize,
}

/// Standard normal draws for every layer of a stacked forward pass;
/// layer `l` holds a `(samples·B) × D^l` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise<T> {
    pub samples: usize,
    pub layers: Vec<Matrix<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    /// `B × C`, rows summing to one.
    pub probabilities: Matrix<T>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub nlpp: f64,
}

impl<T: Scalar> DgpModel<T> {
    pub fn new(layers: Vec<LayerState<T>>, num_train: usize, num_classes: usize) -> Result<Self, ModelError> {
        let model = Self {
            layers,
            num_train,
            mc_train: 1,
            mc_predict: 25,
            num_classes,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidArchitecture(m));
        let Some(last) = self.layers.last() else {
            return bad("model has no layers".into());
        };
        if last.width() != self.num_classes {
            return bad(format!(
                "final layer width {} differs from the number of classes {}",
                last.width(),
                self.num_classes
            ));
        }
        for (l, pair) in self.layers.windows(2).enumerate() {
            if pair[1].input_dim != pair[0].width() {
                return bad(format!(
                    "layer {} expects input dim {}, layer {l} outputs {}",
                    l + 1,
                    pair[1].input_dim,
                    pair[0].width()
                ));
            }
        }
        for layer in &self.layers {
            layer.validate()?;
        }
        if self.mc_train == 0 || self.mc_predict == 0 {
            return bad("sample counts must be positive".into());
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, layer)| layer.param_names().into_iter().map(move |n| format!("layer{l}.{n}")))
            .collect()
    }

    pub fn trainable_params(&self) -> Vec<Matrix<T>> {
        self.layers.iter().flat_map(LayerState::trainable_params).collect()
    }

    pub fn set_trainable_params(&mut self, params: &[Matrix<T>]) -> Result<(), ModelError> {
        let mut offset = 0;
        for layer in &mut self.layers {
            offset += layer.set_trainable_params(&params[offset.min(params.len())..])?;
        }
        if offset != params.len() {
            return Err(ModelError::SizeMismatch(format!(
                "{} parameter arrays for a model with {offset}",
                params.len()
            )));
        }
        Ok(())
    }

    pub fn attach<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Result<Vec<LayerVars<'t, T>>, ModelError> {
        self.layers
            .iter()
            .map(|l| l.attach(tape, trainable).map_err(ModelError::from))
            .collect()
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, rows: usize, samples: usize, rng: &mut R) -> Noise<T> {
        Noise {
            samples,
            layers: self
                .layers
                .iter()
                .map(|l| gaussian_samples(rng, rows * samples, l.width()))
                .collect(),
        }
    }

    /// Stacked forward pass: `noise.samples` samples of `F^L` for the rows
    /// of `x`, returned as one `(samples·B) × C` node, sample-major.
    ///
    /// The first layer's moments depend only on `x`, so they are computed
    /// once and shared by all samples.
    pub fn forward<'t>(
        &self,
        vars: &[LayerVars<'t, T>],
        facts: &[Factorized<'t, T>],
        x: Var<'t, T>,
        noise: &Noise<T>,
    ) -> Result<Var<'t, T>, ModelError> {
        let rows = x.shape().0;
        let s = noise.samples;
        let mut f = x;
        for (l, (v, fact)) in vars.iter().zip(facts).enumerate() {
            let eps = &noise.layers[l];
            if eps.shape() != (rows * s, self.layers[l].width()) {
                return Err(ModelError::SizeMismatch(format!(
                    "noise for layer {l} has shape {:?}",
                    eps.shape()
                )));
            }
            let (mut mean, mut var) = v.conditional(fact, f)?;
            if l == 0 {
                mean = mean.tile_rows(s);
                var = var.tile_rows(s);
            }
            f = sample_var(mean, var, eps);
        }
        Ok(f)
    }

    /// Samples of `F^L` (each `B × C`) using the supplied noise.
    pub fn propagate_with(&self, x: &Matrix<T>, noise: &Noise<T>) -> Result<Vec<Matrix<T>>, ModelError> {
        let tape = Tape::new();
        let vars = self.attach(&tape, false)?;
        let facts = factorize_all(&vars)?;
        let out = self.forward(&vars, &facts, tape.constant(x.clone()), noise)?;
        let out = out.value();
        let b = x.rows();
        Ok((0..noise.samples)
            .map(|s| out.select_rows(&(s * b..(s + 1) * b).collect::<Vec<_>>()))
            .collect())
    }

    pub fn propagate<R: Rng + ?Sized>(
        &self,
        x: &Matrix<T>,
        rng: &mut R,
        samples: usize,
    ) -> Result<Vec<Matrix<T>>, ModelError> {
        let noise = self.draw_noise(x.rows(), samples, rng);
        self.propagate_with(x, &noise)
    }

    /// ELBO estimate on a tape:
    /// `(N/|B|)(1/S) Σ_s Σ_n log p(y_n | F^L_(s),n) − Σ_l KL_l`.
    pub fn elbo_on_tape<'t>(
        &self,
        vars: &[LayerVars<'t, T>],
        x: Var<'t, T>,
        y: &[usize],
        noise: &Noise<T>,
    ) -> Result<Var<'t, T>, ModelError> {
        let b = x.shape().0;
        if y.len() != b || b == 0 {
            return Err(ModelError::SizeMismatch(format!("{} labels for {b} inputs", y.len())));
        }
        self.check_labels(y)?;
        let facts = factorize_all(vars)?;
        let f = self.forward(vars, &facts, x, noise)?;
        let labels: Vec<usize> = (0..noise.samples).flat_map(|_| y.iter().copied()).collect();
        let scale = T::from_count(self.num_train) / (T::from_count(b) * T::from_count(noise.samples));
        let mut elbo = f.log_softmax_pick(&labels).sum().scale(scale);
        for (v, fact) in vars.iter().zip(&facts) {
            elbo = elbo - v.kl(fact)?;
        }
        Ok(elbo)
    }

    /// ELBO value with `noise` held fixed.
    pub fn elbo_with(&self, x: &Matrix<T>, y: &[usize], noise: &Noise<T>) -> Result<T, ModelError> {
        let tape = Tape::new();
        let vars = self.attach(&tape, false)?;
        Ok(self.elbo_on_tape(&vars, tape.constant(x.clone()), y, noise)?.scalar())
    }

    /// Stochastic ELBO estimate with `mc_train` samples per point.
    pub fn elbo<R: Rng + ?Sized>(&self, x: &Matrix<T>, y: &[usize], rng: &mut R) -> Result<T, ModelError> {
        let noise = self.draw_noise(x.rows(), self.mc_train, rng);
        self.elbo_with(x, y, &noise)
    }

    /// ELBO value and gradients for every trainable parameter, in the order
    /// of [`Self::trainable_params`].
    pub fn elbo_and_gradients(
        &self,
        x: &Matrix<T>,
        y: &[usize],
        noise: &Noise<T>,
    ) -> Result<(T, Vec<Matrix<T>>), ModelError> {
        let tape = Tape::new();
        let vars = self.attach(&tape, true)?;
        let elbo = self.elbo_on_tape(&vars, tape.constant(x.clone()), y, noise)?;
        let grads = tape.backward(elbo)?;
        let g = vars
            .iter()
            .flat_map(LayerVars::leaves)
            .map(|v| grads.wrt(v))
            .collect();
        Ok((elbo.scalar(), g))
    }

    /// Predictive class probabilities averaged over `mc_predict` samples.
    pub fn predict<R: Rng + ?Sized>(&self, x: &Matrix<T>, rng: &mut R) -> Result<Prediction<T>, ModelError> {
        let c = self.num_classes;
        let mut probs = Vec::with_capacity(x.rows() * c);
        let s = self.mc_predict;
        let inv_s = T::one() / T::from_count(s);
        for start in (0..x.rows()).step_by(PREDICT_CHUNK) {
            let end = (start + PREDICT_CHUNK).min(x.rows());
            let chunk = x.select_rows(&(start..end).collect::<Vec<_>>());
            let samples = self.propagate(&chunk, rng, s)?;
            for n in 0..chunk.rows() {
                let mut avg = vec![T::zero(); c];
                for f in &samples {
                    let lse = logsumexp(f.row(n));
                    for (a, &v) in avg.iter_mut().zip(f.row(n)) {
                        *a += (v - lse).exp();
                    }
                }
                probs.extend(avg.into_iter().map(|p| p * inv_s));
            }
        }
        let probabilities = Matrix::from_vec(x.rows(), c, probs)?;
        let labels = (0..x.rows()).map(|n| argmax(probabilities.row(n))).collect();
        Ok(Prediction { probabilities, labels })
    }

    fn check_labels(&self, y: &[usize]) -> Result<(), ModelError> {
        match y.iter().find(|&&v| v >= self.num_classes) {
            Some(&label) => Err(ModelError::LabelOutOfRange {
                label,
                classes: self.num_classes,
            }),
            None => Ok(()),
        }
    }
}

fn factorize_all<'t, T: Scalar>(vars: &[LayerVars<'t, T>]) -> Result<Vec<Factorized<'t, T>>, ModelError> {
    vars.iter().map(|v| v.factorize().map_err(ModelError::from)).collect()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `F[n, y_n] − logsumexp(F[n, :])` for every row.
pub fn log_softmax_likelihood<T: Scalar>(f: &Matrix<T>, y: &[usize]) -> Result<Vec<T>, ModelError> {
    if f.rows() != y.len() {
        return Err(ModelError::SizeMismatch(format!("{} labels for {} rows", y.len(), f.rows())));
    }
    y.iter()
        .enumerate()
        .map(|(n, &label)| {
            if label >= f.cols() {
                return Err(ModelError::LabelOutOfRange {
                    label,
                    classes: f.cols(),
                });
            }
            Ok(f[(n, label)] - logsumexp(f.row(n)))
        })
        .collect()
}

/// Accuracy and negative log predictive probability.
pub fn metrics<T: Scalar>(pred: &Prediction<T>, y: &[usize]) -> Result<Metrics, ModelError> {
    let n = y.len();
    if pred.labels.len() != n || pred.probabilities.rows() != n || n == 0 {
        return Err(ModelError::SizeMismatch(format!(
            "{} predictions for {n} labels",
            pred.labels.len()
        )));
    }
    let mut correct = 0usize;
    let mut nll = 0.0;
    for (i, &label) in y.iter().enumerate() {
        if label >= pred.probabilities.cols() {
            return Err(ModelError::LabelOutOfRange {
                label,
                classes: pred.probabilities.cols(),
            });
        }
        correct += usize::from(pred.labels[i] == label);
        nll -= pred.probabilities[(i, label)].to_f64_lossy().max(PROBABILITY_FLOOR).ln();
    }
    Ok(Metrics {
        accuracy: correct as f64 / n as f64,
        nlpp: nll / n as f64,
    })
}
