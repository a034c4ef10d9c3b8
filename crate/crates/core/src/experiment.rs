//! Experiment configurations and the train / eval / bench commands.
//!
//! A configuration is a JSON document:
//!
//! ```json
//! {
//!   "name": "toy-cdgp1",
//!   "dataset": { "kind": "toy", "task": "rectangles", "size": 8, "n_train": 200, "n_test": 200 },
//!   "layers": [
//!     { "kernel": "wconv", "width": 3, "patch": [3, 3], "inducing": 20, "lengthscale": 2.0 },
//!     { "kernel": "rbf", "width": 2, "inducing": 20, "lengthscale": 2.0 }
//!   ],
//!   "run": { "epochs": 50, "minibatch": 50, "step_size": 0.01, "seed": 0, "mc_train": 1, "mc_predict": 25 },
//!   "out_dir": "runs/toy"
//! }
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{digest, load_model, save_model, Checkpoint, CheckpointError};
use crate::data::{self, DataError, Dataset, Split, ToyTask};
use crate::inducing_init::{init_layers, InitError, InitOptions, LayerBlueprint};
use crate::kernels::{kff_diag, BaseKernel, ConvParams, KernelError, KernelSpec, RbfParams, SubsetPair};
use crate::model::{metrics, DgpModel, Metrics, ModelError};
use crate::numerics::random::{derive_seed, substream, Stream};
use crate::numerics::Matrix;
use crate::patching::{draw_subset, subset_size, PatchError, PatchGeometry, PatchSubset};
use crate::svgp_layer::{LayerError, LayerState, MeanMap};
use crate::train::{train, trace_csv, Progress, RunConfig, TrainError, TrainState};

pub const CHECKPOINT_FILE: &str = "checkpoint.cdgp";
pub const TRACE_FILE: &str = "trace.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const BENCH_FILE: &str = "bench.csv";
/// `σ_n² / σ_f²` at initialization.
pub const NOISE_RATIO: f64 = 1e-2;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Numeric(String),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

impl ExperimentError {
    /// Process exit code: 2 configuration, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "numeric" => 4,
            _ => 3,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            ExperimentError::Config(_) => "config",
            ExperimentError::Checkpoint(CheckpointError::ArchitectureMismatch(_) | CheckpointError::DigestMismatch) => {
                "config"
            }
            ExperimentError::Numeric(_) => "numeric",
            _ => "data",
        }
    }
}

fn numeric(e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Numeric(e.to_string())
}

impl From<TrainError> for ExperimentError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => ExperimentError::Config(m),
            TrainError::Checkpoint(c) => ExperimentError::Checkpoint(c),
            TrainError::Observer(m) => ExperimentError::Io {
                path: "output".into(),
                reason: m,
            },
            other => numeric(other),
        }
    }
}

impl From<InitError> for ExperimentError {
    fn from(e: InitError) -> Self {
        match e {
            InitError::TooFewPoints { .. } | InitError::Empty => ExperimentError::Config(format!("layers: {e}")),
            other => numeric(other),
        }
    }
}

impl From<ModelError> for ExperimentError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidArchitecture(m) => ExperimentError::Config(format!("layers: {m}")),
            other => numeric(other),
        }
    }
}

impl From<LayerError> for ExperimentError {
    fn from(e: LayerError) -> Self {
        numeric(e)
    }
}

impl From<KernelError> for ExperimentError {
    fn from(e: KernelError) -> Self {
        numeric(e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Toy {
        task: ToyTask,
        size: usize,
        n_train: usize,
        n_test: usize,
        #[serde(default)]
        seed: u64,
    },
    Mnist {
        #[serde(default)]
        classes: Option<Vec<usize>>,
        #[serde(default)]
        n_train: Option<usize>,
        #[serde(default)]
        n_test: Option<usize>,
    },
    RectanglesImage {
        #[serde(default = "default_rect_train")]
        train_file: String,
        #[serde(default = "default_rect_test")]
        test_file: String,
        #[serde(default)]
        n_train: Option<usize>,
        #[serde(default)]
        n_test: Option<usize>,
    },
    Cifar10 {
        #[serde(default)]
        n_train: Option<usize>,
        #[serde(default)]
        n_test: Option<usize>,
    },
    /// Random images, used only by the kernel benchmark.
    Synthetic {
        n: usize,
        width: usize,
        height: usize,
        channels: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_rect_train() -> String {
    "rectangles_im_train.amat".into()
}

fn default_rect_test() -> String {
    "rectangles_im_test.amat".into()
}

impl DatasetConfig {
    fn default_lengthscale(&self) -> f64 {
        match self {
            DatasetConfig::Mnist { .. } => 2.0,
            _ => 10.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Rbf,
    Conv,
    Wconv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    #[default]
    Rbf,
    SumRbf,
}

fn one() -> f64 {
    1.0
}

fn default_stride() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub kernel: KernelKind,
    #[serde(default)]
    pub base: BaseKind,
    pub width: usize,
    pub inducing: usize,
    /// `[w, h]`; hidden layers read `w` as a window over the previous
    /// layer's outputs and require `h = 1`.
    #[serde(default)]
    pub patch: Option<[usize; 2]>,
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Fraction of patches kept in each of the two subsets.
    #[serde(default = "one")]
    pub subsample: f64,
    /// Uses one subset for both kernel arguments.
    #[serde(default)]
    pub shared_subset: bool,
    #[serde(default)]
    pub lengthscale: Option<f64>,
    /// Two lengthscales for the `sum_rbf` base kernel.
    #[serde(default)]
    pub lengthscales: Option<[f64; 2]>,
    #[serde(default = "one")]
    pub variance: f64,
    #[serde(default = "one")]
    pub weight_init: f64,
    #[serde(default)]
    pub trainable_z: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub patch: [usize; 2],
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Subset sizes `|S| = |S′|` to time against the full kernel.
    pub subset_sizes: Vec<usize>,
    #[serde(default)]
    pub weighted: bool,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
}

fn default_repeats() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub layers: Vec<LayerConfig>,
    pub run: RunConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub bench: Option<BenchConfig>,
}

/// Where data is read from and results are written to.
#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

/// Input layout of a dataset: `(width, height, channels)` and class count.
fn dataset_shape(d: &DatasetConfig) -> ((usize, usize, usize), usize) {
    match d {
        DatasetConfig::Toy { size, .. } => ((*size, *size, 1), 2),
        DatasetConfig::Mnist { classes, .. } => ((28, 28, 1), classes.as_ref().map_or(10, Vec::len)),
        DatasetConfig::RectanglesImage { .. } => ((28, 28, 1), 2),
        DatasetConfig::Cifar10 { .. } => ((32, 32, 3), 10),
        DatasetConfig::Synthetic {
            width, height, channels, ..
        } => ((*width, *height, *channels), 2),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Digest of everything that shapes the model and its training.
    pub fn digest(&self) -> [u8; 32] {
        let key = serde_json::json!({
            "dataset": self.dataset,
            "layers": self.layers,
            "run": self.run,
        });
        digest(key.to_string().as_bytes())
    }

    /// Conventional location of the dataset files under the workspace.
    pub fn default_data_dir(&self) -> PathBuf {
        PathBuf::from(match self.dataset {
            DatasetConfig::Mnist { .. } => "data/mnist",
            DatasetConfig::RectanglesImage { .. } => "data/rectangles",
            DatasetConfig::Cifar10 { .. } => "data/cifar10",
            _ => "data",
        })
    }

    pub fn default_out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| Path::new("runs").join(&self.name))
    }

    pub fn num_classes(&self) -> usize {
        dataset_shape(&self.dataset).1
    }

    /// Checks every field, naming the first offending one.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |field: String, msg: String| Err(ExperimentError::Config(format!("{field}: {msg}")));
        let run = &self.run;
        if run.minibatch == 0 {
            return bad("run.minibatch".into(), "must be positive".into());
        }
        if !(run.step_size > 0.0 && run.step_size.is_finite()) {
            return bad("run.step_size".into(), "must be positive".into());
        }
        if run.mc_train == 0 {
            return bad("run.mc_train".into(), "must be positive".into());
        }
        if run.mc_predict == 0 {
            return bad("run.mc_predict".into(), "must be positive".into());
        }
        match &self.dataset {
            DatasetConfig::Toy { size, n_train, n_test, .. } => {
                if *size < 4 {
                    return bad("dataset.size".into(), "toy images need at least 4 pixels a side".into());
                }
                for (f, n) in [("dataset.n_train", n_train), ("dataset.n_test", n_test)] {
                    if *n == 0 || n % 2 != 0 {
                        return bad(f.into(), "must be even and positive".into());
                    }
                }
            }
            DatasetConfig::Mnist { classes: Some(c), .. } => {
                if c.is_empty() || c.iter().any(|&k| k > 9) {
                    return bad("dataset.classes".into(), "must list digits 0 to 9".into());
                }
                let mut s = c.clone();
                s.sort_unstable();
                s.dedup();
                if s.len() != c.len() {
                    return bad("dataset.classes".into(), "must not repeat a digit".into());
                }
            }
            DatasetConfig::Synthetic { n, width, height, channels, .. } => {
                if *n == 0 || *width == 0 || *height == 0 || *channels == 0 {
                    return bad("dataset".into(), "synthetic sizes must be positive".into());
                }
            }
            _ => {}
        }
        if let Some(n) = self.train_size_hint() {
            if run.minibatch > n {
                return bad("run.minibatch".into(), format!("exceeds the {n} training images"));
            }
        }
        if let Some(b) = &self.bench {
            self.validate_bench(b)?;
        }
        if self.layers.is_empty() {
            if self.bench.is_some() {
                return Ok(());
            }
            return bad("layers".into(), "at least one layer is required".into());
        }
        let ((w, h, c), classes) = dataset_shape(&self.dataset);
        let mut d_in = w * h * c;
        for (l, lc) in self.layers.iter().enumerate() {
            let f = |name: &str| format!("layers[{l}].{name}");
            if lc.width == 0 {
                return bad(f("width"), "must be positive".into());
            }
            if lc.inducing == 0 {
                return bad(f("inducing"), "must be positive".into());
            }
            if !(lc.variance > 0.0 && lc.variance.is_finite()) {
                return bad(f("variance"), "must be positive".into());
            }
            if !lc.weight_init.is_finite() {
                return bad(f("weight_init"), "must be finite".into());
            }
            if !(lc.subsample > 0.0 && lc.subsample <= 1.0) {
                return bad(f("subsample"), "must lie in (0, 1]".into());
            }
            match lc.base {
                BaseKind::Rbf => {
                    if lc.lengthscales.is_some() {
                        return bad(f("lengthscales"), "only used by the sum_rbf base".into());
                    }
                    if lc.lengthscale.is_some_and(|v| !(v > 0.0 && v.is_finite())) {
                        return bad(f("lengthscale"), "must be positive".into());
                    }
                }
                BaseKind::SumRbf => match lc.lengthscales {
                    Some(ls) if ls.iter().all(|v| *v > 0.0 && v.is_finite()) => {}
                    Some(_) => return bad(f("lengthscales"), "must be positive".into()),
                    None => return bad(f("lengthscales"), "sum_rbf needs two lengthscales".into()),
                },
            }
            match lc.kernel {
                KernelKind::Rbf => {
                    if lc.patch.is_some() {
                        return bad(f("patch"), "rbf layers take whole inputs".into());
                    }
                    if lc.subsample != 1.0 {
                        return bad(f("subsample"), "only conv layers subsample patches".into());
                    }
                }
                KernelKind::Conv | KernelKind::Wconv => {
                    let geom = self.layer_geometry(l, d_in).map_err(|m| ExperimentError::Config(format!("{}: {m}", f("patch"))))?;
                    if lc.subsample < 1.0 && subset_size(geom.num_patches(), lc.subsample) == 0 {
                        return bad(f("subsample"), "keeps no patches".into());
                    }
                }
            }
            d_in = lc.width;
        }
        let last = self.layers.len() - 1;
        if self.layers[last].width != classes {
            return bad(
                format!("layers[{last}].width"),
                format!("final width {} must equal the {classes} classes", self.layers[last].width),
            );
        }
        Ok(())
    }

    fn validate_bench(&self, b: &BenchConfig) -> Result<(), ExperimentError> {
        let bad = |field: &str, msg: String| Err(ExperimentError::Config(format!("bench.{field}: {msg}")));
        let ((w, h, c), _) = dataset_shape(&self.dataset);
        let geom = PatchGeometry::new(w, h, c, b.patch[0], b.patch[1], b.stride)
            .map_err(|e| ExperimentError::Config(format!("bench.patch: {e}")))?;
        if b.subset_sizes.is_empty() {
            return bad("subset_sizes", "list at least one size".into());
        }
        if let Some(k) = b.subset_sizes.iter().find(|&&k| k == 0 || k > geom.num_patches()) {
            return bad("subset_sizes", format!("{k} is outside 1..={}", geom.num_patches()));
        }
        if b.repeats == 0 {
            return bad("repeats", "must be positive".into());
        }
        Ok(())
    }

    fn train_size_hint(&self) -> Option<usize> {
        match &self.dataset {
            DatasetConfig::Toy { n_train, .. } => Some(*n_train),
            DatasetConfig::Mnist { n_train, .. }
            | DatasetConfig::RectanglesImage { n_train, .. }
            | DatasetConfig::Cifar10 { n_train, .. } => *n_train,
            DatasetConfig::Synthetic { n, .. } => Some(*n),
        }
    }

    /// Patch geometry of conv layer `l` whose input has `d_in` values.
    fn layer_geometry(&self, l: usize, d_in: usize) -> Result<PatchGeometry, String> {
        let lc = &self.layers[l];
        let [pw, ph] = lc.patch.ok_or("conv layers need a patch size")?;
        if l == 0 {
            let ((w, h, c), _) = dataset_shape(&self.dataset);
            PatchGeometry::new(w, h, c, pw, ph, lc.stride).map_err(|e| e.to_string())
        } else {
            if ph != 1 {
                return Err("hidden-layer patches are 1-D windows, so the height must be 1".into());
            }
            PatchGeometry::signal(d_in, pw, lc.stride).map_err(|e| e.to_string())
        }
    }

    fn base_kernel(&self, lc: &LayerConfig) -> BaseKernel<f64> {
        match lc.base {
            BaseKind::Rbf => {
                let ls = lc.lengthscale.unwrap_or_else(|| self.dataset.default_lengthscale());
                BaseKernel::Rbf(RbfParams::with_lengthscale(lc.variance, ls))
            }
            BaseKind::SumRbf => {
                let [a, b] = lc.lengthscales.expect("validated");
                BaseKernel::SumRbf(
                    RbfParams::with_lengthscale(lc.variance, a),
                    RbfParams::with_lengthscale(lc.variance, b),
                )
            }
        }
    }

    fn layer_subsets(&self, l: usize, total: usize) -> Result<Option<SubsetPair>, PatchError> {
        let lc = &self.layers[l];
        if lc.subsample >= 1.0 {
            return Ok(None);
        }
        let k = subset_size(total, lc.subsample);
        let seed = |side: u64| derive_seed(self.run.seed, Stream::Subset, &[l as u64, side]);
        let left = draw_subset(total, k, seed(0))?;
        let right = if lc.shared_subset {
            left.clone()
        } else {
            draw_subset(total, k, seed(1))?
        };
        Ok(Some(SubsetPair { left, right }))
    }

    /// Kernel specifications for every layer, with initial hyperparameters.
    pub fn kernels(&self) -> Result<Vec<KernelSpec<f64>>, ExperimentError> {
        self.validate()?;
        let ((w, h, c), _) = dataset_shape(&self.dataset);
        let mut d_in = w * h * c;
        let mut out = Vec::with_capacity(self.layers.len());
        for (l, lc) in self.layers.iter().enumerate() {
            let base = self.base_kernel(lc);
            let log_noise = (NOISE_RATIO * base.variance_sum()).ln();
            let spec = match lc.kernel {
                KernelKind::Rbf => KernelSpec::Plain { base, log_noise },
                KernelKind::Conv | KernelKind::Wconv => {
                    let geom = self.layer_geometry(l, d_in).map_err(ExperimentError::Config)?;
                    let p = geom.num_patches();
                    KernelSpec::Conv(ConvParams {
                        base,
                        geom,
                        weights: (lc.kernel == KernelKind::Wconv).then(|| vec![lc.weight_init; p]),
                        subsets: self.layer_subsets(l, p).map_err(|e| ExperimentError::Config(e.to_string()))?,
                        log_noise,
                    })
                }
            };
            out.push(spec);
            d_in = lc.width;
        }
        Ok(out)
    }

    pub fn blueprints(&self) -> Result<Vec<LayerBlueprint<f64>>, ExperimentError> {
        Ok(self
            .kernels()?
            .into_iter()
            .zip(&self.layers)
            .map(|(kernel, lc)| LayerBlueprint {
                kernel,
                width: lc.width,
                num_inducing: lc.inducing,
                trainable_z: lc.trainable_z,
            })
            .collect())
    }

    /// A model with the configured architecture and placeholder values,
    /// ready to receive a checkpoint.
    pub fn skeleton(&self, num_train: usize) -> Result<DgpModel<f64>, ExperimentError> {
        let ((w, h, c), classes) = dataset_shape(&self.dataset);
        let mut d_in = w * h * c;
        let last = self.layers.len() - 1;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, (kernel, bp)) in self.kernels()?.into_iter().zip(self.blueprints()?).enumerate() {
            let dz = kernel.inducing_dim(d_in);
            let mean_map = if kernel.is_conv() || l == last {
                MeanMap::Zero
            } else if d_in == bp.width {
                MeanMap::Identity
            } else {
                MeanMap::Linear(Matrix::zeros(d_in, bp.width))
            };
            let z = Matrix::from_fn(bp.num_inducing, dz, |i, j| (i * dz + j) as f64);
            layers.push(LayerState::new(kernel, z, d_in, bp.width, mean_map, bp.trainable_z)?);
            d_in = bp.width;
        }
        let mut model = DgpModel::new(layers, num_train, classes)?;
        model.mc_train = self.run.mc_train;
        model.mc_predict = self.run.mc_predict;
        Ok(model)
    }
}

fn limit(d: Dataset<f64>, n: Option<usize>) -> Dataset<f64> {
    match n {
        Some(n) => d.take(n),
        None => d,
    }
}

/// Loads the train and test splits named by the configuration.
pub fn load_datasets(cfg: &DatasetConfig, data_dir: &Path) -> Result<(Dataset<f64>, Dataset<f64>), ExperimentError> {
    Ok(match cfg {
        DatasetConfig::Toy {
            task,
            size,
            n_train,
            n_test,
            seed,
        } => {
            let train = data::generate_toy(derive_seed(*seed, Stream::Data, &[0]), *n_train, *size, *task)?;
            let mut test = data::generate_toy(derive_seed(*seed, Stream::Data, &[1]), *n_test, *size, *task)?;
            test.split = Split::Test;
            (train, test)
        }
        DatasetConfig::Mnist { classes, n_train, n_test } => {
            let load = |img: &str, lbl: &str, split| data::load_mnist::<f64>(&data_dir.join(img), &data_dir.join(lbl), split);
            let mut train = load("train-images-idx3-ubyte", "train-labels-idx1-ubyte", Split::Train)?;
            let mut test = load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", Split::Test)?;
            if let Some(c) = classes {
                train = train.filter_classes(c)?;
                test = test.filter_classes(c)?;
            }
            (limit(train, *n_train), limit(test, *n_test))
        }
        DatasetConfig::RectanglesImage {
            train_file,
            test_file,
            n_train,
            n_test,
        } => (
            limit(data::load_rectangles_image(&data_dir.join(train_file), Split::Train)?, *n_train),
            limit(data::load_rectangles_image(&data_dir.join(test_file), Split::Test)?, *n_test),
        ),
        DatasetConfig::Cifar10 { n_train, n_test } => {
            let dir = data_dir.join("cifar-10-batches-bin");
            let train_paths: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            let refs: Vec<&Path> = train_paths.iter().map(PathBuf::as_path).collect();
            (
                limit(data::load_cifar10(&refs, Split::Train)?, *n_train),
                limit(data::load_cifar10(&[&dir.join("test_batch.bin")], Split::Test)?, *n_test),
            )
        }
        DatasetConfig::Synthetic {
            n,
            width,
            height,
            channels,
            seed,
        } => {
            let images = data::synthetic_images(*seed, *n, (*width, *height, *channels));
            let labels = (0..*n).map(|i| i % 2).collect();
            let d = Dataset::new(images, (*width, *height, *channels), labels, 2, Split::Train)?;
            (d.clone(), Dataset { split: Split::Test, ..d })
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy: f64,
    pub nlpp: f64,
    pub steps: u64,
    pub final_elbo: Option<f64>,
}

impl Summary {
    pub fn line(&self) -> String {
        format!("accuracy={:.4}, nlpp={:.4}", self.accuracy, self.nlpp)
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), ExperimentError> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Test-split metrics from the seeded predictive stream.
pub fn evaluate(model: &DgpModel<f64>, test: &Dataset<f64>, seed: u64) -> Result<Metrics, ExperimentError> {
    if test.images.cols() != model.input_dim() {
        return Err(ExperimentError::Config(format!(
            "dataset: test images have {} values, the model expects {}",
            test.images.cols(),
            model.input_dim()
        )));
    }
    let pred = model.predict(&test.images, &mut substream(seed, Stream::Predict, &[0]))?;
    Ok(metrics(&pred, &test.labels)?)
}

fn checkpoint_of(model: &DgpModel<f64>, state: &TrainState<f64>, digest: &[u8; 32]) -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.set_digest(digest);
    save_model(model, &mut ck);
    state.save(&mut ck);
    ck
}

/// Initializes the model from training data (k-means inducing inputs).
pub fn initial_model(cfg: &ExperimentConfig, train: &Dataset<f64>) -> Result<DgpModel<f64>, ExperimentError> {
    let init = init_layers(&cfg.blueprints()?, &train.images, &InitOptions::new(cfg.run.seed))?;
    let mut model = DgpModel::new(init.layers, train.len(), cfg.num_classes())?;
    model.mc_train = cfg.run.mc_train;
    model.mc_predict = cfg.run.mc_predict;
    Ok(model)
}

/// Data, initialization, training and test evaluation. Writes the
/// checkpoint, trace and metrics under `paths.out_dir`.
pub fn run_train(
    cfg: &ExperimentConfig,
    paths: &Paths,
    log: &mut dyn FnMut(&str),
) -> Result<Summary, ExperimentError> {
    cfg.validate()?;
    let (train_set, test_set) = load_datasets(&cfg.dataset, &paths.data_dir)?;
    if train_set.num_classes != cfg.num_classes() {
        return Err(ExperimentError::Config(format!(
            "dataset: {} classes, layers end in {}",
            train_set.num_classes,
            cfg.num_classes()
        )));
    }
    cfg.run.validate(train_set.len())?;
    let t0 = Instant::now();
    let mut model = initial_model(cfg, &train_set)?;
    log(&format!(
        "initialized {} layers on {} images in {:.1}s",
        model.layers.len(),
        train_set.len(),
        t0.elapsed().as_secs_f64()
    ));
    fs::create_dir_all(&paths.out_dir).map_err(io_err(&paths.out_dir))?;
    let ck_path = paths.out_dir.join(CHECKPOINT_FILE);
    let trace_path = paths.out_dir.join(TRACE_FILE);
    let dig = cfg.digest();
    let mut state = TrainState::new(&model, &cfg.run);
    let every = cfg.run.checkpoint_every;
    let mut observer = |p: Progress<'_, f64>| -> Result<(), TrainError> {
        if let Progress::EpochEnd { row, model, state } = p {
            log(&format!(
                "epoch {} step {} elbo {:.4} ({:.1}s)",
                row.epoch, row.step, row.elbo, row.wall_seconds
            ));
            fs::write(&trace_path, trace_csv(&state.trace)).map_err(|e| TrainError::Observer(e.to_string()))?;
            if every > 0 && (row.epoch + 1) % every == 0 {
                checkpoint_of(model, state, &dig).write(&ck_path)?;
            }
        }
        Ok(())
    };
    train(&mut model, &train_set.images, &train_set.labels, &cfg.run, &mut state, &mut observer)?;
    checkpoint_of(&model, &state, &dig).write(&ck_path)?;
    write_file(&trace_path, trace_csv(&state.trace).as_bytes())?;
    let m = evaluate(&model, &test_set, cfg.run.seed)?;
    let summary = Summary {
        accuracy: m.accuracy,
        nlpp: m.nlpp,
        steps: state.step,
        final_elbo: state.trace.last().map(|r| r.elbo),
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&paths.out_dir.join(METRICS_FILE), json.as_bytes())?;
    Ok(summary)
}

/// Loads a checkpoint written for `cfg` into a fresh model.
pub fn load_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<DgpModel<f64>, ExperimentError> {
    cfg.validate()?;
    let ck = Checkpoint::read(path)?;
    let sizes = ck.counts("model.sizes")?;
    let num_train = sizes.get(1).copied().unwrap_or(1).max(1) as usize;
    let mut model = cfg.skeleton(num_train)?;
    load_model(&ck, &mut model)?;
    ck.check_digest(&cfg.digest())?;
    model.num_train = num_train;
    Ok(model)
}

/// Test-split accuracy and NLPP of a stored model.
pub fn run_eval(cfg: &ExperimentConfig, checkpoint: &Path, paths: &Paths) -> Result<Metrics, ExperimentError> {
    let model = load_checkpoint(cfg, checkpoint)?;
    let (_, test) = load_datasets(&cfg.dataset, &paths.data_dir)?;
    evaluate(&model, &test, cfg.run.seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub patches: usize,
    pub subset: usize,
    pub wall_full: f64,
    pub wall_sub: f64,
    /// Largest absolute difference between the two diagonals.
    pub max_diff: f64,
}

impl BenchRow {
    pub fn ratio(&self) -> f64 {
        self.wall_full / self.wall_sub
    }
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("P,S,wall_seconds_full,wall_seconds_sub,ratio\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.3}\n",
            r.patches,
            r.subset,
            r.wall_full,
            r.wall_sub,
            r.ratio()
        ));
    }
    s
}

fn timed<F: FnMut() -> Result<Vec<f64>, KernelError>>(repeats: usize, mut f: F) -> Result<(f64, Vec<f64>), KernelError> {
    let mut best = f64::INFINITY;
    let mut out = Vec::new();
    for _ in 0..repeats {
        let t = Instant::now();
        out = f()?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok((best, out))
}

/// Times the batch `K_FF` diagonal with all patches against patch
/// subsets of the configured sizes.
pub fn run_bench_rows(cfg: &ExperimentConfig, images: &Matrix<f64>) -> Result<Vec<BenchRow>, ExperimentError> {
    let b = cfg
        .bench
        .as_ref()
        .ok_or_else(|| ExperimentError::Config("bench: section missing".into()))?;
    cfg.validate_bench(b)?;
    let ((w, h, c), _) = dataset_shape(&cfg.dataset);
    let geom = PatchGeometry::new(w, h, c, b.patch[0], b.patch[1], b.stride).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let p = geom.num_patches();
    let spec = |subsets: Option<SubsetPair>| {
        KernelSpec::Conv(ConvParams {
            base: BaseKernel::Rbf(RbfParams::with_lengthscale(1.0, cfg.dataset.default_lengthscale())),
            geom,
            weights: b.weighted.then(|| vec![1.0; p]),
            subsets,
            log_noise: NOISE_RATIO.ln(),
        })
    };
    let full = spec(None);
    let (wall_full, diag_full) = timed(b.repeats, || kff_diag(images, &full))?;
    let mut rows = Vec::with_capacity(b.subset_sizes.len());
    for (i, &k) in b.subset_sizes.iter().enumerate() {
        let draw = |side: u64| -> Result<PatchSubset, ExperimentError> {
            draw_subset(p, k, derive_seed(cfg.run.seed, Stream::Subset, &[i as u64, side]))
                .map_err(|e| ExperimentError::Config(e.to_string()))
        };
        let sub = spec(Some(SubsetPair {
            left: draw(0)?,
            right: draw(1)?,
        }));
        let (wall_sub, diag_sub) = timed(b.repeats, || kff_diag(images, &sub))?;
        let max_diff = diag_full
            .iter()
            .zip(&diag_sub)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        rows.push(BenchRow {
            patches: p,
            subset: k,
            wall_full,
            wall_sub,
            max_diff,
        });
    }
    Ok(rows)
}

/// Benchmark on the configured dataset's training images; writes the CSV.
pub fn run_bench(cfg: &ExperimentConfig, paths: &Paths) -> Result<Vec<BenchRow>, ExperimentError> {
    cfg.validate()?;
    let (train_set, _) = load_datasets(&cfg.dataset, &paths.data_dir)?;
    let rows = run_bench_rows(cfg, &train_set.images)?;
    fs::create_dir_all(&paths.out_dir).map_err(io_err(&paths.out_dir))?;
    write_file(&paths.out_dir.join(BENCH_FILE), bench_csv(&rows).as_bytes())?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
              "name": "t",
              "dataset": {"kind": "toy", "task": "rectangles", "size": 6, "n_train": 20, "n_test": 10},
              "layers": [
                {"kernel": "wconv", "width": 2, "patch": [3, 3], "inducing": 5, "lengthscale": 2.0},
                {"kernel": "rbf", "width": 2, "inducing": 5, "lengthscale": 1.0}
              ],
              "run": {"epochs": 1, "minibatch": 10, "step_size": 0.01, "seed": 0, "mc_train": 1, "mc_predict": 3}
            }"#,
        )
        .unwrap()
    }

    fn config_error(cfg: &ExperimentConfig) -> String {
        match cfg.validate() {
            Err(ExperimentError::Config(m)) => m,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn validation_names_the_field() {
        let ok = toy_config();
        ok.validate().unwrap();
        let mut c = ok.clone();
        c.layers[1].width = 3;
        assert!(config_error(&c).starts_with("layers[1].width"));
        let mut c = ok.clone();
        c.layers[0].patch = Some([7, 7]);
        assert!(config_error(&c).starts_with("layers[0].patch"));
        let mut c = ok.clone();
        c.layers[0].subsample = 0.0;
        assert!(config_error(&c).starts_with("layers[0].subsample"));
        let mut c = ok.clone();
        c.run.minibatch = 21;
        assert!(config_error(&c).starts_with("run.minibatch"));
        let mut c = ok.clone();
        c.layers[1].base = BaseKind::SumRbf;
        assert!(config_error(&c).starts_with("layers[1].lengthscales"));
        let mut c = ok;
        c.layers[1].patch = Some([1, 1]);
        assert!(config_error(&c).starts_with("layers[1].patch"));
        let e = ExperimentConfig::from_json(r#"{"name": "x", "dataset": {"kind": "toy"}}"#).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = serde_json::to_string(&toy_config()).unwrap().replace("\"stride\"", "\"strdie\"");
        let e = ExperimentConfig::from_json(&text).unwrap_err();
        assert!(e.to_string().contains("strdie"));
    }

    #[test]
    fn kernels_follow_the_layer_table() {
        let mut cfg = toy_config();
        cfg.layers[0].subsample = 0.5;
        let ks = cfg.kernels().unwrap();
        let KernelSpec::Conv(c) = &ks[0] else { panic!("conv expected") };
        assert_eq!(c.geom.num_patches(), 16);
        assert_eq!(c.weights.as_deref(), Some(&[1.0; 16][..]));
        let s = c.subsets.as_ref().unwrap();
        assert_eq!((s.left.len(), s.right.len()), (8, 8));
        assert_ne!(s.left, s.right);
        assert!((ks[0].noise_variance() - 1e-2).abs() < 1e-15);
        assert!(!ks[1].is_conv());
        assert!((ks[1].base().components()[0].kappa() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hidden_conv_layers_use_windows() {
        let mut cfg = toy_config();
        cfg.layers.insert(
            1,
            LayerConfig {
                kernel: KernelKind::Conv,
                base: BaseKind::Rbf,
                width: 2,
                inducing: 4,
                patch: Some([1, 1]),
                stride: 1,
                subsample: 1.0,
                shared_subset: false,
                lengthscale: None,
                lengthscales: None,
                variance: 1.0,
                weight_init: 1.0,
                trainable_z: false,
            },
        );
        let ks = cfg.kernels().unwrap();
        let KernelSpec::Conv(c) = &ks[1] else { panic!("conv expected") };
        assert_eq!((c.geom.num_patches(), c.geom.patch_dim()), (2, 1));
    }

    #[test]
    fn digest_tracks_the_model_and_run() {
        let a = toy_config();
        let mut b = a.clone();
        b.out_dir = Some("elsewhere".into());
        assert_eq!(a.digest(), b.digest());
        b.run.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn skeleton_accepts_a_trained_checkpoint() {
        let cfg = toy_config();
        let (train_set, _) = load_datasets(&cfg.dataset, Path::new(".")).unwrap();
        let model = initial_model(&cfg, &train_set).unwrap();
        let state = TrainState::new(&model, &cfg.run);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cdgp");
        checkpoint_of(&model, &state, &cfg.digest()).write(&path).unwrap();
        let back = load_checkpoint(&cfg, &path).unwrap();
        assert_eq!(back, model);
        let mut other = cfg.clone();
        other.run.seed = 5;
        assert!(matches!(
            load_checkpoint(&other, &path),
            Err(ExperimentError::Checkpoint(CheckpointError::DigestMismatch))
        ));
        let mut wider = cfg;
        wider.layers[0].width = 3;
        let e = load_checkpoint(&wider, &path).unwrap_err();
        assert_eq!(e.category(), "config");
    }

    #[test]
    fn bench_rows_for_a_tiny_geometry() {
        let cfg = ExperimentConfig::from_json(
            r#"{
              "name": "b",
              "dataset": {"kind": "synthetic", "n": 3, "width": 4, "height": 4, "channels": 1},
              "run": {"epochs": 1, "minibatch": 1, "step_size": 0.01, "seed": 0, "mc_train": 1, "mc_predict": 1},
              "bench": {"patch": [3, 3], "subset_sizes": [4, 2], "repeats": 1}
            }"#,
        )
        .unwrap();
        let (d, _) = load_datasets(&cfg.dataset, Path::new(".")).unwrap();
        let rows = run_bench_rows(&cfg, &d.images).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].max_diff, 0.0);
        assert!(rows[1].max_diff > 0.0);
        let csv = bench_csv(&rows);
        assert!(csv.starts_with("P,S,wall_seconds_full,wall_seconds_sub,ratio\n4,4,"));
        assert_eq!(csv.lines().count(), 3);
    }
}
