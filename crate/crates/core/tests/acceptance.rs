//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! MNIST is read from `CDGP_MNIST_DIR`, falling back to `data/mnist` at the
//! workspace root; criteria needing it report SKIP when the files are absent.

mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use cdgp::experiment::{
    evaluate, initial_model, load_datasets, run_bench_rows, run_train, DatasetConfig, ExperimentConfig, KernelKind, Paths,
    Summary,
};
use cdgp::kernels::{conv_kernel, kff_diag, kfz, kzz, BaseKernel, ConvParams, KernelSpec, RbfParams, SubsetPair};
use cdgp::numerics::gradcheck::check_gradients;
use cdgp::numerics::linalg::cholesky;
use cdgp::numerics::Matrix;
use cdgp::patching::{PatchGeometry, PatchSubset};
use cdgp::svgp_layer::MeanMap;
use cdgp::train::{train, TrainState};
use common::*;
use rand::Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Verdict::*;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&root().join("configs").join(name)).unwrap()
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("CDGP_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| root().join("data/mnist"));
    dir.join("train-images-idx3-ubyte").exists().then_some(dir)
}

fn within(t: Instant, limit_s: f64) -> (bool, f64) {
    let s = t.elapsed().as_secs_f64();
    (s < limit_s, s)
}

fn conv(geom: PatchGeometry, weights: Option<Vec<f64>>) -> ConvParams<f64> {
    ConvParams {
        base: BaseKernel::Rbf(RbfParams::new(1.1, 0.7)),
        geom,
        weights,
        subsets: None,
        log_noise: (1e-2f64).ln(),
    }
}

fn kernel_correctness() -> Verdict {
    let t = Instant::now();
    let mut r = rng(1);
    let mut pairs = 0;
    for size in [6, 10] {
        let g = PatchGeometry::new(size, size, 1, 3, 3, 1).unwrap();
        for _ in 0..200 {
            let xi: Vec<f64> = (0..size * size).map(|_| r.random_range(0.0..1.0)).collect();
            let xj: Vec<f64> = (0..size * size).map(|_| r.random_range(0.0..1.0)).collect();
            let w: Vec<f64> = (0..g.num_patches()).map(|_| r.random_range(-1.0..1.0)).collect();
            for p in [conv(g, None), conv(g, Some(w))] {
                if conv_kernel(&xi, &xj, &p).unwrap() != brute_conv(&xi, &xj, &p) {
                    return Fail(format!("{size}x{size} pair differs from the double loop"));
                }
            }
            pairs += 1;
        }
    }
    let mut worst = f64::INFINITY;
    for m in [10, 25, 50] {
        let g = PatchGeometry::new(6, 6, 1, 3, 3, 1).unwrap();
        let w: Vec<f64> = (0..g.num_patches()).map(|_| r.random_range(-1.0..1.0)).collect();
        let x = uniform_matrix(&mut r, m, 36);
        for p in [conv(g, None), conv(g, Some(w))] {
            let k = Matrix::from_fn(m, m, |i, j| conv_kernel(x.row(i), x.row(j), &p).unwrap());
            worst = worst.min(min_eigenvalue(&k));
            let spec = KernelSpec::Conv(ConvParams {
                log_noise: f64::NEG_INFINITY,
                ..p
            });
            worst = worst.min(min_eigenvalue(&kzz(&uniform_matrix(&mut r, m, 9), &spec).unwrap()));
        }
    }
    let (fast, s) = within(t, 60.0);
    check(
        worst >= -1e-10 && fast,
        format!("{pairs} image pairs exact, min eigenvalue {worst:.2e}, {s:.1}s"),
    )
}

fn reductions() -> Verdict {
    let mut r = rng(2);
    let whole = conv(PatchGeometry::whole(5, 5, 1), None);
    let base = RbfParams::new(1.1, 0.7);
    let g = PatchGeometry::new(8, 8, 1, 3, 3, 1).unwrap();
    let np = g.num_patches();
    let plain = conv(g, None);
    let unit = conv(g, Some(vec![1.0; np]));
    let full = ConvParams {
        subsets: Some(SubsetPair {
            left: PatchSubset::full(np),
            right: PatchSubset::full(np),
        }),
        ..plain.clone()
    };
    let x = uniform_matrix(&mut r, 20, 64);
    let x25 = uniform_matrix(&mut r, 20, 25);
    let z = uniform_matrix(&mut r, 6, 9);
    let mut bad = Vec::new();
    for i in 0..20 {
        for j in 0..20 {
            if conv_kernel(x25.row(i), x25.row(j), &whole).unwrap() != cdgp::kernels::rbf(x25.row(i), x25.row(j), &base).unwrap() {
                bad.push("P=1");
            }
            let want = conv_kernel(x.row(i), x.row(j), &plain).unwrap();
            if conv_kernel(x.row(i), x.row(j), &unit).unwrap() != want {
                bad.push("unit weights");
            }
            if conv_kernel(x.row(i), x.row(j), &full).unwrap() != want {
                bad.push("full subsets");
            }
        }
    }
    let specs = [plain, unit, full].map(KernelSpec::Conv);
    for s in &specs[1..] {
        if kff_diag(&x, s).unwrap() != kff_diag(&x, &specs[0]).unwrap() || kfz(&x, &z, s).unwrap() != kfz(&x, &z, &specs[0]).unwrap() {
            bad.push("batch builders");
        }
    }
    bad.dedup();
    check(bad.is_empty(), if bad.is_empty() { "all three reductions bit-exact".into() } else { format!("mismatch: {bad:?}") })
}

fn gradient_suite() -> Verdict {
    let t = Instant::now();
    let cfg = ExperimentConfig::from_json(
        r#"{
        "name": "gradcheck",
        "dataset": { "kind": "toy", "task": "rectangles", "size": 8, "n_train": 6, "n_test": 6, "seed": 3 },
        "layers": [
            { "kernel": "wconv", "width": 3, "patch": [3, 3], "inducing": 4, "lengthscale": 2.0, "trainable_z": true },
            { "kernel": "rbf", "width": 2, "inducing": 4, "lengthscale": 2.0, "trainable_z": true }
        ],
        "run": { "epochs": 1, "minibatch": 6, "step_size": 0.01, "seed": 3, "mc_train": 2, "mc_predict": 5 }
    }"#,
    )
    .unwrap();
    let (data, _) = load_datasets(&cfg.dataset, Path::new("unused")).unwrap();
    let mut model = initial_model(&cfg, &data).unwrap();
    let mut r = rng(3);
    let mut params = model.trainable_params();
    for p in &mut params {
        for v in p.as_mut_slice() {
            *v += r.random_range(-0.2..0.2);
        }
    }
    model.set_trainable_params(&params).unwrap();
    let noise = model.draw_noise(6, 2, &mut r);
    let (_, analytic) = model.elbo_and_gradients(&data.images, &data.labels, &noise).unwrap();
    let f = |p: &[Matrix<f64>]| {
        let mut m = model.clone();
        m.set_trainable_params(p).unwrap();
        m.elbo_with(&data.images, &data.labels, &noise).unwrap()
    };
    let report = check_gradients(f, &params, &analytic, 1e-6);
    let names = model.param_names();
    let (fast, s) = within(t, 120.0);
    check(
        report.max_rel_error < 1e-4 && fast,
        format!(
            "{} entries over {} parameter arrays, max rel. error {:.2e} (worst {:?}), {s:.1}s",
            report.entries_checked,
            names.len(),
            report.max_rel_error,
            report.worst.map(|(p, e)| (names[p].clone(), e))
        ),
    )
}

fn kl_properties() -> Verdict {
    let mut r = rng(4);
    let (mut worst_gap, mut min_kl, mut worst_prior) = (0.0f64, f64::INFINITY, 0.0f64);
    for i in 0..100 {
        let m = 1 + i % 8;
        let w = MeanMap::Linear(symmetric_matrix(&mut r, 3, 2, 0.5));
        let mut layer = random_layer(&mut r, m, 3, 2, w);
        let kl = layer.kl().unwrap();
        let oracle = kl_oracle(&layer);
        min_kl = min_kl.min(kl);
        worst_gap = worst_gap.max((kl - oracle).abs() / oracle.abs().max(1.0));
        let lz = cholesky(&kzz(&layer.z, &layer.kernel).unwrap(), 0.0).unwrap().factor;
        layer.set_variational_mean(&layer.prior_mean_at_z());
        for j in 0..2 {
            layer.set_covariance_factor(j, &lz);
        }
        worst_prior = worst_prior.max(layer.kl().unwrap().abs());
    }
    check(
        min_kl >= 0.0 && worst_gap < 1e-10 && worst_prior < 1e-10,
        format!("100 layers: min KL {min_kl:.3}, max oracle gap {worst_gap:.1e}, max |KL| at q=p {worst_prior:.1e}"),
    )
}

fn prior_recovery() -> Verdict {
    let mut r = rng(5);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let w = MeanMap::Linear(symmetric_matrix(&mut r, 3, 2, 0.5));
        let mut layer = random_layer(&mut r, 6, 3, 2, w);
        let lz = cholesky(&kzz(&layer.z, &layer.kernel).unwrap(), 0.0).unwrap().factor;
        layer.set_variational_mean(&layer.prior_mean_at_z());
        for j in 0..2 {
            layer.set_covariance_factor(j, &lz);
        }
        let x = symmetric_matrix(&mut r, 8, 3, 1.5);
        let (mean, var) = layer.conditional(&x).unwrap();
        let prior = layer.mean_map.apply(&x, 2);
        let kff = kff_diag(&x, &layer.kernel).unwrap();
        for n in 0..8 {
            for j in 0..2 {
                worst = worst.max((mean[(n, j)] - prior[(n, j)]).abs());
                worst = worst.max((var[(n, j)] - kff[n]).abs());
            }
        }
    }
    check(worst < 1e-10, format!("max deviation from the prior {worst:.1e}"))
}

fn toy_learning() -> Verdict {
    let t = Instant::now();
    let cfg = config("toy-rectangles-cdgp1.json");
    let (data, _) = load_datasets(&cfg.dataset, Path::new("unused")).unwrap();
    let mut model = initial_model(&cfg, &data).unwrap();
    let mut state = TrainState::new(&model, &cfg.run);
    train(&mut model, &data.images, &data.labels, &cfg.run, &mut state, &mut |_| Ok(())).unwrap();
    let acc = evaluate(&model, &data, cfg.run.seed).unwrap().accuracy;
    let (fast, s) = within(t, 300.0);
    check(
        acc >= 0.95 && state.step == 200 && fast,
        format!("train accuracy {acc:.4} after {} steps, {s:.1}s", state.step),
    )
}

struct Run {
    summary: Summary,
    seconds: f64,
    checkpoint: Vec<u8>,
    metrics: Vec<u8>,
}

fn run_config(cfg: &ExperimentConfig, data_dir: &Path) -> Run {
    let out = tempfile::tempdir().unwrap();
    let paths = Paths {
        data_dir: data_dir.to_path_buf(),
        out_dir: out.path().to_path_buf(),
    };
    let t = Instant::now();
    let summary = run_train(cfg, &paths, &mut |_| {}).unwrap();
    Run {
        summary,
        seconds: t.elapsed().as_secs_f64(),
        checkpoint: std::fs::read(out.path().join("checkpoint.cdgp")).unwrap(),
        metrics: std::fs::read(out.path().join("metrics.json")).unwrap(),
    }
}

fn with_seed(mut cfg: ExperimentConfig, seed: u64) -> ExperimentConfig {
    cfg.run.seed = seed;
    cfg
}

fn same(a: &Run, b: &Run) -> bool {
    a.checkpoint == b.checkpoint && a.metrics == b.metrics
}

fn subsample_speedup(bench_rows: &[cdgp::experiment::BenchRow], seconds: f64) -> Verdict {
    let Some(row) = bench_rows.iter().find(|r| r.subset == 211) else {
        return Fail("no |S| = 211 row".into());
    };
    check(
        row.patches == 2116 && row.ratio() >= 5.0 && row.max_diff > 0.0 && seconds < 600.0,
        format!(
            "P={}, |S|=|S'|={}: full {:.3}s, subset {:.3}s, speedup {:.1}x, max diagonal change {:.3e}, {seconds:.1}s",
            row.patches,
            row.subset,
            row.wall_full,
            row.wall_sub,
            row.ratio(),
            row.max_diff
        ),
    )
}

fn parity_configs() -> Verdict {
    let dir = root().join("configs/full-scale");
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    let mut problems = Vec::new();
    for path in &entries {
        let cfg = ExperimentConfig::load(path).unwrap();
        let name = path.file_stem().unwrap().to_string_lossy().to_string();
        if let Err(e) = cfg.validate() {
            problems.push(format!("{name}: {e}"));
            continue;
        }
        let (width, patch, epochs, minibatch) = match cfg.dataset {
            DatasetConfig::Mnist { .. } => (30, [5, 5], 400, 1000),
            DatasetConfig::RectanglesImage { .. } => (50, [3, 3], 200, 1000),
            DatasetConfig::Cifar10 { .. } => (50, [5, 5], 200, 40),
            _ => {
                problems.push(format!("{name}: unexpected dataset"));
                continue;
            }
        };
        let run = &cfg.run;
        if run.epochs != epochs || run.minibatch != minibatch || run.step_size != 0.01 {
            problems.push(format!("{name}: optimizer settings"));
        }
        let last = cfg.layers.len() - 1;
        for (l, layer) in cfg.layers.iter().enumerate() {
            let ok = layer.inducing == 100
                && (l == last || layer.width == width)
                && (l == last && layer.width == cfg.num_classes() || l != last)
                && (l > 0 || layer.kernel == KernelKind::Rbf || layer.patch == Some(patch));
            if !ok {
                problems.push(format!("{name}: layer {l}"));
            }
        }
    }
    check(
        problems.is_empty() && entries.len() == 23,
        if problems.is_empty() {
            format!(
                "{} full-scale configs match the published settings; running them is outside desk scope (targets 98.66% MNIST, 79.74% rectangles-image, +/-0.5%)",
                entries.len()
            )
        } else {
            format!("{problems:?}")
        },
    )
}

fn main() -> ExitCode {
    let mut lines: Vec<(String, Verdict)> = Vec::new();
    let mut record = |id: &str, v: Verdict| {
        let (tag, detail) = match &v {
            Pass(d) => ("PASS", d),
            Fail(d) => ("FAIL", d),
            Skip(d) => ("SKIP", d),
        };
        println!("[{tag}] criterion {id}: {detail}");
        lines.push((id.to_string(), v));
    };

    record("1 kernel correctness", kernel_correctness());
    record("2 reductions", reductions());
    record("3 gradient suite", gradient_suite());
    record("4 KL properties", kl_properties());
    record("5 prior recovery", prior_recovery());
    record("6a toy learning", toy_learning());

    let mut determinism: Vec<(String, bool)> = Vec::new();
    for name in ["toy-rectangles-cdgp1.json", "toy-blobs-cdgp1.json"] {
        let cfg = config(name);
        let (a, b) = (run_config(&cfg, Path::new("unused")), run_config(&cfg, Path::new("unused")));
        determinism.push((name.into(), same(&a, &b)));
    }

    match mnist_dir() {
        None => {
            record("6b MNIST 0-vs-1", Skip("MNIST files not found (set CDGP_MNIST_DIR)".into()));
            record("6c CDGP1 vs DGP1", Skip("MNIST files not found".into()));
        }
        Some(dir) => {
            let cdgp = config("mnist01-cdgp1.json");
            let dgp = config("mnist01-dgp1.json");
            let main_run = run_config(&cdgp, &dir);
            record(
                "6b MNIST 0-vs-1",
                check(
                    main_run.summary.accuracy >= 0.98 && main_run.seconds < 900.0,
                    format!(
                        "CDGP1 test accuracy {:.4}, NLPP {:.4}, {:.0}s",
                        main_run.summary.accuracy, main_run.summary.nlpp, main_run.seconds
                    ),
                ),
            );
            let mut acc = [Vec::new(), Vec::new()];
            let mut first_dgp = None;
            for seed in 0..3 {
                let c = run_config(&with_seed(cdgp.clone(), seed), &dir);
                let d = run_config(&with_seed(dgp.clone(), seed), &dir);
                if seed == 0 {
                    determinism.push(("mnist01-cdgp1.json".into(), same(&c, &main_run)));
                    first_dgp = Some(d);
                    let d = first_dgp.as_ref().unwrap();
                    acc[0].push(c.summary.accuracy);
                    acc[1].push(d.summary.accuracy);
                } else {
                    acc[0].push(c.summary.accuracy);
                    acc[1].push(d.summary.accuracy);
                }
            }
            let again = run_config(&dgp, &dir);
            determinism.push(("mnist01-dgp1.json".into(), same(&again, first_dgp.as_ref().unwrap())));
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let (mc, md) = (mean(&acc[0]), mean(&acc[1]));
            record(
                "6c CDGP1 vs DGP1",
                check(mc >= md, format!("mean test accuracy over seeds 0-2: CDGP1 {mc:.4} {:?}, DGP1 {md:.4} {:?}", acc[0], acc[1])),
            );
        }
    }

    let bench = config("bench-subsample.json");
    let (images, _) = load_datasets(&bench.dataset, Path::new("unused")).unwrap();
    let t = Instant::now();
    let rows = run_bench_rows(&bench, &images.images).unwrap();
    record("7 subsampling speedup", subsample_speedup(&rows, t.elapsed().as_secs_f64()));
    let again = run_bench_rows(&bench, &images.images).unwrap();
    let diffs = |r: &[cdgp::experiment::BenchRow]| r.iter().map(|x| x.max_diff.to_bits()).collect::<Vec<_>>();
    determinism.push(("bench-subsample.json (kernel values)".into(), diffs(&rows) == diffs(&again)));

    let failed: Vec<&String> = determinism.iter().filter(|(_, ok)| !ok).map(|(n, _)| n).collect();
    record(
        "8 determinism",
        check(
            failed.is_empty(),
            if failed.is_empty() {
                format!("bit-identical checkpoints and metrics for {} configs", determinism.len())
            } else {
                format!("differing runs: {failed:?}")
            },
        ),
    );
    record("9 parity configs", parity_configs());

    let fails = lines.iter().filter(|(_, v)| matches!(v, Fail(_))).count();
    let skips = lines.iter().filter(|(_, v)| matches!(v, Skip(_))).count();
    println!("acceptance: {} passed, {fails} failed, {skips} skipped", lines.len() - fails - skips);
    if fails == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
