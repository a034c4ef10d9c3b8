use std::path::PathBuf;
use std::process::ExitCode;

use cdgp::experiment::{bench_csv, run_bench, run_eval, run_train, ExperimentConfig, ExperimentError, Paths, CHECKPOINT_FILE};
use clap::{Args, Parser, Subcommand};

/// Convolutional deep Gaussian process classifiers.
#[derive(Parser, Debug)]
#[command(name = "cdgp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Initialize, train and evaluate a model; writes checkpoint, trace and metrics.
    Train(Common),
    /// Evaluate a stored checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to load (default: <out-dir>/checkpoint.cdgp).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time the kernel diagonal with all patches against patch subsets.
    Bench(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Directory holding the dataset files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Directory receiving every output file.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Overrides the run seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 lets the runtime decide).
    #[arg(long, env = "CDGP_THREADS")]
    threads: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<(ExperimentConfig, Paths), ExperimentError> {
        if let Some(n) = self.threads.filter(|&n| n > 0) {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| ExperimentError::Config(format!("threads: {e}")))?;
        }
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        cfg.validate()?;
        let paths = Paths {
            data_dir: self.data_dir.clone().unwrap_or_else(|| cfg.default_data_dir()),
            out_dir: self.out_dir.clone().unwrap_or_else(|| cfg.default_out_dir()),
        };
        Ok((cfg, paths))
    }
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Train(common) => {
            let (cfg, paths) = common.resolve()?;
            let summary = run_train(&cfg, &paths, &mut |m| eprintln!("{m}"))?;
            println!("{}", summary.line());
        }
        Command::Eval { common, checkpoint } => {
            let (cfg, paths) = common.resolve()?;
            let ck = checkpoint.unwrap_or_else(|| paths.out_dir.join(CHECKPOINT_FILE));
            let m = run_eval(&cfg, &ck, &paths)?;
            println!("accuracy={:.4}, nlpp={:.4}", m.accuracy, m.nlpp);
        }
        Command::Bench(common) => {
            let (cfg, paths) = common.resolve()?;
            print!("{}", bench_csv(&run_bench(&cfg, &paths)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
