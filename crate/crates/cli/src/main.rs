mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use config::{RunConfig, UsageError};

#[derive(Parser, Debug)]
#[command(name = "lgnk", version, about = "Koopman-lifted neural operator experiments")]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "LGNK_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

/// Run configuration shared by commands that train or generate data.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// JSON run configuration (sections model, train, data, output_dir).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set train.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Output directory (overrides output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a trajectory dataset from the data section.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model from scratch (or per train.mode).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset tensor file; generated in memory from the data section when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Relative L2 error of a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `train` or `test`.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dispersion spectrum of a checkpoint's generator.
    Spectra {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear fit of dominant damping against |k|^2.
    FitDissipation {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gauge-invariant comparison of two generators.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Long-horizon enstrophy and latent energy.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Number of test trajectories to average over.
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluation wall time against prediction horizon.
    BenchTime {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,10,50,100,200")]
        horizons: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a pretrained checkpoint on a new dataset.
    Transfer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `freeze_s` or `transfer_all`.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train one generator variant and report its spectrum.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// sd, unconstrained_l, s_only or d_only.
        #[arg(long)]
        variant: String,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train one model per channel count.
    SweepR {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        r_list: Vec<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of end-to-end gradients.
    CheckGrad {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Use the tiny harness configuration instead of the config's model.
        #[arg(long)]
        tiny: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn defaults_help() -> String {
    let defaults = serde_json::to_string_pretty(&RunConfig::default()).unwrap_or_default();
    format!("Config defaults (every key optional):\n{}", defaults)
}

/// Error chain joined by `: `, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let matches = match Cli::command().after_long_help(defaults_help()).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: thread pool: {}", e);
        return ExitCode::from(2);
    }
    match commands::run(cli.command) {
        Ok(files) => {
            for f in files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
