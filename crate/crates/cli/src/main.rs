//! `pra`: train, evaluate, gradient-check and benchmark point-cloud
//! networks built from ISL and IRL stages.
//!
//! Exit codes: 0 success, 1 gradient check failure or internal error,
//! 2 invalid configuration or input, 3 numeric divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::Ordering;

use clap::{Args, Parser, Subcommand};
use pra_core::Error;

use commands::{Overrides, INTERRUPTED};

#[derive(Parser)]
#[command(name = "pra", version, about = "Point-cloud region attention networks")]
struct Cli {
    /// Worker threads (defaults to $PRA_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Search neighbors on coordinates in every ISL stage.
    #[arg(long)]
    static_graph: bool,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            static_graph: self.static_graph,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a network; writes checkpoints, metrics.csv and summary.json.
    Train(RunArgs),
    /// Evaluate a checkpoint on the test split of a run config.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint file (defaults to the run's latest checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// Operation or module name, or `all`.
        #[arg(default_value = "all")]
        scope: String,
        /// Check a single seed instead of the default three.
        #[arg(long)]
        seed: Option<u64>,
        /// List the available scopes and exit.
        #[arg(long)]
        list: bool,
    },
    /// Time naive and representative-point cross-region attention.
    Bench {
        /// Sweep file (JSON); defaults to the reference timing grid.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "bench")]
        out: PathBuf,
    },
    /// Materialize synthetic train/test splits as xyzl directories.
    GenData {
        /// Data config with `train` and `test` synthetic specs (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        Error::Config(_) | Error::Json(_) | Error::Format(_) => 2,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Error> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("PRA_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("PRA_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<i32, Error> {
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            return Err(Error::Config("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size thread pool: {e}")))?;
    }
    match cli.command {
        Command::Train(run) => {
            // first interrupt: finish the epoch and checkpoint; second: abort
            let _ = ctrlc::set_handler(|| {
                if INTERRUPTED.swap(true, Ordering::SeqCst) {
                    std::process::exit(130);
                }
                eprintln!("interrupt received; stopping after the current epoch (press again to abort)");
            });
            commands::train(&run.config, &run.overrides())
        }
        Command::Eval { run, checkpoint } => commands::eval(&run.config, checkpoint.as_deref(), &run.overrides()),
        Command::Gradcheck { scope, seed, list } => {
            if list {
                for s in pra_core::gradsuite::scope_names() {
                    println!("{s}");
                }
                return Ok(0);
            }
            commands::gradcheck(&scope, seed)
        }
        Command::Bench { config, seed, out } => commands::bench(config.as_deref(), &out, seed),
        Command::GenData { config, out } => commands::gen_data(&config, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
