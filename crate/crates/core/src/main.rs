use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use log::error;

use hamcmc::cli::{parse_config_with_seed, run_experiment};

/// Runs a sampling experiment described by a `key = value` config and writes CSV results.
#[derive(Debug, Parser)]
#[command(name = "hamcmc", version)]
struct Args {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for CSV files.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for independent chains (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

const CONFIG_ERROR: u8 = 2;
const RUNTIME_ERROR: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            error!("cannot read {}: {e}", args.config.display());
            return ExitCode::from(CONFIG_ERROR);
        }
    };
    let cfg = match parse_config_with_seed(&text, args.seed) {
        Ok(c) => c,
        Err(errors) => {
            for issue in &errors.0 {
                error!("{issue}");
            }
            return ExitCode::from(CONFIG_ERROR);
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.threads {
        if n == 0 {
            error!("--threads must be positive");
            return ExitCode::from(CONFIG_ERROR);
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            error!("cannot start thread pool: {e}");
            return ExitCode::from(RUNTIME_ERROR);
        }
    };
    match pool.install(|| run_experiment(&cfg, &args.out)) {
        Ok(summary) => {
            for f in &summary.files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
