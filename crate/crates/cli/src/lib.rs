//! Command-line driver: synthetic data, fitting, prediction, ANOVA
//! decomposition and complexity benchmarks.

pub mod commands;
pub mod config;
pub mod csvio;
pub mod error;

use std::io::Write;

use clap::Parser;

pub use config::{Cli, Command, RunConfig};
pub use error::{CliError, CliResult};

/// Generator behind every random draw, recorded in command outputs.
pub const RNG_NAME: &str = "ChaCha20 (rand_chacha 0.9, seed_from_u64)";

/// Run a parsed command line; returns text for standard output.
pub fn execute(cli: Cli) -> CliResult<String> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let threads = cli.threads.or(cfg.threads);
    if threads == Some(0) {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let bench = matches!(cli.command, Command::Bench(_));
    if let (Some(t), false) = (threads, bench) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synth(a) => commands::synth::run(a.merge(cfg.synth), seed),
        Command::Fit(a) => commands::fit::run(a.merge(cfg.fit), seed),
        Command::Predict(a) => {
            Ok(commands::predict::run(a.merge(cfg.predict))?.unwrap_or_default())
        }
        Command::Decompose(a) => commands::decompose::run(a.merge(cfg.decompose)),
        Command::Bench(a) => commands::bench::run(a.merge(cfg.bench), seed, threads),
    }
}

/// Parse `std::env::args`, run, and map the outcome to an exit code.
pub fn main_with_exit_code() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(out.as_bytes());
            let _ = stdout.flush();
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
