mod args;
mod commands;
mod error;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use error::CliError;

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("NORMINT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("NORMINT_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet {
        "warn"
    } else if cli.verbose {
        "debug"
    } else {
        "info"
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = init_threads().and_then(|_| match &cli.command {
        Command::Integrate(a) => commands::integrate(a),
        Command::MeshOnly(a) => commands::mesh_only(a),
        Command::SweepThreshold(a) => commands::sweep(a, commands::SweepKind::Threshold),
        Command::SweepNoise(a) => commands::sweep(a, commands::SweepKind::Noise),
        Command::SweepResolution(a) => commands::sweep(a, commands::SweepKind::Resolution),
        Command::Synth(a) => commands::synth(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
