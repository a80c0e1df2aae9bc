//! `scripsim` command-line front end.

mod args;
mod commands;
mod suite;

use std::process::ExitCode;

use clap::Parser;

use args::Cli;

/// Exit status for model errors such as `Infeasible` or `NoSolution`.
const EXIT_DOMAIN: u8 = 1;
/// Exit status for bad flags, unreadable inputs and invalid configs.
const EXIT_USAGE: u8 = 2;

fn init_threads() -> anyhow::Result<()> {
    if let Ok(value) = std::env::var("SCRIPSIM_THREADS") {
        let threads: usize = value.parse().map_err(|_| {
            anyhow::anyhow!("SCRIPSIM_THREADS must be a positive integer, got {value:?}")
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()?;
    }
    Ok(())
}

/// Exit status and label for an error from a command.
pub(crate) fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    match err.downcast_ref::<scripsim::Error>() {
        Some(e) if e.is_domain() => (EXIT_DOMAIN, e.name()),
        Some(e) => (EXIT_USAGE, e.name()),
        None => (EXIT_USAGE, "UsageError"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(err) = init_threads() {
        eprintln!("error: UsageError: {err}");
        return ExitCode::from(EXIT_USAGE);
    }
    match commands::run(&cli.command) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let (code, name) = classify(&err);
            eprintln!("error: {name}: {err:#}");
            ExitCode::from(code)
        }
    }
}
