use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use categorical_td::cli;
use categorical_td::Error;

#[derive(Parser)]
#[command(name = "categorical-td", version, about = "Categorical value learning experiments")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (cell, loss, seed) combination of an experiment config.
    Run {
        config: PathBuf,
        /// Added to every seed in the config.
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        /// Independent runs executed in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write the offline datasets an experiment would train on.
    Collect {
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
        #[arg(long)]
        force: bool,
    },
    /// Rebuild the aggregate report from the run files in a directory.
    Report { dir: PathBuf },
    /// Check the projection, gradient and statistics kernels against
    /// reference implementations.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match dispatch(args.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<u8, Error> {
    match command {
        Command::Run {
            config,
            seed_offset,
            force,
            jobs,
        } => {
            let cfg = cli::parse_config(&config)?.with_seed_offset(seed_offset);
            let outcome = cli::run_experiment(&cfg, force, jobs)?;
            print!("{}", cli::summarize(&outcome));
            Ok(if outcome.failures.is_empty() { 0 } else { 2 })
        }
        Command::Collect {
            config,
            seed_offset,
            force,
        } => {
            let cfg = cli::parse_config(&config)?.with_seed_offset(seed_offset);
            for p in cli::collect_datasets(&cfg, force)? {
                println!("{}", p.display());
            }
            Ok(0)
        }
        Command::Report { dir } => {
            let report = cli::report_dir(&dir)?;
            print!("{}", report.to_table());
            Ok(0)
        }
        Command::Verify { seed } => {
            let results = cli::verify(seed)?;
            print!("{}", cli::format_checks(&results));
            Ok(if results.iter().all(|r| r.passed) { 0 } else { 2 })
        }
    }
}
