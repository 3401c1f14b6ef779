//! `stdegrade` command-line driver.

mod commands;
mod config;
mod error;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Config;
use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "stdegrade", version, about = "Spatio-temporal degradation model: simulation, estimation, validation and lifetime analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat `key = value` configuration file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// exponential, gaussian, matern or all.
    #[arg(long, global = true)]
    family: Option<String>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Monte Carlo runs, or replicates for `study`.
    #[arg(long, global = true)]
    runs: Option<usize>,
    /// Failure threshold for `fpt`.
    #[arg(long, global = true)]
    threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Simulate a degradation field.
    Simulate,
    /// Maximum-likelihood estimation; `--family all` adds model selection.
    Fit,
    /// Semi-variogram and chi-square diagnostics of one or more fits.
    Validate,
    /// First-passage time and location Monte Carlo.
    Fpt,
    /// Space-time covariance surfaces.
    Covariance,
    /// Compare the kernel step with a spectral solution of the transport equation.
    VerifyPde,
    /// Replicated simulate-and-fit study.
    Study,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Validate => "validate",
            Command::Fpt => "fpt",
            Command::Covariance => "covariance",
            Command::VerifyPde => "verify-pde",
            Command::Study => "study",
        }
    }
}

fn build_config(cli: &Cli) -> CliResult<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(c) = cfg.str_opt("command") {
        if c != cli.command.name() {
            return Err(CliError::Usage(format!("config was written for `{c}`, not `{}`", cli.command.name())));
        }
    }
    let flags: [(&str, Option<String>); 7] = [
        ("seed", cli.seed.map(|v| v.to_string())),
        ("out", cli.out.as_ref().map(|p| p.display().to_string())),
        ("family", cli.family.clone()),
        ("threads", cli.threads.map(|v| v.to_string())),
        ("runs", cli.runs.map(|v| v.to_string())),
        ("threshold", cli.threshold.map(|v| v.to_string())),
        ("command", None),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    cfg.resolve_paths()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = build_config(cli)?;
    if let Some(n) = cfg.get_opt::<usize>("threads")? {
        if n == 0 {
            return Err(CliError::Usage("threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure threads: {e}")))?;
    }
    let result = match cli.command {
        Command::Simulate => commands::simulate_cmd(&cfg),
        Command::Fit => commands::fit_cmd(&cfg),
        Command::Validate => commands::validate_cmd(&cfg),
        Command::Fpt => commands::fpt_cmd(&cfg),
        Command::Covariance => commands::covariance_cmd(&cfg),
        Command::VerifyPde => commands::verify_pde_cmd(&cfg),
        Command::Study => commands::study_cmd(&cfg),
    };
    if matches!(result, Ok(()) | Err(CliError::NotConverged(_)) | Err(CliError::Numerical(_))) {
        let dir = PathBuf::from(cfg.str_or("out", "out"));
        if dir.is_dir() {
            std::fs::File::create(dir.join("manifest.txt"))?.write_all(cfg.manifest(cli.command.name()).as_bytes())?;
        }
    }
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stdegrade {}: {e}", cli.command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
