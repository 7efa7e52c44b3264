//! `dedtwin`: drives the digital-twin pipeline end to end.
//!
//! Stages write under `<out>/<stage>/` and later stages read those
//! artifacts back, so the usual order is gen-profiles, simulate,
//! make-dataset, train, predict, optimize, report. Exit codes: 0 success,
//! 2 usage or config error, 3 missing upstream artifact, 4 numerical
//! failure.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use artifacts::{sha256_hex, CliError, CliResult};
use commands::PredictMode;
use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "dedtwin", version, about = "Thin-wall DED digital-twin pipeline")]
struct Cli {
    /// JSON experiment config; defaults apply for every omitted field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a randomized laser-power profile library.
    GenProfiles,
    /// Run the thermal build simulation for every library profile.
    Simulate,
    /// Split profiles into train/test and fit the normalizer.
    MakeDataset,
    /// Train the temperature surrogate on the training split.
    Train,
    /// Predict held-out histories with uncertainty bands.
    Predict {
        /// series: teacher-forced windows; rollout: closed loop, the model's
        /// own mean temperature is fed back after the first window.
        #[arg(long, value_enum, default_value_t = Mode::Series)]
        mode: Mode,
    },
    /// Search for the profile that maximizes time in the target band.
    Optimize,
    /// Summarize all stage manifests into one report.
    Report,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Series,
    Rollout,
}

fn load_config(cli: &Cli) -> CliResult<(ExperimentConfig, String)> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    let canonical = serde_json::to_string(&cfg)
        .map_err(|e| CliError::Io(format!("config serialize failed: {e}")))?;
    let hash = sha256_hex(canonical.as_bytes());
    Ok((cfg, hash))
}

fn run(cli: &Cli) -> CliResult<()> {
    let (cfg, hash) = load_config(cli)?;
    match &cli.command {
        Command::GenProfiles => commands::gen_profiles(&cfg, &hash),
        Command::Simulate => commands::simulate(&cfg, &hash),
        Command::MakeDataset => commands::make_dataset(&cfg, &hash),
        Command::Train => commands::train_cmd(&cfg, &hash),
        Command::Predict { mode } => {
            let mode = match mode {
                Mode::Series => PredictMode::Series,
                Mode::Rollout => PredictMode::Rollout,
            };
            commands::predict(&cfg, &hash, mode)
        }
        Command::Optimize => commands::optimize(&cfg, &hash),
        Command::Report => commands::report(&cfg, &hash),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
