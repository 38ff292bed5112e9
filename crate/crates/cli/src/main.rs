use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use fedmismatch_cli::config::{ConfigError, ExperimentConfig};
use fedmismatch_cli::presets::{self, PRESETS};
use fedmismatch_cli::{run_to_dir, RunOptions};

#[derive(Parser)]
#[command(name = "fedmismatch", version, about = "Simulate federated linear prediction under covariate mismatch")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its CSV.
    Run {
        /// Config file, or `preset:<name>` for a shipped preset.
        config: String,
        /// Output directory.
        #[arg(long, env = "FEDMISMATCH_OUT_DIR", default_value = "results")]
        out: PathBuf,
        /// Override `seeds.root`.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (defaults to all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Check a config file and list every violated constraint.
    Validate { config: String },
    /// Shipped scenario presets.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    /// List preset names.
    List,
    /// Print a preset's TOML.
    Show { name: String },
}

fn load(spec: &str) -> Result<ExperimentConfig, ConfigError> {
    match spec.strip_prefix("preset:") {
        Some(name) => match presets::find(name) {
            Some(p) => p.config(),
            None => Err(ConfigError::Parse {
                path: PathBuf::from(spec),
                message: format!("unknown preset '{name}'"),
            }),
        },
        None => ExperimentConfig::load(&PathBuf::from(spec)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            threads,
        } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            match run_to_dir(&cfg, &out, &RunOptions { seed, threads }) {
                Ok(path) => {
                    println!("{}", path.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    let code = e.exit_code() as u8;
                    eprintln!("error: {:#}", anyhow::Error::new(e).context(format!("running {config}")));
                    ExitCode::from(code)
                }
            }
        }
        Command::Validate { config } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            let report = cfg.validate();
            if report.is_ok() {
                println!("{config}: ok");
                ExitCode::SUCCESS
            } else {
                eprint!("{report}");
                ExitCode::from(1)
            }
        }
        Command::Presets { action } => match presets_cmd(action) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}

fn presets_cmd(action: PresetAction) -> anyhow::Result<()> {
    match action {
        PresetAction::List => {
            for p in &PRESETS {
                println!("{:<28} {}", p.name, p.description());
            }
        }
        PresetAction::Show { name } => {
            let p = presets::find(&name).with_context(|| format!("unknown preset '{name}'"))?;
            print!("{}", p.source);
        }
    }
    Ok(())
}
