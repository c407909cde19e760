//! `attnrobust`: config-driven experiment harness for attention models
//! trained with adversarial and virtual adversarial regularization.
//!
//! Exit codes are a stable contract: 0 success, 2 validation failure,
//! 3 training divergence, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod compare;
mod config;
mod gen;
mod report;
mod run;
mod sweep;

/// Error with an exit code per the CLI contract.
#[derive(Debug)]
pub struct CliError {
    message: String,
    code: u8,
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError {
            message: msg.into(),
            code: 2,
        }
    }

    pub fn divergence(msg: impl Into<String>) -> Self {
        CliError {
            message: msg.into(),
            code: 3,
        }
    }

    pub fn other(msg: impl Into<String>) -> Self {
        CliError {
            message: msg.into(),
            code: 1,
        }
    }

    pub fn exit_code(&self) -> u8 {
        self.code
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<attnrobust_core::Error> for CliError {
    fn from(e: attnrobust_core::Error) -> Self {
        use attnrobust_core::Error as E;
        match e {
            E::Diverged { .. } => CliError::divergence(e.to_string()),
            E::InvalidArgument(_) | E::Parse { .. } | E::UnknownLabel(_) => {
                CliError::validation(e.to_string())
            }
            other => CliError::other(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "attnrobust", version, about = "attention robustness experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train per seed, evaluate accuracy and attention/gradient agreement,
    /// and write summary.json into the output directory.
    Run {
        config: PathBuf,
        /// Config overrides of the form key.path=value.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Cross an epsilon grid with the seed battery and report per-epsilon
    /// aggregates plus the robustness scalar.
    Sweep {
        config: PathBuf,
        /// Comma-separated epsilon grid, e.g. 0.5,1,2,4.
        #[arg(long)]
        grid: Option<String>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Side-by-side comparison of completed run directories over the same
    /// corpus and seed battery.
    Compare {
        /// Run directories containing summary.json.
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
        /// Where compare.json and compare.html are written.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Re-render heatmaps.html from the reports.jsonl files in a run
    /// directory.
    Report { dir: PathBuf },
    /// Generate a deterministic synthetic sentiment corpus.
    GenCorpus {
        dir: PathBuf,
        #[arg(long, default_value_t = 800)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        valid: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        unlabeled: usize,
        /// Draw the unlabeled pool from an out-of-domain topic generator.
        #[arg(long)]
        ood_unlabeled: bool,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, overrides } => {
            let cfg = config::ExperimentConfig::load(&config, &overrides)?;
            let summary_path = run::execute(&cfg)?;
            println!("{}", summary_path.display());
            Ok(())
        }
        Command::Sweep {
            config,
            grid,
            overrides,
        } => {
            let cfg = config::ExperimentConfig::load(&config, &overrides)?;
            let grid = match grid {
                Some(text) => sweep::parse_grid(&text)?,
                None => cfg.epsilon_grid.clone(),
            };
            let sweep_path = sweep::execute(&cfg, &grid)?;
            println!("{}", sweep_path.display());
            Ok(())
        }
        Command::Compare { dirs, out } => {
            let path = compare::execute(&dirs, &out)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Report { dir } => {
            let rendered = report::execute(&dir)?;
            for path in rendered {
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::GenCorpus {
            dir,
            train,
            valid,
            test,
            unlabeled,
            ood_unlabeled,
            seed,
        } => {
            gen::execute(&dir, train, valid, test, unlabeled, ood_unlabeled, seed)?;
            println!("{}", dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
