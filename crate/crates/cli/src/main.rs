use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use tcv_core::harness::{run_suite, similarity_trajectory, token_sufficiency_series};
use tcv_core::{CheckId, SuiteConfig};

mod output;

use output::{Series, SuiteOutput};

#[derive(Parser)]
#[command(name = "tcv", version, about = "Verify temporal-consistency, DDIM-inversion and attention-alignment bounds")]
struct Cli {
    /// JSON suite configuration; missing fields take their defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base seed (overrides TCV_SEED and the config)
    #[arg(long, global = true, env = "TCV_SEED")]
    seed: Option<u64>,

    /// Directory for report and series files
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Output format [default: json for verify, csv for experiment]
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,

    /// Override every Monte-Carlo trial count
    #[arg(long, global = true)]
    trials: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Both,
}

impl Format {
    pub fn json(self) -> bool {
        matches!(self, Format::Json | Format::Both)
    }

    pub fn csv(self) -> bool {
        matches!(self, Format::Csv | Format::Both)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run verification checks
    Verify {
        #[command(subcommand)]
        target: Target,
    },
    /// Produce a CSV series
    Experiment {
        #[command(subcommand)]
        which: Experiment,
    },
}

#[derive(Subcommand, Clone, Copy)]
enum Target {
    /// Every enabled check
    All,
    SimGrad,
    Temporal,
    Convexity {
        /// Single frame count to check instead of the configured list
        #[arg(long)]
        frames: Option<usize>,
    },
    Descent,
    Bilateral,
    Ddim,
    Attention,
}

impl Target {
    fn name(self) -> &'static str {
        match self {
            Target::All => "all",
            Target::SimGrad => "sim-grad",
            Target::Temporal => "temporal",
            Target::Convexity { .. } => "convexity",
            Target::Descent => "descent",
            Target::Bilateral => "bilateral",
            Target::Ddim => "ddim",
            Target::Attention => "attention",
        }
    }

    fn checks(self) -> Option<Vec<CheckId>> {
        use CheckId::*;
        Some(match self {
            Target::All => return None,
            Target::SimGrad => vec![SimGradFd, SimGradBound],
            Target::Temporal => vec![TemporalGradFd, TemporalLipschitz],
            Target::Convexity { .. } => vec![Convexity],
            Target::Descent => vec![DescentMonotone],
            Target::Bilateral => vec![BilateralWeights, BilateralNonexpansive],
            Target::Ddim => vec![DdimStepOracle, DdimPerStepBound, DdimEndToEndBound],
            Target::Attention => vec![AttentionDecomposition, AttentionAlignment, TokenSufficiency],
        })
    }
}

#[derive(Subcommand, Clone, Copy)]
enum Experiment {
    /// Mean consecutive-frame similarity along a descent run
    SimilarityTrajectory,
    /// Alignment error along the token-sufficiency descent
    TokenSufficiency,
}

/// Configuration problems map to exit code 2.
struct ConfigError(anyhow::Error);

fn load_config(cli: &Cli) -> Result<SuiteConfig, ConfigError> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .map_err(ConfigError)?;
            SuiteConfig::from_json(&text)
                .with_context(|| format!("parsing config {}", path.display()))
                .map_err(ConfigError)?
        }
        None => SuiteConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(n) = cli.trials {
        config.trials.override_all(n);
    }
    match cli.command {
        Command::Verify { target } => {
            if let Some(checks) = target.checks() {
                config.checks = Some(checks);
            }
            if let Target::Convexity { frames: Some(t) } = target {
                config.convexity_frames = vec![t];
            }
        }
        Command::Experiment { .. } => {}
    }
    config.validate().map_err(|e| ConfigError(e.into()))?;
    Ok(config)
}

fn run(cli: &Cli, config: &SuiteConfig) -> Result<bool> {
    match cli.command {
        Command::Verify { target } => {
            let reports = run_suite(config)?;
            let name = format!("verify {}", target.name());
            let out = SuiteOutput::new(&name, &reports, config);
            out.emit(cli.format.unwrap_or(Format::Json), cli.out.as_deref())?;
            Ok(out.all_pass())
        }
        Command::Experiment { which } => {
            let series = match which {
                Experiment::SimilarityTrajectory => {
                    Series::new("similarity-trajectory", "mean_similarity", similarity_trajectory(config)?)
                }
                Experiment::TokenSufficiency => {
                    Series::new("token-sufficiency", "alignment_error", token_sufficiency_series(config)?)
                }
            };
            series.emit(cli.format.unwrap_or(Format::Csv), cli.out.as_deref(), config)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match load_config(&cli) {
        Ok(c) => c,
        Err(ConfigError(e)) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    match run(&cli, &config) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
