//! `balsam` command-line interface.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use balsam::config::{
    load_config, CurvesConfig, FitConfig, Preset, SimulateConfig, StudyConfig,
};
use balsam::Error;

#[derive(Parser)]
#[command(
    name = "balsam",
    about = "Joint longitudinal-survival modeling with arc-length (cumulative variation) hazard effects",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a joint dataset into --out (longitudinal.csv, survival.csv,
    /// truth.json).
    Simulate {
        /// Simulation design JSON; optional when --preset supplies one.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the design seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Named protocol: model1-sim or model2-sim.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Fit a model to longitudinal.csv + survival.csv by MCMC.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        longitudinal: PathBuf,
        #[arg(long)]
        survival: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the sampler seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Named sampler protocol: model1-sim, model2-sim, or table2.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 2)]
        threads: usize,
    },
    /// Coverage study: repeated simulate -> fit -> score.
    Study {
        /// Study JSON; optional when --preset supplies design and sampler
        /// (10 replicates).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 2)]
        threads: usize,
    },
    /// Emit fitted population curves and per-subject risk flags from a
    /// completed fit directory.
    Curves {
        #[arg(long)]
        config: PathBuf,
        /// Directory produced by `balsam fit`.
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate {
            config,
            out,
            seed,
            preset,
        } => {
            let mut cfg: SimulateConfig = match (&config, &preset) {
                (Some(path), _) => load_config(path)?,
                (None, Some(name)) => SimulateConfig {
                    design: Preset::from_name(name)?.design()?,
                },
                (None, None) => {
                    return Err(Error::Config(
                        "simulate needs --config or --preset".into(),
                    ))
                }
            };
            if let Some(seed) = seed {
                cfg.design.seed = seed;
            }
            let generated = balsam::cli::cmd_simulate(&cfg, &out)?;
            eprintln!(
                "simulated {} subjects ({} events, {} inversion failures) into {}",
                generated.records.len(),
                generated.records.iter().filter(|r| r.delta == 1).count(),
                generated.inversion_failures,
                out.display()
            );
            Ok(())
        }
        Command::Fit {
            config,
            longitudinal,
            survival,
            out,
            seed,
            preset,
            threads,
        } => {
            let mut cfg: FitConfig = load_config(&config)?;
            if let Some(name) = preset {
                cfg.sampler = Preset::from_name(&name)?.sampler();
            }
            if let Some(seed) = seed {
                cfg.sampler.seed = seed;
            }
            let (rows, samples) =
                balsam::cli::cmd_fit(&cfg, &longitudinal, &survival, &out, threads)?;
            eprintln!(
                "fit complete: {} chains x {} retained draws -> {}",
                samples.n_chains(),
                samples.retained_per_chain(),
                out.display()
            );
            for row in rows {
                if let Some(rhat) = row.rhat {
                    if rhat > 1.05 {
                        eprintln!("warning: {} has Rhat {rhat:.3}", row.name);
                    }
                }
            }
            Ok(())
        }
        Command::Study {
            config,
            out,
            seed,
            preset,
            threads,
        } => {
            let mut cfg: StudyConfig = match (&config, &preset) {
                (Some(path), _) => load_config(path)?,
                (None, Some(name)) => {
                    let preset = Preset::from_name(name)?;
                    StudyConfig {
                        replicates: 10,
                        design: preset.design()?,
                        sampler: preset.sampler(),
                        max_failure_fraction: 0.2,
                    }
                }
                (None, None) => {
                    return Err(Error::Config("study needs --config or --preset".into()))
                }
            };
            if let Some(seed) = seed {
                cfg.design.seed = seed;
            }
            let output = balsam::cli::cmd_study(&cfg, &out, threads)?;
            eprintln!(
                "study complete: {} of {} replicates succeeded ({} failed)",
                output.replicates_succeeded,
                output.replicates_requested,
                output.replicates_failed
            );
            for p in &output.coverage.parameters {
                eprintln!("  {:<14} coverage {:.3}", p.name, p.rate);
            }
            Ok(())
        }
        Command::Curves { config, fit, out } => {
            let cfg: CurvesConfig = load_config(&config)?;
            let flags = balsam::cli::cmd_curves(&cfg, &fit, &out)?;
            let flagged: Vec<&str> = flags
                .iter()
                .filter(|f| f.flagged)
                .map(|f| f.id.as_str())
                .collect();
            eprintln!(
                "curves written to {}; {} subjects flagged{}",
                out.display(),
                flagged.len(),
                if flagged.is_empty() {
                    String::new()
                } else {
                    format!(" ({})", flagged.join(", "))
                }
            );
            Ok(())
        }
    }
}

/// Exit codes: 0 success, 2 configuration/data error, 3 numerical or
/// convergence failure.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::ConfigParse { .. }
        | Error::Input(_)
        | Error::Domain { .. }
        | Error::NotPositiveDefinite(_)
        | Error::Io(_)
        | Error::Csv(_) => 2,
        Error::Numerical(_)
        | Error::Init(_)
        | Error::Study(_)
        | Error::DatasetRejected { .. } => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
