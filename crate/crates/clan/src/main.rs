//! Command-line entry point: train, eval, viz, gradcheck.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use clan::config::{Precision, RunConfig};
use clan::error::ClanError;
use clan::gradsuite;
use clan::train::{run_eval, run_training};
use clan::viz::run_viz;

#[derive(Parser)]
#[command(name = "clan", about = "Cross-layer attention network trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic task described by the config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over branch subsets.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated branch names for a single subset, e.g. "G,A2".
        #[arg(long)]
        branches: Option<String>,
    },
    /// Export attention maps for one test sample as PPM images.
    Viz {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test-set sample index.
        #[arg(long)]
        sample: usize,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every op and the composed loss.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
}

fn exit_code_for(err: &ClanError) -> u8 {
    match err {
        ClanError::Numeric { .. } => 3,
        _ => 2,
    }
}

fn load_config(path: &PathBuf) -> Result<RunConfig, ClanError> {
    let mut cfg = RunConfig::from_file(path)?;
    if let Ok(env_precision) = std::env::var("CLAN_PRECISION") {
        cfg.precision = match env_precision.as_str() {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            other => {
                return Err(ClanError::config(
                    "cli",
                    format!("CLAN_PRECISION must be f32 or f64, got {other:?}"),
                ))
            }
        };
    }
    Ok(cfg)
}

fn cmd_train(config: PathBuf, out: Option<PathBuf>) -> Result<(), ClanError> {
    let mut cfg = load_config(&config)?;
    if let Some(dir) = out {
        cfg.output_dir = dir;
    }
    match cfg.precision {
        Precision::F32 => run_training::<f32>(&cfg, false).map(|_| ()),
        Precision::F64 => run_training::<f64>(&cfg, false).map(|_| ()),
    }
}

fn cmd_eval(
    config: PathBuf,
    checkpoint: PathBuf,
    branches: Option<String>,
) -> Result<(), ClanError> {
    let cfg = load_config(&config)?;
    match cfg.precision {
        Precision::F32 => run_eval::<f32>(&cfg, &checkpoint, branches.as_deref()).map(|_| ()),
        Precision::F64 => run_eval::<f64>(&cfg, &checkpoint, branches.as_deref()).map(|_| ()),
    }
}

fn cmd_viz(
    config: PathBuf,
    checkpoint: PathBuf,
    sample: usize,
    out: Option<PathBuf>,
) -> Result<(), ClanError> {
    let cfg = load_config(&config)?;
    let out_dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    let result = match cfg.precision {
        Precision::F32 => run_viz::<f32>(&cfg, &checkpoint, sample, &out_dir)?,
        Precision::F64 => run_viz::<f64>(&cfg, &checkpoint, sample, &out_dir)?,
    };
    println!("input={}", result.input.display());
    for (stage, map, overlay) in &result.stages {
        println!(
            "stage={stage} attention={} overlay={}",
            map.display(),
            overlay.display()
        );
    }
    Ok(())
}

/// Runs the suite and reports per-check lines; exits 1 on any failure.
fn cmd_gradcheck(config: PathBuf) -> Result<bool, ClanError> {
    let cfg = load_config(&config)?;
    if cfg.precision != Precision::F64 {
        return Err(ClanError::config(
            "gradcheck",
            "gradient checks require precision = f64",
        ));
    }
    let results = gradsuite::full_suite()?;
    let mut all_passed = true;
    for check in &results {
        let status = if check.passed() { "pass" } else { "fail" };
        println!(
            "check={} max_rel_err={:.3e} threshold={:.0e} status={status}",
            check.name, check.max_rel_err, check.threshold
        );
        all_passed &= check.passed();
    }
    if !all_passed {
        let failures: Vec<&str> = results
            .iter()
            .filter(|c| !c.passed())
            .map(|c| c.name.as_str())
            .collect();
        eprintln!("failed checks: {}", failures.join(", "));
    }
    Ok(all_passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train { config, out } => cmd_train(config, out).map(|_| true),
        Command::Eval {
            config,
            checkpoint,
            branches,
        } => cmd_eval(config, checkpoint, branches).map(|_| true),
        Command::Viz {
            config,
            checkpoint,
            sample,
            out,
        } => cmd_viz(config, checkpoint, sample, out).map(|_| true),
        Command::Gradcheck { config } => cmd_gradcheck(config),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
