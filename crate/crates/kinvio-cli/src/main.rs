use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};

use kinvio::config::WeightingMode;
use kinvio::pipeline;

#[derive(Parser)]
#[command(
    name = "kinvio",
    about = "Visual-inertial odometry with online calibration of a velocity-control motion model: simulator, estimator, prediction and evaluation tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate {
        /// Config file (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// RNG seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the sliding-window estimator over a dataset.
    Estimate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Weighting mode: rbf | rbf-frozen | avg | raw.
        #[arg(long)]
        mode: Option<String>,
        /// Disable motion factors entirely (pure VIO + plane).
        #[arg(long)]
        no_motion: bool,
        /// Disable the plane constraint.
        #[arg(long)]
        no_plane: bool,
        /// Use the forward motion residual instead of the inverse one.
        #[arg(long)]
        forward_residual: bool,
        /// Output directory (trajectory + calibration files).
        #[arg(long)]
        out: PathBuf,
    },
    /// Forward-prediction error study from a calibration file.
    Predict {
        #[arg(long)]
        dataset: PathBuf,
        /// Calibration file from an estimate run.
        #[arg(long)]
        calib: PathBuf,
        /// Comma-separated horizon lengths in seconds.
        #[arg(long, default_value = "0.25,0.5,1.0,2.0")]
        horizons: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// ATE / RPE / velocity-RMSE evaluation of an estimate.
    Evaluate {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Observability rank and identifiability report.
    Obscheck {
        #[arg(long)]
        dataset: PathBuf,
        /// Calibration file; initial parameters are used when omitted.
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { config, out, seed } => {
            pipeline::cmd_simulate(config.as_deref(), &out, seed)?;
        }
        Command::Estimate {
            dataset,
            config,
            mode,
            no_motion,
            no_plane,
            forward_residual,
            out,
        } => {
            let mode = match mode {
                None => None,
                Some(ref s) => match WeightingMode::parse(s) {
                    Some(m) => Some(m),
                    None => bail!("unknown mode `{s}`; expected rbf | rbf-frozen | avg | raw"),
                },
            };
            pipeline::cmd_estimate(
                &dataset,
                config.as_deref(),
                pipeline::EstimateOverrides {
                    mode,
                    no_motion,
                    no_plane,
                    forward_residual,
                },
                &out,
            )?;
        }
        Command::Predict {
            dataset,
            calib,
            horizons,
            out,
        } => {
            let horizons: Vec<f64> = horizons
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| anyhow::anyhow!("bad horizon list: {e}"))?;
            pipeline::cmd_predict(&dataset, &calib, &horizons, &out)?;
        }
        Command::Evaluate {
            estimate,
            dataset,
            out,
        } => {
            pipeline::cmd_evaluate(&estimate, &dataset, &out)?;
        }
        Command::Obscheck {
            dataset,
            calib,
            config,
            out,
        } => {
            pipeline::cmd_obscheck(&dataset, calib.as_deref(), config.as_deref(), &out)?;
        }
    }
    Ok(())
}
