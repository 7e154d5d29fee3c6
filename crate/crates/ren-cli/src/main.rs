//! `ren` — train, evaluate, and analyze region-ensemble depth regressors.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or input error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// bad flags, config keys, or malformed input files -> exit 2
    Usage(String),
    /// failures after inputs were accepted -> exit 1
    Runtime(String),
}

#[derive(Parser)]
#[command(name = "ren", version, about = "Region-ensemble depth regression pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// trailing `--key value` overrides (win over the file)
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, loss CSV, and resolved config
    Train(ConfigArgs),
    /// Evaluate a checkpoint against a manifest
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// fingertip mean precision at 15mm
        #[arg(long)]
        mp: bool,
        /// mean average precision at 10cm
        #[arg(long)]
        map: bool,
        /// average nine crops offset by +-d mm on x and y
        #[arg(long, value_name = "D_MM")]
        multiview: Option<f64>,
        /// additional checkpoints averaged with the main one
        #[arg(long, value_name = "CKPT")]
        bag: Vec<PathBuf>,
        /// score ground truth against itself (metric plumbing check)
        #[arg(long)]
        oracle: bool,
    },
    /// Predict one pose from a depth file
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        /// manifest supplying intrinsics, crop extent, and thresholds
        #[arg(long)]
        manifest: PathBuf,
        /// world-mm crop center `x,y,z`, bypassing segmentation
        #[arg(long)]
        center: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a synthetic dataset
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// key = value hand spec file
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Print the receptive-field table for the configured regions
    Rf {
        #[arg(long)]
        config: Option<PathBuf>,
        /// custom layer stack, e.g. `conv:3:1:1,pool:2:2`
        #[arg(long)]
        stack: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Train and score the six incremental-strategy rungs
    Ablate(ConfigArgs),
}

fn parse_center(s: &str) -> Result<[f64; 3], CliError> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(CliError::Usage(format!("--center needs x,y,z, got '{s}'")));
    }
    let mut c = [0.0; 3];
    for (v, out) in parts.iter().zip(c.iter_mut()) {
        *out = v
            .trim()
            .parse::<f64>()
            .map_err(|e| CliError::Usage(format!("--center component '{v}': {e}")))?;
    }
    Ok(c)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => {
            let overrides = config::parse_overrides(&args.overrides)?;
            commands::cmd_train(args.config.as_deref(), &overrides)
        }
        Command::Eval { checkpoint, manifest, out, mp, map, multiview, bag, oracle } => {
            let flags = commands::EvalFlags { mp, map, multiview, bag, oracle };
            commands::cmd_eval(&checkpoint, &manifest, &out, &flags).map(|_| ())
        }
        Command::Predict { checkpoint, depth, manifest, center, out } => {
            let center = center.as_deref().map(parse_center).transpose()?;
            commands::cmd_predict(&checkpoint, &depth, &manifest, center, out.as_deref())
                .map(|_| ())
        }
        Command::GenData { out, count, seed, spec } => {
            if count == 0 {
                return Err(CliError::Usage("--count must be >= 1".into()));
            }
            commands::cmd_gen_data(spec.as_deref(), count, seed, &out)
        }
        Command::Rf { config, stack, out, overrides } => {
            let overrides = config::parse_overrides(&overrides)?;
            commands::cmd_rf(config.as_deref(), &overrides, stack.as_deref(), out.as_deref())
        }
        Command::Ablate(args) => {
            let overrides = config::parse_overrides(&args.overrides)?;
            commands::cmd_ablate(args.config.as_deref(), &overrides)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
