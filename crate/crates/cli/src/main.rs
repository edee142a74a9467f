use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use graphdet_cli as cli;

#[derive(Parser)]
#[command(
    name = "graphdet",
    about = "Relational reasoning detector on synthetic scenes"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint + metric log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Evaluate a checkpoint on a split and emit an AP report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// ΔAP between two AP report files, with regression plot data.
    Report {
        base: PathBuf,
        new: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump attention weights and edge attributes for one RoI.
    InspectAttention {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: u64,
        #[arg(long)]
        roi: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Finite-difference verification of all recorded gradients.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Export scenes as PNG images with annotation sidecars.
    SynthExport {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<u64>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
}

fn run() -> anyhow::Result<bool> {
    match Args::parse().command {
        Command::Train {
            config,
            out,
            seed_override,
        } => {
            let cfg = cli::load_config(&config, seed_override)?;
            cli::cmd_train(&cfg, &out)?;
        }
        Command::Eval {
            config,
            checkpoint,
            split,
            out,
            seed_override,
        } => {
            let cfg = cli::load_config(&config, seed_override)?;
            cli::cmd_eval(&cfg, &checkpoint, cli::parse_split(&split)?, out.as_deref())?;
        }
        Command::Report { base, new, out } => {
            cli::cmd_report(&base, &new, out.as_deref())?;
        }
        Command::InspectAttention {
            config,
            checkpoint,
            scene,
            roi,
            out,
            seed_override,
        } => {
            let cfg = cli::load_config(&config, seed_override)?;
            cli::cmd_inspect_attention(&cfg, &checkpoint, scene, roi, out.as_deref())?;
        }
        Command::Gradcheck { config } => {
            let cfg = config.map(|p| cli::load_config(&p, None)).transpose()?;
            if !cli::cmd_gradcheck(cfg.as_ref())? {
                return Ok(false);
            }
        }
        Command::SynthExport {
            config,
            out,
            count,
            seed_override,
        } => {
            let cfg = cli::load_config(&config, seed_override)?;
            let n = cli::cmd_synth_export(&cfg, &out, count)?;
            println!("exported {n} scenes to {}", out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
