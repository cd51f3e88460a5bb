use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use sliceseg::data::synth::{generate_dataset, SynthConfig};
use sliceseg::eval::{evaluate, infer, write_report};
use sliceseg::gradcheck::{grad_check, DEFAULT_SEED};
use sliceseg::train::{train, TrainConfig};

#[derive(Parser)]
#[command(name = "sliceseg", version, about = "Sequential slice segmentation with distance-aware memory attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sequential-slice dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        sequences: usize,
        #[arg(long, default_value_t = 6)]
        slices: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        corrupt_prob: f64,
    },
    /// Train a model and write a checkpoint plus a loss trace.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON training config; omitted fields take their defaults.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a dataset and write a JSON report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Segment one sequence directory, writing u8 masks.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare backward gradients with finite differences on a micro model.
    GradCheck {
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData {
            out,
            sequences,
            slices,
            seed,
            corrupt_prob,
        } => {
            let cfg = SynthConfig {
                num_sequences: sequences,
                slices_per_sequence: slices,
                seed,
                corrupt_prob,
                ..SynthConfig::default()
            };
            let s = generate_dataset(&cfg, &out)?;
            println!(
                "{}",
                json!({"sequences": s.sequences, "slices": s.slices, "corrupted": s.corrupted, "out": out})
            );
        }
        Command::Train {
            data,
            config,
            out,
            steps,
            seed,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(n) = steps {
                cfg.steps = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let a = train(&cfg, &data, &out)?;
            println!(
                "{}",
                json!({"checkpoint": a.checkpoint, "trace": a.trace, "intermediate": a.intermediate, "steps": cfg.steps})
            );
        }
        Command::Eval { data, ckpt, report } => {
            let r = evaluate(&data, &ckpt)?;
            write_report(&report, &r)?;
            println!(
                "{}",
                json!({"mean": r.mean, "sd": r.sd, "corrupted_mean": r.corrupted_mean, "slices": r.counts.slices})
            );
        }
        Command::Infer { ckpt, sequence, out } => {
            let written = infer(&ckpt, &sequence, &out)?;
            println!("{}", json!({"written": written}));
        }
        Command::GradCheck { seed } => {
            let report = grad_check(seed)?;
            println!("{}", serde_json::to_string(&report)?);
            return Ok(report.pass);
        }
    }
    Ok(true)
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    err.chain()
        .find_map(|e| e.downcast_ref::<sliceseg::Error>().map(|e| e.kind()))
        .or_else(|| err.chain().find_map(|e| e.downcast_ref::<serde_json::Error>().map(|_| "config")))
        .or_else(|| err.chain().find_map(|e| e.downcast_ref::<std::io::Error>().map(|_| "io")))
        .unwrap_or("error")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let msg = format!("{e:#}");
            eprintln!("{}", json!({"error": error_kind(&e), "message": msg}));
            ExitCode::from(2)
        }
    }
}
