use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use stdmmf::metrics::MeanFMode;
use stdmmf::pipeline::checkpoint::Checkpoint;
use stdmmf::pipeline::dataset::{load_dataset, Split};
use stdmmf::pipeline::evaluate::evaluate;
use stdmmf::pipeline::infer::{export_overlay, infer, model_from_checkpoint};
use stdmmf::pipeline::train::run_train;
use stdmmf::pipeline::{configure_threads, TrainConfig};

#[derive(Parser)]
#[command(name = "stdmmf", version, about = "Video salient object detection from RGB frames and optical flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint after every epoch.
    Train(TrainArgs),
    /// Write 8-bit saliency maps for every frame that has a flow image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write red overlays under <out>/overlay.
        #[arg(long)]
        overlay: bool,
    },
    /// Score predicted maps against ground-truth masks.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Write the report as `key = value` lines.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Report mean-F as the mean of per-frame adaptive-threshold scores.
        #[arg(long)]
        adaptive_mean_f: bool,
    },
    /// Blend existing saliency maps onto their frames.
    ExportOverlay {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` configuration file; missing keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Single worker thread, for bit-reproducible runs.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    disable_temporal: bool,
    #[arg(long)]
    disable_ila: bool,
    #[arg(long)]
    disable_ilw: bool,
    #[arg(long)]
    disable_bma: bool,
}

fn train_cmd(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let ab = &mut cfg.ablation;
    ab.disable_temporal |= a.disable_temporal;
    ab.disable_ila |= a.disable_ila;
    ab.disable_ilw |= a.disable_ilw;
    ab.disable_bma |= a.disable_bma;
    cfg.validate()?;
    let t = run_train(cfg, &a.data, &a.out, a.deterministic)?;
    if let Some(last) = t.history.last() {
        println!("trained {} epoch(s), {} step(s), final loss {:.6}", t.epoch, t.step, last.total);
    }
    Ok(ExitCode::SUCCESS)
}

fn infer_cmd(checkpoint: &Path, data: &Path, out: &Path, overlay: bool) -> Result<ExitCode> {
    configure_threads(false)?;
    let ck = Checkpoint::load(checkpoint)?;
    let (cfg, mut model) = model_from_checkpoint(&ck)?;
    let samples = load_dataset(data, Split::Test, cfg.input_size).with_context(|| format!("loading {}", data.display()))?;
    let written = infer(&mut model, &samples, cfg.clip_len, out, overlay)?;
    println!("wrote {} saliency map(s) to {}", written.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd(pred: &Path, gt: &Path, report: Option<&Path>, adaptive: bool) -> Result<ExitCode> {
    configure_threads(false)?;
    let mode = if adaptive { MeanFMode::Adaptive } else { MeanFMode::Curve };
    let e = evaluate(pred, gt, mode)?;
    print!("{}", e.aggregate.report.to_table());
    println!("{} frame(s), {} with an empty mask", e.aggregate.frames, e.aggregate.empty_gt_frames);
    if let Some(path) = report {
        std::fs::write(path, e.aggregate.report.to_document()).with_context(|| format!("writing {}", path.display()))?;
    }
    if e.complete() {
        return Ok(ExitCode::SUCCESS);
    }
    for k in &e.unmatched_pred {
        eprintln!("prediction without mask: {k}");
    }
    for k in &e.unmatched_gt {
        eprintln!("mask without prediction: {k}");
    }
    Ok(ExitCode::from(2))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(a) => train_cmd(a),
        Command::Infer { checkpoint, data, out, overlay } => infer_cmd(&checkpoint, &data, &out, overlay),
        Command::Eval { pred, gt, report, adaptive_mean_f } => eval_cmd(&pred, &gt, report.as_deref(), adaptive_mean_f),
        Command::ExportOverlay { pred, frames, out } => {
            let n = export_overlay(&pred, &frames, &out)?;
            println!("wrote {n} overlay(s) to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
