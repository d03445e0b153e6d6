//! The `phytrack` commands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{RunConfig, RESOLVED_NAME};
use crate::data_synth::{corrupt_frames, synth_sequence, NoiseSpec};
use crate::dataset::{find_sequences, image_to_tensor, read_sequence, write_sequence, SequenceDir};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_counts, EvalCounts, EvalReport, IOU_THRESHOLD};
use crate::model::Model;
use crate::mot::{read_mot, write_mot, MotRow};
use crate::nn::checkpoint;
use crate::render::render_sequence;
use crate::tracker::track_frames;
use crate::train::{train, EpochLoss, TrainOutputs, TrainSequence};

pub const MANIFEST_NAME: &str = "manifest.txt";
const FRAMERATE: u32 = 25;
const TRAIN_SPLIT: u64 = 1;
const TEST_SPLIT: u64 = 2;

#[derive(Debug, Parser)]
#[command(name = "phytrack", version, about = "Online multi-object tracking for flowing plankton video")]
pub struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset in the MOTChallenge layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Replace the dataset in a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model on every sequence under DATA (or DATA/train).
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and the loss log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Track one sequence and write MOT results.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write one overlay image per frame here.
        #[arg(long)]
        render: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Report file; the report is always printed.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Config from `--config` (or `fallback` if present), with `--seed` applied.
pub fn resolve_config(path: Option<&Path>, fallback: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let cfg = match (path, fallback) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(f)) if f.is_file() => {
            log::info!("using config {}", f.display());
            RunConfig::load(f)?
        }
        _ => RunConfig::default().finish()?,
    };
    match seed {
        Some(s) => cfg.with_seed(s),
        None => Ok(cfg),
    }
}

/// Test-split variants: tiers first, then single-corruption sets.
fn test_variants(cfg: &RunConfig) -> Vec<(String, Vec<NoiseSpec>)> {
    let mut out: Vec<(String, Vec<NoiseSpec>)> = cfg.tiers.iter().map(|t| (t.to_string(), t.noise())).collect();
    for n in &cfg.noise {
        let name = format!("{}-{}", n.name(), n.level);
        if !out.iter().any(|(v, _)| *v == name) {
            out.push((name, vec![*n]));
        }
    }
    out
}

fn is_nonempty_dir(p: &Path) -> Result<bool> {
    Ok(p.is_dir() && fs::read_dir(p)?.next().is_some())
}

/// Writes the synthetic dataset and returns its manifest text.
pub fn cmd_synth(cfg: &RunConfig, out: &Path, force: bool) -> Result<String> {
    if out.exists() && !out.is_dir() {
        return Err(Error::Usage(format!("{} exists and is not a directory", out.display())));
    }
    if is_nonempty_dir(out)? {
        if !force {
            return Err(Error::Usage(format!("{} is not empty; pass --force to replace it", out.display())));
        }
        for sub in ["train", "test"] {
            if out.join(sub).is_dir() {
                fs::remove_dir_all(out.join(sub))?;
            }
        }
    }
    fs::create_dir_all(out)?;
    let mut manifest = String::from("split\tvariant\tsequence\tframes\tboxes\tnoise\n");
    for i in 0..cfg.train_sequences {
        let seq = synth_sequence(&cfg.sequence_for(TRAIN_SPLIT, i))?;
        let name = format!("seq-{:02}", i + 1);
        write_sequence(&out.join("train").join(&name), &seq.frames, &seq.gt, FRAMERATE)?;
        writeln!(manifest, "train\tclean\t{name}\t{}\t{}\tnone", seq.frames.len(), seq.gt.len()).unwrap();
    }
    let variants = test_variants(cfg);
    for i in 0..cfg.test_sequences {
        let seq_cfg = cfg.sequence_for(TEST_SPLIT, i);
        let seq = synth_sequence(&seq_cfg)?;
        let name = format!("seq-{:02}", i + 1);
        for (variant, specs) in &variants {
            let frames = corrupt_frames(&seq.frames, specs, seq_cfg.seed ^ 0x5eed)?;
            write_sequence(&out.join("test").join(variant).join(&name), &frames, &seq.gt, FRAMERATE)?;
            let noise = if specs.is_empty() { "none".to_string() } else { specs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",") };
            writeln!(manifest, "test\t{variant}\t{name}\t{}\t{}\t{noise}", frames.len(), seq.gt.len()).unwrap();
        }
    }
    fs::write(out.join(MANIFEST_NAME), &manifest)?;
    cfg.write_resolved(out)?;
    Ok(manifest)
}

/// Loads every sequence with ground truth under `data/train`, or `data`.
pub fn load_training_data(data: &Path) -> Result<Vec<TrainSequence<f32>>> {
    let root = if data.join("train").is_dir() { data.join("train") } else { data.to_path_buf() };
    let mut out = Vec::new();
    for dir in find_sequences(&root)? {
        let seq = read_sequence(&dir)?;
        let Some(gt) = &seq.gt else {
            log::warn!("{}: no gt/gt.txt, skipped", dir.display());
            continue;
        };
        out.push(TrainSequence::new(seq.frames.iter().map(image_to_tensor).collect(), gt)?);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no training sequences with ground truth", root.display())));
    }
    Ok(out)
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Vec<EpochLoss>> {
    let sequences = load_training_data(data)?;
    let mut model = Model::<f32>::new(cfg.model.clone())?;
    cfg.write_resolved(out)?;
    log::info!("training on {} sequences, {} parameters", sequences.len(), model.store.num_scalars());
    train(&mut model, &cfg.train, &sequences, &TrainOutputs::in_dir(out))
}

/// Builds the configured model and loads `checkpoint` into it.
pub fn load_model(cfg: &RunConfig, checkpoint_path: &Path) -> Result<Model<f32>> {
    let mut model = Model::<f32>::new(cfg.model.clone())?;
    checkpoint::load_into(&mut model.store, checkpoint_path)?;
    Ok(model)
}

pub fn track_sequence(model: &Model<f32>, cfg: &RunConfig, seq: &SequenceDir) -> Result<Vec<MotRow>> {
    let frames: Vec<_> = seq.frames.iter().map(image_to_tensor::<f32>).collect();
    track_frames(model, &cfg.tracker, &frames)
}

pub fn cmd_track(cfg: &RunConfig, checkpoint_path: &Path, seq_dir: &Path, out: &Path, render: Option<&Path>) -> Result<Vec<MotRow>> {
    let seq = read_sequence(seq_dir)?;
    let model = load_model(cfg, checkpoint_path)?;
    let rows = track_sequence(&model, cfg, &seq)?;
    write_mot(&rows, out)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        cfg.write_resolved(dir)?;
    }
    if let Some(dir) = render {
        render_sequence(&seq.frames, &rows, dir)?;
    }
    Ok(rows)
}

pub fn cmd_eval(gt: &Path, pred: &Path, out: Option<&Path>) -> Result<EvalReport> {
    let gt_rows = read_mot(gt)?;
    let pred_rows = read_mot(pred)?;
    let counts: EvalCounts = evaluate_counts(&gt_rows, &pred_rows, IOU_THRESHOLD);
    let report = counts.report()?;
    if let Some(p) = out {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(p, report.to_text())?;
    }
    Ok(report)
}

pub fn run(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    match &cli.command {
        Command::Synth { out, force } => {
            let cfg = resolve_config(config, None, cli.seed)?;
            print!("{}", cmd_synth(&cfg, out, *force)?);
        }
        Command::Train { data, out } => {
            let cfg = resolve_config(config, None, cli.seed)?;
            let history = cmd_train(&cfg, data, out)?;
            if let (Some(first), Some(last)) = (history.first(), history.last()) {
                println!("trained {} epochs: total loss {:.4} -> {:.4}", history.len(), first.total, last.total);
            }
        }
        Command::Track { checkpoint, seq, out, render } => {
            let beside = checkpoint.parent().map(|d| d.join(RESOLVED_NAME));
            let cfg = resolve_config(config, beside.as_deref(), cli.seed)?;
            let rows = cmd_track(&cfg, checkpoint, seq, out, render.as_deref())?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::Eval { gt, pred, out } => {
            print!("{}", cmd_eval(gt, pred, out.as_deref())?.to_text());
        }
    }
    Ok(())
}
