//! Command implementations behind the `cadm` binary.

use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::loader::{write_gray, write_mask};
use crate::data::{generate_synthetic, load_dataset, write_dataset, BitemporalPair, DatasetSpec};
use crate::error::{Error, Result};
use crate::heatmap::pixel_heatmaps;
use crate::metrics::{append_csv, score, Metrics, MetricsRow, Pooling};
use crate::predictor::{validate_scales, CadmModel};
use crate::rng::mix_seed;
use crate::sampler::{predict_pairs, score_maps, ChangeMap};
use crate::training::{Checkpoint, EpochLog, Trainer};

#[derive(Debug, Parser)]
#[command(name = "cadm", about = "Change-aware diffusion for bitemporal change detection")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the training, sampling and synthetic-data seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Reverse diffusion steps used for inference.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub ensemble: Option<usize>,
    /// Active difference scales, e.g. `2,3`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub scales: Option<Vec<u8>>,
    /// Disables the noise-suppression enhancer.
    #[arg(long, global = true)]
    pub no_nsse: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes the synthetic dataset in the on-disk layout.
    Synth,
    /// Trains a model, writing per-epoch checkpoints and a loss log.
    Train {
        /// Continues from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predicts change maps for a split and appends pooled metrics.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Scores the ground truth against itself.
        #[arg(long)]
        gt_bypass: bool,
        /// Averages per-image scores instead of pooling counts.
        #[arg(long)]
        per_tile: bool,
    },
    /// Trains and evaluates the four ablation variants.
    Ablate,
    /// Writes per-level heatmaps for one output pixel.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample name.
        #[arg(long)]
        pair: String,
        /// `y,x`.
        #[arg(long, value_delimiter = ',', num_args = 2)]
        pixel: Vec<usize>,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

/// Loads the configuration file and applies command-line overrides.
pub fn resolve_config(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
        cfg.sampler.seed = seed;
        cfg.data.synthetic.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output.dir = out.clone();
    }
    if let Some(steps) = args.steps {
        cfg.sampler.steps = steps;
    }
    if let Some(m) = args.ensemble {
        cfg.sampler.ensemble_size = m;
    }
    if let Some(s) = &args.scales {
        validate_scales(s)?;
        cfg.model.active_scales = s.clone();
    }
    if args.no_nsse {
        cfg.model.nsse_enabled = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<BitemporalPair>,
    pub val: Vec<BitemporalPair>,
    pub test: Vec<BitemporalPair>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<&[BitemporalPair]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::InvalidArgument(format!("unknown split {other}"))),
        }
    }
}

/// The configured dataset: the directory layout when a root is set, the
/// synthetic generator otherwise.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    match &cfg.data.root {
        Some(root) => {
            if !root.is_dir() {
                return Err(Error::Dataset(format!("dataset root {} does not exist", root.display())));
            }
            let layout = crate::data::scan_layout(root)?;
            let load = |s: &str| -> Result<Vec<BitemporalPair>> {
                if layout.splits.contains_key(s) {
                    load_dataset(&DatasetSpec {
                        root: root.clone(),
                        split: Some(s.into()),
                    })
                } else {
                    Ok(Vec::new())
                }
            };
            Ok(Splits {
                train: load("train")?,
                val: load("val")?,
                test: load("test")?,
            })
        }
        None => {
            let s = generate_synthetic(&cfg.data.synthetic)?;
            Ok(Splits {
                train: s.train,
                val: s.val,
                test: s.test,
            })
        }
    }
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let s = generate_synthetic(&cfg.data.synthetic)?;
    let dir = cfg.output.dir.join("data");
    write_dataset(&dir, &s.named())?;
    Ok(dir)
}

/// Model initialisation seed derived from the training seed.
pub fn model_seed(cfg: &RunConfig) -> u64 {
    mix_seed(cfg.train.seed, &[0x6d_6f64_656c])
}

pub fn new_model(cfg: &RunConfig) -> Result<CadmModel> {
    CadmModel::new(&cfg.model, cfg.schedule.steps, DType::F32, model_seed(cfg))
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<(Trainer, Vec<EpochLog>)> {
    let splits = load_splits(cfg)?;
    if splits.train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let mut trainer = match resume {
        Some(p) => Trainer::resume(&Checkpoint::load(p)?)?,
        None => Trainer::new(new_model(cfg)?, cfg.schedule, cfg.train.clone())?,
    };
    let logs = trainer.fit(&splits.train, &splits.val, Some(&cfg.output.dir))?;
    Ok((trainer, logs))
}

/// Latest `epoch_*.safetensors` under `<out>/checkpoints`.
pub fn latest_checkpoint(out: &Path) -> Result<PathBuf> {
    let dir = out.join("checkpoints");
    let mut found: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "safetensors"))
        .collect();
    found.sort();
    found
        .pop()
        .ok_or_else(|| Error::Checkpoint(format!("no checkpoints in {}", dir.display())))
}

/// Checks that a checkpoint's architecture agrees with the run configuration.
fn check_compatible(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<()> {
    let (a, b) = (&ckpt.predictor, &cfg.model);
    if a.image_channels != b.image_channels
        || a.base_channels != b.base_channels
        || a.num_levels != b.num_levels
        || a.image_size != b.image_size
    {
        return Err(Error::Checkpoint(format!(
            "checkpoint model ({} channels, base {}, {} levels, size {}) does not match config ({}, {}, {}, {})",
            a.image_channels, a.base_channels, a.num_levels, a.image_size, b.image_channels, b.base_channels, b.num_levels, b.image_size
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub metrics: Metrics,
    pub maps: Vec<ChangeMap>,
}

fn save_maps(dir: &Path, maps: &[ChangeMap]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for m in maps {
        write_gray(&dir.join(format!("{}_soft.png", m.name)), &m.soft, m.height, m.width)?;
        write_mask(&dir.join(format!("{}_binary.png", m.name)), &m.binary)?;
    }
    Ok(())
}

/// Change maps and pooled metrics of a trained model on `pairs`.
pub fn evaluate(model: &CadmModel, cfg: &RunConfig, pairs: &[BitemporalPair], pooling: Pooling) -> Result<EvalOutcome> {
    let schedule = cfg.schedule.build()?;
    let refs: Vec<&BitemporalPair> = pairs.iter().collect();
    let maps = predict_pairs(model, &schedule, &refs, &cfg.sampler, model.dtype())?;
    let metrics = score(&score_maps(&maps, &refs)?, pooling);
    Ok(EvalOutcome { metrics, maps })
}

pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    split: &str,
    gt_bypass: bool,
    pooling: Pooling,
) -> Result<EvalOutcome> {
    let splits = load_splits(cfg)?;
    let pairs = splits.get(split)?;
    if pairs.is_empty() {
        return Err(Error::Dataset(format!("split {split} is empty")));
    }
    let (outcome, tag) = if gt_bypass {
        let maps: Vec<ChangeMap> = pairs
            .iter()
            .map(|p| ChangeMap {
                name: p.name.clone(),
                height: p.label.height,
                width: p.label.width,
                soft: p.label.data.iter().map(|&v| f32::from(v)).collect(),
                binary: p.label.clone(),
            })
            .collect();
        let refs: Vec<&BitemporalPair> = pairs.iter().collect();
        let metrics = score(&score_maps(&maps, &refs)?, pooling);
        (EvalOutcome { metrics, maps }, "ground_truth".to_string())
    } else {
        let path = match checkpoint {
            Some(p) => p.to_path_buf(),
            None => latest_checkpoint(&cfg.output.dir)?,
        };
        let ckpt = Checkpoint::load(&path)?;
        check_compatible(&ckpt, cfg)?;
        let mut run = cfg.clone();
        run.schedule = ckpt.schedule;
        run.model = ckpt.predictor.clone();
        let model = ckpt.model()?;
        (evaluate(&model, &run, pairs, pooling)?, cfg.output.method_tag.clone())
    };
    save_maps(&cfg.output.dir.join("maps"), &outcome.maps)?;
    append_csv(
        &cfg.output.dir.join("metrics.csv"),
        &[MetricsRow::new(&cfg.data.name, split, &tag, &outcome.metrics)],
    )?;
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub scales: String,
    pub nsse: bool,
    pub oa: f64,
    pub f1: f64,
    pub iou: f64,
}

/// The four variants: scale 3 only, scales 2-3, all scales, and all scales
/// without the enhancer.
pub fn ablation_variants() -> Vec<(String, Vec<u8>, bool)> {
    vec![
        ("scale3".into(), vec![3], true),
        ("scale2_3".into(), vec![2, 3], true),
        ("scale1_2_3".into(), vec![1, 2, 3], true),
        ("scale1_2_3_no_nsse".into(), vec![1, 2, 3], false),
    ]
}

/// Trains and tests every variant on the same data with the same seeds.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let splits = load_splits(cfg)?;
    let mut rows = Vec::new();
    for (name, scales, nsse) in ablation_variants() {
        let mut run = cfg.clone();
        run.model.active_scales = scales.clone();
        run.model.nsse_enabled = nsse;
        run.validate()?;
        let mut trainer = Trainer::new(new_model(&run)?, run.schedule, run.train.clone())?;
        trainer.fit(&splits.train, &[], None)?;
        let m = evaluate(trainer.model(), &run, &splits.test, Pooling::Micro)?.metrics;
        log::info!("{name}: oa {:.4} f1 {:.4} iou {:.4}", m.oa, m.f1, m.iou);
        rows.push(AblationRow {
            variant: name,
            scales: scales.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("+"),
            nsse,
            oa: m.oa,
            f1: m.f1,
            iou: m.iou,
        });
    }
    let path = cfg.output.dir.join("ablation.csv");
    if path.exists() {
        std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
    }
    append_csv(&path, &rows)?;
    Ok(rows)
}

pub fn cmd_heatmap(cfg: &RunConfig, checkpoint: &Path, pair: &str, pixel: (usize, usize), split: &str) -> Result<Vec<PathBuf>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    check_compatible(&ckpt, cfg)?;
    let model = ckpt.model()?;
    let splits = load_splits(cfg)?;
    let p = splits
        .get(split)?
        .iter()
        .find(|p| p.name == pair)
        .ok_or_else(|| Error::Dataset(format!("no pair named {pair} in split {split}")))?;
    let mut sampler = cfg.sampler.clone();
    sampler.ensemble_size = 1;
    let maps = pixel_heatmaps(&model, &ckpt.schedule.build()?, p, pixel, &sampler, 1.0)?;
    let dir = cfg.output.dir.join("heatmaps");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut written = Vec::new();
    for (i, level) in maps.levels.iter().enumerate() {
        let (lh, lw) = maps.level_sizes[i];
        let path = dir.join(format!("{pair}_y{}_x{}_level{i}_{lh}x{lw}.png", pixel.0, pixel.1));
        write_gray(&path, level, maps.height, maps.width)?;
        written.push(path);
    }
    Ok(written)
}

/// Entry point of the binary.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::Synth => {
            let dir = cmd_synth(&cfg)?;
            println!("wrote synthetic dataset to {}", dir.display());
        }
        Command::Train { resume } => {
            let (_, logs) = cmd_train(&cfg, resume.as_deref())?;
            for l in logs {
                println!(
                    "epoch {:3}  loss {:.5}  val_f1 {}  lr {:.3e}",
                    l.epoch,
                    l.train_loss,
                    l.val_f1.map_or("-".into(), |f| format!("{f:.4}")),
                    l.lr
                );
            }
        }
        Command::Eval {
            checkpoint,
            split,
            gt_bypass,
            per_tile,
        } => {
            let pooling = if per_tile { Pooling::PerTile } else { Pooling::Micro };
            let out = cmd_eval(&cfg, checkpoint.as_deref(), &split, gt_bypass, pooling)?;
            let m = out.metrics;
            println!(
                "recall {:.4}  precision {:.4}  oa {:.4}  f1 {:.4}  iou {:.4}",
                m.recall, m.precision, m.oa, m.f1, m.iou
            );
        }
        Command::Ablate => {
            println!("{:<20} {:>8} {:>8} {:>8}", "variant", "OA", "F1", "IoU");
            for r in cmd_ablate(&cfg)? {
                println!("{:<20} {:>8.4} {:>8.4} {:>8.4}", r.variant, r.oa, r.f1, r.iou);
            }
        }
        Command::Heatmap {
            checkpoint,
            pair,
            pixel,
            split,
        } => {
            let (y, x) = (pixel[0], pixel[1]);
            for p in cmd_heatmap(&cfg, &checkpoint, &pair, (y, x), &split)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
