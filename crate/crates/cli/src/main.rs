use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use spfl_core::eval::render_overlay;
use spfl_core::image::{Image, Mask};
use spfl_core::model::Checkpoint;
use spfl_core::pipeline::*;
use spfl_core::srofb::{segment_episode, Episode, SegMode};
use spfl_core::{Error, Result};

#[derive(Parser)]
#[command(name = "spfl", version, about = "Few-shot segmentation: SPFL training and SROFB inference")]
struct Cli {
    /// JSON pipeline config; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; re-derives every stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory of all artifacts.
    #[arg(long, global = true, default_value = "runs/default")]
    out_dir: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    Single,
    Hierarchy,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Single => Variant::Single,
            VariantArg::Hierarchy => Variant::Hierarchy,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Matching,
    Srofb,
    SrofbSelf,
}

impl From<ModeArg> for SegMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Matching => SegMode::Matching,
            ModeArg::Srofb => SegMode::SrofbSupportOnly,
            ModeArg::SrofbSelf => SegMode::SrofbSelfRefined,
        }
    }
}

#[derive(Args, Default)]
struct TrainArgs {
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch_pairs: Option<usize>,
    #[arg(long)]
    batch_extra: Option<usize>,
}

#[derive(Args, Default)]
struct RefineArgs {
    #[arg(long)]
    tau_fg: Option<f32>,
    #[arg(long)]
    tau_bg: Option<f32>,
    /// Refinement steps, for every shot count.
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset.
    GenData,
    /// Train the baseline encoder on support-query pairs only.
    TrainBaseline {
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Over-segment the fold's training images.
    SegmentRegions {
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        scale_k: Option<f32>,
    },
    /// Cluster background-region descriptors into prototypes.
    BuildPrototypes {
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, value_enum, default_value = "hierarchy")]
        variant: VariantArg,
    },
    /// Assign pseudo labels to background pixels.
    PseudoLabel {
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, value_enum, default_value = "hierarchy")]
        variant: VariantArg,
    },
    /// Joint segmentation and pseudo-label training.
    TrainSpfl {
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, value_enum, default_value = "hierarchy")]
        variant: VariantArg,
        #[command(flatten)]
        train: TrainArgs,
        /// Per-level pseudo-loss weights, comma separated.
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f32>>,
        #[arg(long)]
        seg_weight: Option<f32>,
    },
    /// Evaluate one checkpoint on a fold's episodes.
    Eval {
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Defaults to the fold's hierarchical SPFL checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "srofb-self")]
        mode: ModeArg,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
        #[command(flatten)]
        refine: RefineArgs,
    },
    /// Segment the query of one episode described by a JSON file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episode: PathBuf,
        #[arg(long, value_enum, default_value = "srofb-self")]
        mode: ModeArg,
        #[command(flatten)]
        refine: RefineArgs,
        /// Write the query with the predicted mask blended in.
        #[arg(long)]
        overlay: Option<PathBuf>,
        /// Write the predicted mask as PGM.
        #[arg(long)]
        mask_out: Option<PathBuf>,
    },
    /// Evaluate every encoder and mode, the shot sweep and the threshold grid.
    Ablate,
    /// Every stage in order, ending with the ablation.
    RunAll,
}

/// One support of an episode file.
#[derive(Deserialize)]
struct SupportFile {
    image: PathBuf,
    mask: PathBuf,
}

#[derive(Deserialize)]
struct EpisodeFile {
    #[serde(default)]
    class_id: u32,
    supports: Vec<SupportFile>,
    query: PathBuf,
    #[serde(default)]
    query_mask: Option<PathBuf>,
}

#[derive(Serialize)]
struct InferSummary {
    mode_requested: SegMode,
    mode_used: SegMode,
    foreground_pixels: usize,
    harvested_positives: usize,
    harvested_negatives: usize,
    iou: Option<f64>,
}

fn relative(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_episode(path: &Path) -> Result<Episode> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: EpisodeFile = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut supports = Vec::new();
    let mut support_masks = Vec::new();
    for s in &file.supports {
        supports.push(Image::read_ppm(relative(base, &s.image))?);
        support_masks.push(Mask::read_pgm(relative(base, &s.mask))?);
    }
    Ok(Episode {
        class_id: file.class_id,
        supports,
        support_masks,
        query: Image::read_ppm(relative(base, &file.query))?,
        query_mask: file.query_mask.map(|m| Mask::read_pgm(relative(base, &m))).transpose()?,
    })
}

fn apply_train(cfg: &mut PipelineConfig, t: &TrainArgs) {
    if let Some(v) = t.iters {
        cfg.train.total_iterations = v;
    }
    if let Some(v) = t.lr {
        cfg.train.sgd.learning_rate = v;
    }
    if let Some(v) = t.batch_pairs {
        cfg.train.pairs_per_batch = v;
    }
    if let Some(v) = t.batch_extra {
        cfg.train.extra_images_per_batch = v;
    }
}

fn apply_refine(cfg: &mut PipelineConfig, r: &RefineArgs) {
    if let Some(v) = r.tau_fg {
        cfg.refine.tau_fg = v;
    }
    if let Some(v) = r.tau_bg {
        cfg.refine.tau_bg = v;
    }
    if let Some(v) = r.iters {
        cfg.refine.iterations_1shot = v;
        cfg.refine.iterations_kshot = v;
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_report<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::from_json_file(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    let layout = Layout::new(&cli.out_dir);
    match cli.command {
        Command::GenData => {
            cfg.dataset.validate()?;
            stage_gen_data(&cfg, &layout)?;
            eprintln!("dataset written to {}", layout.data().display());
        }
        Command::TrainBaseline { fold, train } => {
            apply_train(&mut cfg, &train);
            cfg.train.validate(false)?;
            let h = stage_train_baseline(&cfg, &layout, fold)?;
            if let Some(last) = h.last() {
                eprintln!("final loss {:.4} after {} iterations", last.total, h.len());
            }
        }
        Command::SegmentRegions { fold, scale_k } => {
            if let Some(k) = scale_k {
                cfg.segmentation.scale_k = k;
            }
            cfg.segmentation.validate()?;
            print_json(&stage_segment_regions(&cfg, &layout, fold)?)?;
        }
        Command::BuildPrototypes { fold, variant } => {
            cfg.clustering.validate()?;
            let h = stage_build_prototypes(&cfg, &layout, fold, variant.into())?;
            eprintln!("prototype levels {:?}", h.level_sizes());
        }
        Command::PseudoLabel { fold, variant } => {
            stage_pseudo_label(&layout, fold, variant.into())?;
        }
        Command::TrainSpfl {
            fold,
            variant,
            train,
            gammas,
            seg_weight,
        } => {
            apply_train(&mut cfg, &train);
            let variant: Variant = variant.into();
            let weights = match variant {
                Variant::Single => &mut cfg.single_level_weights,
                Variant::Hierarchy => &mut cfg.weights,
            };
            if let Some(g) = gammas {
                weights.gamma = g;
            }
            if let Some(w) = seg_weight {
                weights.seg_weight = w;
            }
            cfg.validate()?;
            let h = stage_train_spfl(&cfg, &layout, fold, variant)?;
            if let Some(last) = h.last() {
                eprintln!(
                    "final loss {:.4} (seg {:.4}, pseudo {:.4})",
                    last.total, last.seg, last.pseudo.iter().sum::<f64>()
                );
            }
        }
        Command::Eval {
            fold,
            checkpoint,
            mode,
            shots,
            episodes,
            refine,
        } => {
            apply_refine(&mut cfg, &refine);
            cfg.refine.validate()?;
            let mode: SegMode = mode.into();
            let ckpt = checkpoint.unwrap_or_else(|| layout.spfl(fold, Variant::Hierarchy));
            let shots = shots.unwrap_or(cfg.eval.shots);
            let episodes = episodes.unwrap_or(cfg.eval.episodes_per_fold);
            let report = stage_eval(&cfg, &layout, &ckpt, fold, mode, shots, episodes)?;
            let path = layout
                .reports()
                .join(format!("eval_fold{fold}_{}_{shots}shot.json", mode.name()));
            write_report(&path, &report)?;
            println!("fold {fold} {} {shots}-shot mIoU {:.2}", mode.name(), 100.0 * report.miou);
            for (c, r) in &report.per_class {
                println!("  class {c:>2}  IoU {:>6.2}  episodes {:>4}", 100.0 * r.iou, r.episodes);
            }
        }
        Command::Infer {
            checkpoint,
            episode,
            mode,
            refine,
            overlay,
            mask_out,
        } => {
            apply_refine(&mut cfg, &refine);
            let ep = load_episode(&episode)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mode: SegMode = mode.into();
            let out = segment_episode(&ep, &ckpt.encoder, &cfg.refine, mode)?;
            if let Some(p) = overlay {
                render_overlay(&ep.query, &out.mask, p)?;
            }
            if let Some(p) = mask_out {
                out.mask.write_pgm(p)?;
            }
            print_json(&InferSummary {
                mode_requested: mode,
                mode_used: out.used,
                foreground_pixels: out.mask.count(),
                harvested_positives: out.harvested_positives,
                harvested_negatives: out.harvested_negatives,
                iou: ep.query_mask.as_ref().and_then(|g| out.mask.iou(g)),
            })?;
        }
        Command::Ablate => {
            cfg.validate()?;
            print!("{}", stage_ablate(&cfg, &layout)?.to_text());
        }
        Command::RunAll => {
            let (report, times) = run_pipeline(&cfg, &layout)?;
            print!("{}", report.to_text());
            for (stage, secs) in &times.stages {
                eprintln!("{stage:<36} {secs:>8.1}s");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
