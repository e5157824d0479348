//! End-to-end stages: data generation, baseline training, region
//! segmentation, prototype clustering, pseudo labeling, joint training and
//! the ablation study. Every stage reads its inputs from and writes its
//! outputs to a shared output directory.
//!
//! ```text
//! data/                              synthetic dataset
//! fold{f}/baseline/                  pretrained encoder checkpoint
//! fold{f}/regions/{id:05}.pgm        region maps (+ .ftns sidecar)
//! fold{f}/prototypes/{variant}/      prototype hierarchy
//! fold{f}/pseudo/{variant}/          pseudo label maps
//! fold{f}/spfl_{variant}/            jointly trained encoder
//! reports/ablation.{json,txt}
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_synthetic_dataset, Dataset, EpisodeRef, LabelMap, SyntheticDatasetConfig};
use crate::error::{Error, Result};
use crate::eval::{compute_miou, EvalReport};
use crate::image::{Image, Mask};
use crate::model::{config_hash, Checkpoint, EncoderModel};
use crate::optim::SgdConfig;
use crate::prototypes::{build_hierarchy, extract_region_descriptors, ClusterConfig, PrototypeHierarchy, RegionCorpus};
use crate::pseudo_label::{assign_pseudo_labels, load_pseudo_labels, save_pseudo_labels};
use crate::region::{restrict_to_background, segment_regions, RegionMap, SegConfig};
use crate::seeds;
use crate::spfl::{train_baseline, train_spfl, LossRecord, LossWeights, TrainConfig, TrainImage};
use crate::srofb::{segment_features, RefineConfig, SegMode};
use crate::tensor::FeatureMap;

/// Prototype hierarchy depth used by a joint-training variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Finest level only.
    Single,
    Hierarchy,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::Single, Variant::Hierarchy];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Single => "single",
            Variant::Hierarchy => "hierarchy",
        }
    }

    pub fn arm(self) -> &'static str {
        match self {
            Variant::Single => "spfl_single_level",
            Variant::Hierarchy => "spfl_hierarchy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes_per_fold: usize,
    pub shots: usize,
    pub shot_sweep: Vec<usize>,
    pub shot_sweep_episodes_per_fold: usize,
    pub tau_fg_grid: Vec<f32>,
    pub tau_bg_grid: Vec<f32>,
    pub tau_grid_episodes_per_fold: usize,
    /// Folds to evaluate; empty means all.
    pub folds: Vec<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes_per_fold: 100,
            shots: 1,
            shot_sweep: vec![1, 2, 5, 10],
            shot_sweep_episodes_per_fold: 25,
            tau_fg_grid: vec![0.5, 0.7, 0.9],
            tau_bg_grid: vec![0.4, 0.6, 0.8],
            tau_grid_episodes_per_fold: 25,
            folds: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub dataset: SyntheticDatasetConfig,
    pub segmentation: SegConfig,
    pub clustering: ClusterConfig,
    /// Shared by the baseline and the joint-training runs.
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub single_level_weights: LossWeights,
    pub refine: RefineConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            dataset: SyntheticDatasetConfig::default(),
            segmentation: SegConfig::default(),
            clustering: ClusterConfig::default(),
            train: TrainConfig {
                extra_images_per_batch: 4,
                total_iterations: 300,
                sgd: SgdConfig {
                    learning_rate: 0.01,
                    momentum: 0.9,
                    weight_decay: 1e-4,
                    decay_every: 200,
                    decay_factor: 0.1,
                },
                ..TrainConfig::default()
            },
            weights: LossWeights::default(),
            single_level_weights: LossWeights::single_level(),
            // Softer scores so that tau_fg keeps only clear matches; the cap
            // covers a whole 32x32 feature map.
            refine: RefineConfig {
                max_pixels_per_class: 1024,
                temperature: 0.2,
                ..RefineConfig::default()
            },
            eval: EvalConfig::default(),
        }
        .with_seed(0)
    }
}

impl PipelineConfig {
    /// Re-derives every stage seed from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.dataset.seed = seeds::derive(seed, "dataset", &[]);
        self.clustering.seed = seeds::derive(seed, "clustering", &[]);
        self.train.seed = seeds::derive(seed, "train", &[]);
        self.refine.seed = seeds::derive(seed, "refine", &[]);
        self.eval.seed = seeds::derive(seed, "episodes", &[]);
        self
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.segmentation.validate()?;
        self.clustering.validate()?;
        self.train.validate(true)?;
        self.weights.validate()?;
        self.single_level_weights.validate()?;
        self.refine.validate()?;
        if self.weights.gamma.len() != self.clustering.level_sizes.len() {
            return Err(Error::config(format!(
                "{} level weights for {} hierarchy levels",
                self.weights.gamma.len(),
                self.clustering.level_sizes.len()
            )));
        }
        if self.single_level_weights.gamma.len() != 1 {
            return Err(Error::config("single-level weights need exactly one gamma"));
        }
        Ok(())
    }

    /// Folds the evaluation covers.
    pub fn eval_folds(&self) -> Vec<usize> {
        if self.eval.folds.is_empty() {
            (0..self.dataset.folds).collect()
        } else {
            self.eval.folds.clone()
        }
    }

    /// Training config of `fold`: same settings, fold-specific seed.
    pub fn train_for_fold(&self, fold: usize) -> TrainConfig {
        TrainConfig {
            seed: seeds::derive(self.train.seed, "fold", &[fold as u64]),
            ..self.train.clone()
        }
    }

    pub fn clustering_for(&self, variant: Variant) -> ClusterConfig {
        match variant {
            Variant::Single => self.clustering.single_level(),
            Variant::Hierarchy => self.clustering.clone(),
        }
    }

    pub fn weights_for(&self, variant: Variant) -> &LossWeights {
        match variant {
            Variant::Single => &self.single_level_weights,
            Variant::Hierarchy => &self.weights,
        }
    }
}

/// Paths of every stage artifact.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl AsRef<Path>) -> Self {
        Layout {
            root: root.as_ref().to_path_buf(),
        }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn fold(&self, f: usize) -> PathBuf {
        self.root.join(format!("fold{f}"))
    }
    pub fn baseline(&self, f: usize) -> PathBuf {
        self.fold(f).join("baseline")
    }
    pub fn regions(&self, f: usize) -> PathBuf {
        self.fold(f).join("regions")
    }
    pub fn prototypes(&self, f: usize, v: Variant) -> PathBuf {
        self.fold(f).join("prototypes").join(v.name())
    }
    pub fn pseudo(&self, f: usize, v: Variant) -> PathBuf {
        self.fold(f).join("pseudo").join(v.name())
    }
    pub fn spfl(&self, f: usize, v: Variant) -> PathBuf {
        self.fold(f).join(format!("spfl_{}", v.name()))
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_checkpoint(dir: &Path, what: &str) -> Result<Checkpoint> {
    if !dir.join("manifest.json").exists() {
        return Err(Error::config(format!("missing {what} checkpoint at {}", dir.display())));
    }
    Checkpoint::load(dir)
}

pub fn stage_gen_data(config: &PipelineConfig, layout: &Layout) -> Result<()> {
    generate_synthetic_dataset(&config.dataset, layout.data())?;
    Ok(())
}

fn save_training(dir: &Path, ckpt: &Checkpoint, history: &[LossRecord]) -> Result<()> {
    ckpt.save(dir)?;
    write_json(&dir.join("loss_history.json"), &history)
}

pub fn stage_train_baseline(config: &PipelineConfig, layout: &Layout, fold: usize) -> Result<Vec<LossRecord>> {
    let ds = Dataset::load(layout.data())?;
    let images = ds.train_images(fold)?;
    let out = train_baseline(&images, &config.train_for_fold(fold))?;
    save_training(&layout.baseline(fold), &out.checkpoint, &out.history)?;
    Ok(out.history)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub images: usize,
    pub mean_regions: f64,
    /// Mean count of regions left after removing annotated objects.
    pub mean_background_regions: f64,
}

pub fn stage_segment_regions(config: &PipelineConfig, layout: &Layout, fold: usize) -> Result<RegionSummary> {
    let ds = Dataset::load(layout.data())?;
    let images = ds.train_images(fold)?;
    let dir = layout.regions(fold);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let counts = images
        .par_iter()
        .enumerate()
        .map(|(id, t)| -> Result<(usize, usize)> {
            let map = segment_regions(&t.image, &config.segmentation)?;
            map.save(dir.join(format!("{id:05}.pgm")))?;
            let bg = restrict_to_background(&map, &t.foreground())?;
            Ok((map.num_regions, bg.num_regions))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = counts.len().max(1) as f64;
    let summary = RegionSummary {
        images: counts.len(),
        mean_regions: counts.iter().map(|c| c.0 as f64).sum::<f64>() / n,
        mean_background_regions: counts.iter().map(|c| c.1 as f64).sum::<f64>() / n,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn encode_train(encoder: &EncoderModel, images: &[TrainImage]) -> Result<Vec<FeatureMap>> {
    let refs: Vec<&Image> = images.iter().map(|t| &t.image).collect();
    encoder.encode_images(&refs)
}

pub fn stage_build_prototypes(
    config: &PipelineConfig,
    layout: &Layout,
    fold: usize,
    variant: Variant,
) -> Result<PrototypeHierarchy> {
    let ds = Dataset::load(layout.data())?;
    let images = ds.train_images(fold)?;
    let ckpt = load_checkpoint(&layout.baseline(fold), "baseline")?;
    let feats = encode_train(&ckpt.encoder, &images)?;
    let rdir = layout.regions(fold);
    let corpora = images
        .par_iter()
        .zip(&feats)
        .enumerate()
        .map(|(id, (t, f))| -> Result<RegionCorpus> {
            let path = rdir.join(format!("{id:05}.pgm"));
            if !path.exists() {
                return Err(Error::config(format!("missing region map {}", path.display())));
            }
            let map = RegionMap::load(&path)?;
            let bg = restrict_to_background(&map, &t.foreground())?;
            extract_region_descriptors(f, &bg, &t.objects, id)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut corpus = RegionCorpus::default();
    for c in corpora {
        corpus.extend(c);
    }
    let hierarchy = build_hierarchy(&corpus, &config.clustering_for(variant))?;
    hierarchy.save(
        layout.prototypes(fold, variant),
        config.clustering.seed,
        &ckpt.fingerprint()?,
    )?;
    Ok(hierarchy)
}

pub fn stage_pseudo_label(layout: &Layout, fold: usize, variant: Variant) -> Result<()> {
    let ds = Dataset::load(layout.data())?;
    let images = ds.train_images(fold)?;
    let ckpt = load_checkpoint(&layout.baseline(fold), "baseline")?;
    let pdir = layout.prototypes(fold, variant);
    if !pdir.join("manifest.json").exists() {
        return Err(Error::config(format!("missing prototypes at {}", pdir.display())));
    }
    let (hierarchy, _) = PrototypeHierarchy::load(&pdir)?;
    let feats = encode_train(&ckpt.encoder, &images)?;
    let stacks = images
        .par_iter()
        .zip(&feats)
        .map(|(t, f)| assign_pseudo_labels(f, &t.foreground(), &hierarchy))
        .collect::<Result<Vec<_>>>()?;
    let stacks: BTreeMap<usize, _> = stacks.into_iter().enumerate().collect();
    save_pseudo_labels(layout.pseudo(fold, variant), &stacks, &config_hash(&hierarchy.level_sizes())?)
}

pub fn stage_train_spfl(
    config: &PipelineConfig,
    layout: &Layout,
    fold: usize,
    variant: Variant,
) -> Result<Vec<LossRecord>> {
    let ds = Dataset::load(layout.data())?;
    let images = ds.train_images(fold)?;
    let pdir = layout.pseudo(fold, variant);
    if !pdir.join("manifest.json").exists() {
        return Err(Error::config(format!("missing pseudo labels at {}", pdir.display())));
    }
    let (pseudo, _) = load_pseudo_labels(&pdir)?;
    let label_counts: Vec<usize> = match pseudo.values().next() {
        Some(s) => (0..s.levels.len()).map(|l| s.num_labels(l)).collect(),
        None => return Err(Error::Data("no pseudo labels".into())),
    };
    let out = train_spfl(
        &images,
        &pseudo,
        &label_counts,
        &config.train_for_fold(fold),
        config.weights_for(variant),
        variant.arm(),
    )?;
    save_training(&layout.spfl(fold, variant), &out.checkpoint, &out.history)?;
    Ok(out.history)
}

/// The test pool held in memory.
pub struct TestPool {
    pub images: Vec<Image>,
    pub labels: Vec<LabelMap>,
}

impl TestPool {
    pub fn load(ds: &Dataset) -> Result<Self> {
        let pairs = ds
            .index
            .test
            .par_iter()
            .map(|r| Ok((ds.read_image(r)?, ds.read_labels(r)?)))
            .collect::<Result<Vec<_>>>()?;
        let (images, labels) = pairs.into_iter().unzip();
        Ok(TestPool { images, labels })
    }

    pub fn encode(&self, encoder: &EncoderModel) -> Result<Vec<FeatureMap>> {
        let refs: Vec<&Image> = self.images.iter().collect();
        encoder.encode_images(&refs)
    }
}

/// Segments every episode against precomputed pool features. Episode `i`
/// refines its classifier with a seed derived from `refine.seed` and `i`.
pub fn evaluate_episodes(
    pool: &TestPool,
    features: &[FeatureMap],
    episodes: &[EpisodeRef],
    refine: &RefineConfig,
    mode: SegMode,
) -> Result<(EvalReport, Vec<Mask>)> {
    let preds = episodes
        .par_iter()
        .enumerate()
        .map(|(i, e)| -> Result<Mask> {
            let masks: Vec<Mask> = e.supports.iter().map(|&s| pool.labels[s].class_mask(e.class_id)).collect();
            let mrefs: Vec<&Mask> = masks.iter().collect();
            let frefs: Vec<&FeatureMap> = e.supports.iter().map(|&s| &features[s]).collect();
            let q = &pool.images[e.query];
            let cfg = RefineConfig {
                seed: seeds::derive(refine.seed, "episode", &[i as u64]),
                ..refine.clone()
            };
            Ok(segment_features(&features[e.query], &frefs, &mrefs, (q.height, q.width), &cfg, mode)?.mask)
        })
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<Mask> = episodes.iter().map(|e| pool.labels[e.query].class_mask(e.class_id)).collect();
    let ids: Vec<u32> = episodes.iter().map(|e| e.class_id).collect();
    Ok((compute_miou(&preds, &gts, &ids)?, preds))
}

#[derive(Serialize)]
struct ReportProvenance<'a> {
    checkpoint_config: &'a str,
    checkpoint_fingerprint: &'a str,
    dataset: &'a SyntheticDatasetConfig,
    refine: &'a RefineConfig,
    mode: SegMode,
    shots: usize,
    episodes: usize,
    episode_seed: u64,
}

/// Evaluates one checkpoint on one fold; the report's config hash covers
/// the checkpoint, dataset, refinement settings and episode draw.
pub fn stage_eval(
    config: &PipelineConfig,
    layout: &Layout,
    checkpoint_dir: &Path,
    fold: usize,
    mode: SegMode,
    shots: usize,
    episodes: usize,
) -> Result<EvalReport> {
    let start = Instant::now();
    let ds = Dataset::load(layout.data())?;
    let ckpt = load_checkpoint(checkpoint_dir, "evaluation")?;
    let pool = TestPool::load(&ds)?;
    let feats = pool.encode(&ckpt.encoder)?;
    let refs = ds.sample_episode_refs(fold, shots, episodes, config.eval.seed)?;
    let (mut report, _) = evaluate_episodes(&pool, &feats, &refs, &config.refine, mode)?;
    report.config_hash = config_hash(&ReportProvenance {
        checkpoint_config: &ckpt.meta.config_hash,
        checkpoint_fingerprint: &ckpt.fingerprint()?,
        dataset: &ds.index.config,
        refine: &config.refine,
        mode,
        shots,
        episodes,
        episode_seed: config.eval.seed,
    })?;
    report.seed = config.eval.seed;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// One encoder/mode combination across folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub encoder: String,
    pub mode: SegMode,
    pub per_fold: Vec<f64>,
    pub mean: f64,
    pub reports: Vec<EvalReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotRow {
    pub mode: SegMode,
    pub shots: usize,
    pub per_fold: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauCell {
    pub tau_fg: f32,
    pub tau_bg: f32,
    pub per_fold: Vec<f64>,
    pub mean: f64,
}

/// Published mean mIoU (in percent) of the method's component study on
/// PASCAL-5i, for context only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublishedReference {
    pub baseline: f64,
    pub with_spfl: f64,
    pub with_spfl_and_srofb: f64,
}

impl Default for PublishedReference {
    fn default() -> Self {
        PublishedReference {
            baseline: 57.8,
            with_spfl: 61.6,
            with_spfl_and_srofb: 63.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub folds: Vec<usize>,
    pub episodes_per_fold: usize,
    pub shots: usize,
    pub arms: Vec<ArmResult>,
    /// Encoder used by the sweeps.
    pub sweep_encoder: String,
    pub shot_sweep: Vec<ShotRow>,
    pub tau_grid: Vec<TauCell>,
    pub published_reference: PublishedReference,
    pub config_hash: String,
    pub seed: u64,
    pub wall_clock_secs: f64,
}

impl AblationReport {
    pub fn arm(&self, encoder: &str, mode: SegMode) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.encoder == encoder && a.mode == mode)
    }

    pub fn shot_row(&self, mode: SegMode, shots: usize) -> Option<&ShotRow> {
        self.shot_sweep.iter().find(|r| r.mode == mode && r.shots == shots)
    }

    /// The report with every wall-clock field zeroed.
    pub fn without_timing(&self) -> AblationReport {
        let mut r = self.clone();
        r.wall_clock_secs = 0.0;
        for a in &mut r.arms {
            for e in &mut a.reports {
                e.wall_clock_secs = 0.0;
            }
        }
        r
    }

    /// Aligned-column text rendering (mIoU in percent).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let fold_cols: String = self.folds.iter().map(|f| format!("{:>8}", format!("fold{f}"))).collect();
        let _ = writeln!(
            s,
            "Ablation: {}-shot, {} episodes per fold, mIoU (%)\n",
            self.shots, self.episodes_per_fold
        );
        let _ = writeln!(s, "{:<20}{:<22}{}{:>8}", "encoder", "mode", fold_cols, "mean");
        for a in &self.arms {
            let folds: String = a.per_fold.iter().map(|v| format!("{:>8.2}", 100.0 * v)).collect();
            let _ = writeln!(s, "{:<20}{:<22}{}{:>8.2}", a.encoder, a.mode.name(), folds, 100.0 * a.mean);
        }
        let p = &self.published_reference;
        let _ = writeln!(
            s,
            "\npublished reference (PASCAL-5i mean): baseline {:.1} -> +SPFL {:.1} -> +SROFB {:.1}",
            p.baseline, p.with_spfl, p.with_spfl_and_srofb
        );
        let _ = writeln!(s, "\nShot sweep ({}):\n", self.sweep_encoder);
        let _ = writeln!(s, "{:<22}{:>6}{}{:>8}", "mode", "shots", fold_cols, "mean");
        for r in &self.shot_sweep {
            let folds: String = r.per_fold.iter().map(|v| format!("{:>8.2}", 100.0 * v)).collect();
            let _ = writeln!(s, "{:<22}{:>6}{}{:>8.2}", r.mode.name(), r.shots, folds, 100.0 * r.mean);
        }
        let _ = writeln!(s, "\nQuery selection thresholds ({}, srofb_self_refined):\n", self.sweep_encoder);
        let _ = writeln!(s, "{:>8}{:>8}{}{:>8}", "tau_fg", "tau_bg", fold_cols, "mean");
        for c in &self.tau_grid {
            let folds: String = c.per_fold.iter().map(|v| format!("{:>8.2}", 100.0 * v)).collect();
            let _ = writeln!(s, "{:>8.2}{:>8.2}{}{:>8.2}", c.tau_fg, c.tau_bg, folds, 100.0 * c.mean);
        }
        s
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Runs every encoder/mode arm on a shared episode suite, then the shot
/// sweep and threshold grid with the hierarchical encoder. Writes
/// `reports/ablation.json` and `reports/ablation.txt`.
pub fn stage_ablate(config: &PipelineConfig, layout: &Layout) -> Result<AblationReport> {
    let start = Instant::now();
    let ds = Dataset::load(layout.data())?;
    let folds = config.eval_folds();
    let pool = TestPool::load(&ds)?;
    let e = &config.eval;
    let encoders = ["baseline", Variant::Single.arm(), Variant::Hierarchy.arm()];
    let mut arms: Vec<ArmResult> = Vec::new();
    let mut shot_rows: BTreeMap<(SegMode, usize), Vec<f64>> = BTreeMap::new();
    let mut tau_cells: Vec<((f32, f32), Vec<f64>)> = Vec::new();
    let mut provenance = Vec::new();
    for &fold in &folds {
        let dirs = [
            layout.baseline(fold),
            layout.spfl(fold, Variant::Single),
            layout.spfl(fold, Variant::Hierarchy),
        ];
        let refs = ds.sample_episode_refs(fold, e.shots, e.episodes_per_fold, e.seed)?;
        for (name, dir) in encoders.iter().zip(&dirs) {
            let ckpt = load_checkpoint(dir, name)?;
            let fingerprint = ckpt.fingerprint()?;
            provenance.push((fold, name.to_string(), ckpt.meta.config_hash.clone(), fingerprint.clone()));
            let feats = pool.encode(&ckpt.encoder)?;
            for mode in SegMode::ALL {
                let (mut report, _) = evaluate_episodes(&pool, &feats, &refs, &config.refine, mode)?;
                report.config_hash = config_hash(&ReportProvenance {
                    checkpoint_config: &ckpt.meta.config_hash,
                    checkpoint_fingerprint: &fingerprint,
                    dataset: &ds.index.config,
                    refine: &config.refine,
                    mode,
                    shots: e.shots,
                    episodes: e.episodes_per_fold,
                    episode_seed: e.seed,
                })?;
                report.seed = e.seed;
                match arms.iter_mut().find(|a| a.encoder == *name && a.mode == mode) {
                    Some(a) => {
                        a.per_fold.push(report.miou);
                        a.reports.push(report);
                    }
                    None => arms.push(ArmResult {
                        encoder: name.to_string(),
                        mode,
                        per_fold: vec![report.miou],
                        mean: 0.0,
                        reports: vec![report],
                    }),
                }
            }
            if *name != Variant::Hierarchy.arm() {
                continue;
            }
            for &k in &e.shot_sweep {
                let refs = ds.sample_episode_refs(fold, k, e.shot_sweep_episodes_per_fold, e.seed)?;
                for mode in [SegMode::Matching, SegMode::SrofbSelfRefined] {
                    let (r, _) = evaluate_episodes(&pool, &feats, &refs, &config.refine, mode)?;
                    shot_rows.entry((mode, k)).or_default().push(r.miou);
                }
            }
            let refs = ds.sample_episode_refs(fold, e.shots, e.tau_grid_episodes_per_fold, e.seed)?;
            let mut i = 0;
            for &tf in &e.tau_fg_grid {
                for &tb in &e.tau_bg_grid {
                    let cfg = RefineConfig {
                        tau_fg: tf,
                        tau_bg: tb,
                        ..config.refine.clone()
                    };
                    let (r, _) = evaluate_episodes(&pool, &feats, &refs, &cfg, SegMode::SrofbSelfRefined)?;
                    if tau_cells.len() <= i {
                        tau_cells.push(((tf, tb), Vec::new()));
                    }
                    tau_cells[i].1.push(r.miou);
                    i += 1;
                }
            }
        }
    }
    for a in &mut arms {
        a.mean = mean(&a.per_fold);
    }
    let report = AblationReport {
        folds,
        episodes_per_fold: e.episodes_per_fold,
        shots: e.shots,
        arms,
        sweep_encoder: Variant::Hierarchy.arm().to_string(),
        shot_sweep: shot_rows
            .into_iter()
            .map(|((mode, shots), per_fold)| ShotRow {
                mode,
                shots,
                mean: mean(&per_fold),
                per_fold,
            })
            .collect(),
        tau_grid: tau_cells
            .into_iter()
            .map(|((tau_fg, tau_bg), per_fold)| TauCell {
                tau_fg,
                tau_bg,
                mean: mean(&per_fold),
                per_fold,
            })
            .collect(),
        published_reference: PublishedReference::default(),
        config_hash: config_hash(&(config, &provenance))?,
        seed: config.seed,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    write_json(&layout.reports().join("ablation.json"), &report)?;
    write_text(&layout.reports().join("ablation.txt"), &report.to_text())?;
    Ok(report)
}

/// Time spent in each stage of [`run_pipeline`], in seconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub stages: Vec<(String, f64)>,
}

/// Runs every stage in order for all evaluated folds.
pub fn run_pipeline(config: &PipelineConfig, layout: &Layout) -> Result<(AblationReport, StageTimes)> {
    config.validate()?;
    let mut times = StageTimes::default();
    let mut timed = |name: String, f: &mut dyn FnMut() -> Result<()>| -> Result<()> {
        let t = Instant::now();
        f()?;
        times.stages.push((name, t.elapsed().as_secs_f64()));
        Ok(())
    };
    timed("gen-data".into(), &mut || stage_gen_data(config, layout))?;
    for fold in config.eval_folds() {
        timed(format!("fold{fold}/train-baseline"), &mut || {
            stage_train_baseline(config, layout, fold).map(|_| ())
        })?;
        timed(format!("fold{fold}/segment-regions"), &mut || {
            stage_segment_regions(config, layout, fold).map(|_| ())
        })?;
        for v in Variant::ALL {
            timed(format!("fold{fold}/build-prototypes/{}", v.name()), &mut || {
                stage_build_prototypes(config, layout, fold, v).map(|_| ())
            })?;
            timed(format!("fold{fold}/pseudo-label/{}", v.name()), &mut || {
                stage_pseudo_label(layout, fold, v)
            })?;
            timed(format!("fold{fold}/train-spfl/{}", v.name()), &mut || {
                stage_train_spfl(config, layout, fold, v).map(|_| ())
            })?;
        }
    }
    let mut report = None;
    timed("ablate".into(), &mut || {
        report = Some(stage_ablate(config, layout)?);
        Ok(())
    })?;
    write_json(&layout.reports().join("stage_times.json"), &times)?;
    Ok((report.expect("ablation ran"), times))
}
