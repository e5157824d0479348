//! Joint training: the prototype-matching segmentation loss on base-class
//! episodes plus per-level pseudo-classification losses.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, StrongAug};
use crate::error::{Error, Result};
use crate::image::{resample_nearest, Image, Mask};
use crate::layers::{activation_signature, Mode};
use crate::model::{config_hash, Checkpoint, CheckpointMeta, DecoderModel, EncoderModel};
use crate::ops::{cosine_similarity, cosine_with_grad, cross_entropy_columns};
use crate::optim::{Sgd, SgdConfig};
use crate::pseudo_label::PseudoLabelStack;
use crate::seeds;
use crate::tensor::{chw, FeatureMap, Tensor};

/// Foreground and background prototypes of an episode's supports.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrototypes {
    pub fg: Vec<f32>,
    pub bg: Vec<f32>,
}

fn mask_at(mask: &Mask, h: usize, w: usize) -> Result<Mask> {
    if (mask.height, mask.width) == (h, w) {
        Ok(mask.clone())
    } else {
        mask.downsample_majority(h, w)
    }
}

/// Pools foreground and background features of one support.
pub fn compute_mask_prototypes(features: &FeatureMap, mask: &Mask) -> Result<MaskPrototypes> {
    compute_mask_prototypes_kshot(&[features], &[mask])
}

/// Pools over the pixels of all supports jointly. Masks are
/// majority-downsampled to feature resolution when needed.
pub fn compute_mask_prototypes_kshot(features: &[&FeatureMap], masks: &[&Mask]) -> Result<MaskPrototypes> {
    Ok(pool_supports(features, masks)?.0)
}

/// Prototypes plus the feature-resolution masks and pixel counts needed to
/// route gradients back through the pooling.
fn pool_supports(features: &[&FeatureMap], masks: &[&Mask]) -> Result<(MaskPrototypes, Vec<Mask>, usize, usize)> {
    if features.is_empty() || features.len() != masks.len() {
        return Err(Error::dim(format!(
            "{} support feature maps for {} masks",
            features.len(),
            masks.len()
        )));
    }
    let c = chw(features[0]).0;
    let mut fg = vec![0f64; c];
    let mut bg = vec![0f64; c];
    let (mut nf, mut nb) = (0usize, 0usize);
    let mut small = Vec::with_capacity(masks.len());
    for (f, m) in features.iter().zip(masks) {
        let (fc, h, w) = chw(f);
        if fc != c {
            return Err(Error::dim(format!("support channels {fc} vs {c}")));
        }
        let m = mask_at(m, h, w)?;
        let hw = h * w;
        let data = f.data();
        for (p, &v) in m.data.iter().enumerate() {
            let (acc, n) = if v != 0 { (&mut fg, &mut nf) } else { (&mut bg, &mut nb) };
            *n += 1;
            for (k, a) in acc.iter_mut().enumerate() {
                *a += data[k * hw + p] as f64;
            }
        }
        small.push(m);
    }
    if nf == 0 {
        return Err(Error::MissingForeground);
    }
    if nb == 0 {
        return Err(Error::Data("support masks have no background pixels".into()));
    }
    let protos = MaskPrototypes {
        fg: fg.iter().map(|v| (v / nf as f64) as f32).collect(),
        bg: bg.iter().map(|v| (v / nb as f64) as f32).collect(),
    };
    Ok((protos, small, nf, nb))
}

/// Cosine similarities `[background, foreground]` of one pixel feature.
pub fn paired_similarity(pixel: &[f32], protos: &MaskPrototypes) -> Result<[f32; 2]> {
    Ok([cosine_similarity(pixel, &protos.bg)?, cosine_similarity(pixel, &protos.fg)?])
}

/// Segmentation loss and its gradients.
#[derive(Clone, Debug)]
pub struct SegLoss {
    pub loss: f64,
    /// Gradient with respect to the query feature map.
    pub grad_query: Tensor,
    pub grad_fg: Vec<f64>,
    pub grad_bg: Vec<f64>,
}

/// Mean two-way cross-entropy of `softmax(s / temperature)` against the
/// binary ground truth, with `s` from [`paired_similarity`].
pub fn seg_loss(query: &FeatureMap, protos: &MaskPrototypes, gt: &Mask, temperature: f32) -> Result<SegLoss> {
    if temperature <= 0.0 {
        return Err(Error::config("temperature must be positive"));
    }
    let (c, h, w) = chw(query);
    if protos.fg.len() != c || protos.bg.len() != c {
        return Err(Error::dim(format!("prototypes of length {} for {c} channels", protos.fg.len())));
    }
    if (gt.height, gt.width) != (h, w) {
        return Err(Error::dim(format!(
            "ground truth {}x{} for {h}x{w} features",
            gt.height, gt.width
        )));
    }
    let hw = h * w;
    let inv_t = 1.0 / temperature as f64;
    let scale = 1.0 / hw as f64;
    let data = query.data();
    let mut grad = vec![0f32; c * hw];
    let mut grad_fg = vec![0f64; c];
    let mut grad_bg = vec![0f64; c];
    let mut loss = 0f64;
    let mut f = vec![0f32; c];
    for p in 0..hw {
        for (k, v) in f.iter_mut().enumerate() {
            *v = data[k * hw + p];
        }
        let (sb, gfb, gpb) = cosine_with_grad(&f, &protos.bg);
        let (sf, gff, gpf) = cosine_with_grad(&f, &protos.fg);
        let (zb, zf) = (sb * inv_t, sf * inv_t);
        let m = zb.max(zf);
        let (eb, ef) = ((zb - m).exp(), (zf - m).exp());
        let (pb, pf) = (eb / (eb + ef), ef / (eb + ef));
        let fg = gt.data[p] != 0;
        loss -= if fg { pf.ln() } else { pb.ln() };
        let db = (pb - if fg { 0.0 } else { 1.0 }) * inv_t * scale;
        let df = (pf - if fg { 1.0 } else { 0.0 }) * inv_t * scale;
        for k in 0..c {
            grad[k * hw + p] = (db * gfb[k] + df * gff[k]) as f32;
            grad_bg[k] += db * gpb[k];
            grad_fg[k] += df * gpf[k];
        }
    }
    Ok(SegLoss {
        loss: loss * scale,
        grad_query: Tensor::new(vec![c, h, w], grad)?,
        grad_fg,
        grad_bg,
    })
}

/// Segmentation loss of a whole episode with gradients for the query and
/// every support feature map (through mask average pooling).
#[derive(Clone, Debug)]
pub struct EpisodeLoss {
    pub loss: f64,
    pub grad_query: Tensor,
    pub grad_supports: Vec<Tensor>,
}

pub fn episode_seg_loss(
    query: &FeatureMap,
    gt: &Mask,
    supports: &[&FeatureMap],
    support_masks: &[&Mask],
    temperature: f32,
) -> Result<EpisodeLoss> {
    let (_, h, w) = chw(query);
    let (protos, small, nf, nb) = pool_supports(supports, support_masks)?;
    let gt = mask_at(gt, h, w)?;
    let sl = seg_loss(query, &protos, &gt, temperature)?;
    let gf: Vec<f32> = sl.grad_fg.iter().map(|g| (g / nf as f64) as f32).collect();
    let gb: Vec<f32> = sl.grad_bg.iter().map(|g| (g / nb as f64) as f32).collect();
    let grad_supports = supports
        .iter()
        .zip(&small)
        .map(|(f, m)| {
            let (c, h, w) = chw(f);
            let hw = h * w;
            let mut g = vec![0f32; c * hw];
            for (p, &v) in m.data.iter().enumerate() {
                let src = if v != 0 { &gf } else { &gb };
                for k in 0..c {
                    g[k * hw + p] = src[k];
                }
            }
            Tensor::new(vec![c, h, w], g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EpisodeLoss {
        loss: sl.loss,
        grad_query: sl.grad_query,
        grad_supports,
    })
}

/// Mean pixel-wise cross-entropy of `[N, K, H, W]` logits. Each label map
/// is `label_h x label_w` and is nearest-neighbor upsampled to `H x W`.
pub fn pseudo_cls_loss(
    logits: &Tensor,
    labels: &[&[u32]],
    label_h: usize,
    label_w: usize,
) -> Result<(f64, Tensor)> {
    if logits.ndim() != 4 || logits.dim(0) != labels.len() {
        return Err(Error::dim(format!(
            "logits {:?} for {} label maps",
            logits.shape(),
            labels.len()
        )));
    }
    let (n, k, h, w) = (logits.dim(0), logits.dim(1), logits.dim(2), logits.dim(3));
    let hw = h * w;
    let weight = 1.0 / (n * hw) as f64;
    let mut loss = 0f64;
    let mut grad = Vec::with_capacity(logits.len());
    for (i, lab) in labels.iter().enumerate() {
        if lab.len() != label_h * label_w {
            return Err(Error::dim(format!("label map of {} cells, expected {label_h}x{label_w}", lab.len())));
        }
        let up;
        let lab: &[u32] = if (label_h, label_w) == (h, w) {
            lab
        } else {
            up = resample_nearest(lab, label_h, label_w, h, w);
            &up
        };
        let block = &logits.data()[i * k * hw..(i + 1) * k * hw];
        let (l, g) = cross_entropy_columns(block, k, hw, lab, weight)?;
        loss += l;
        grad.extend(g);
    }
    Ok((loss, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Level weights of the pseudo-classification loss and the weight of the
/// segmentation loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma: Vec<f32>,
    pub seg_weight: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma: vec![0.5, 1.0, 1.0],
            seg_weight: 1.0,
        }
    }
}

impl LossWeights {
    /// One pseudo level with unit weight.
    pub fn single_level() -> Self {
        LossWeights {
            gamma: vec![1.0],
            seg_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma.is_empty() {
            return Err(Error::config("at least one level weight is required"));
        }
        for &g in self.gamma.iter().chain(std::iter::once(&self.seg_weight)) {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::config(format!("loss weights must be positive, got {g}")));
            }
        }
        Ok(())
    }
}

/// `sum_l gamma_l * loss_l`.
pub fn total_pseudo_loss(losses: &[f64], weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    if losses.len() != weights.gamma.len() {
        return Err(Error::config(format!(
            "{} level losses for {} weights",
            losses.len(),
            weights.gamma.len()
        )));
    }
    Ok(losses.iter().zip(&weights.gamma).map(|(l, &g)| g as f64 * l).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub pairs_per_batch: usize,
    pub extra_images_per_batch: usize,
    pub total_iterations: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
    /// Softmax temperature of the segmentation loss.
    pub temperature: f32,
    /// Random horizontal flips of support and query images.
    pub flip_pairs: bool,
    /// Flip, color jitter and crop-resize of pseudo-labeled images.
    pub strong_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pairs_per_batch: 4,
            extra_images_per_batch: 16,
            total_iterations: 300,
            sgd: SgdConfig::default(),
            seed: 0,
            temperature: 0.05,
            flip_pairs: true,
            strong_augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, pseudo_branch: bool) -> Result<()> {
        if self.pairs_per_batch == 0 || self.total_iterations == 0 {
            return Err(Error::config("pairs per batch and iterations must be at least 1"));
        }
        if pseudo_branch && self.extra_images_per_batch == 0 {
            return Err(Error::config("extra images per batch must be at least 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        self.sgd.validate()
    }
}

/// A base-class training image with its annotated objects at image
/// resolution.
#[derive(Clone, Debug)]
pub struct TrainImage {
    pub image: Image,
    pub objects: Vec<(u32, Mask)>,
}

impl TrainImage {
    /// Union of the masks of `class`.
    pub fn class_mask(&self, class: u32) -> Mask {
        let mut m = Mask::zeros(self.image.height, self.image.width);
        for (c, om) in &self.objects {
            if *c == class {
                for (a, &b) in m.data.iter_mut().zip(&om.data) {
                    *a |= (b != 0) as u8;
                }
            }
        }
        m
    }

    /// Union of all annotated objects.
    pub fn foreground(&self) -> Mask {
        let mut m = Mask::zeros(self.image.height, self.image.width);
        for (_, om) in &self.objects {
            for (a, &b) in m.data.iter_mut().zip(&om.data) {
                *a |= (b != 0) as u8;
            }
        }
        m
    }
}

/// Class id -> indices of images containing that class, limited to classes
/// present in at least two images.
pub fn episode_index(images: &[TrainImage]) -> BTreeMap<u32, Vec<usize>> {
    let mut idx: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, t) in images.iter().enumerate() {
        let mut classes: Vec<u32> = t.objects.iter().filter(|(_, m)| m.count() > 0).map(|(c, _)| *c).collect();
        classes.sort_unstable();
        classes.dedup();
        for c in classes {
            idx.entry(c).or_default().push(i);
        }
    }
    idx.retain(|_, v| v.len() >= 2);
    idx
}

/// One support/query pair at image resolution.
#[derive(Clone, Debug)]
pub struct PairSample {
    pub support: Image,
    pub support_mask: Mask,
    pub query: Image,
    pub query_mask: Mask,
}

/// A pseudo-labeled image with one feature-resolution label map per level.
#[derive(Clone, Debug)]
pub struct ExtraSample {
    pub image: Image,
    pub labels: Vec<Vec<u32>>,
    pub label_h: usize,
    pub label_w: usize,
}

#[derive(Clone, Debug, Default)]
pub struct JointBatch {
    pub pairs: Vec<PairSample>,
    pub extras: Vec<ExtraSample>,
}

/// Pseudo labels for the training images, keyed by image index.
pub type PseudoLabels = BTreeMap<usize, PseudoLabelStack>;

const PAIR_ATTEMPTS: usize = 64;

fn sample_pair<R: Rng>(
    images: &[TrainImage],
    index: &BTreeMap<u32, Vec<usize>>,
    feature_hw: (usize, usize),
    flip: bool,
    rng: &mut R,
) -> Result<PairSample> {
    let classes: Vec<&u32> = index.keys().collect();
    for _ in 0..PAIR_ATTEMPTS {
        let class = *classes[rng.random_range(0..classes.len())];
        let pool = &index[&class];
        let s = pool[rng.random_range(0..pool.len())];
        let mut q = pool[rng.random_range(0..pool.len() - 1)];
        if q >= s {
            q += 1;
        }
        let (mut support, mut support_mask) = (images[s].image.clone(), images[s].class_mask(class));
        let (mut query, mut query_mask) = (images[q].image.clone(), images[q].class_mask(class));
        if flip {
            (support, support_mask) = augment::random_flip(&support, &support_mask, rng);
            (query, query_mask) = augment::random_flip(&query, &query_mask, rng);
        }
        let small = support_mask.downsample_majority(feature_hw.0, feature_hw.1)?;
        let fg = small.count();
        if fg > 0 && fg < small.data.len() {
            return Ok(PairSample {
                support,
                support_mask,
                query,
                query_mask,
            });
        }
    }
    Err(Error::Data("could not sample a support with foreground at feature resolution".into()))
}

/// Draws the batch of iteration `iteration`; the draw depends only on the
/// seed and the iteration number.
pub fn sample_batch(
    images: &[TrainImage],
    index: &BTreeMap<u32, Vec<usize>>,
    pseudo: Option<&PseudoLabels>,
    config: &TrainConfig,
    feature_hw: (usize, usize),
    iteration: usize,
) -> Result<JointBatch> {
    if index.is_empty() {
        return Err(Error::Data("no base class appears in two training images".into()));
    }
    let mut rng = seeds::rng(config.seed, "batch", &[iteration as u64]);
    let mut batch = JointBatch::default();
    for _ in 0..config.pairs_per_batch {
        batch.pairs.push(sample_pair(images, index, feature_hw, config.flip_pairs, &mut rng)?);
    }
    if let Some(pseudo) = pseudo {
        for _ in 0..config.extra_images_per_batch {
            let i = rng.random_range(0..images.len());
            let stack = pseudo
                .get(&i)
                .ok_or_else(|| Error::Data(format!("no pseudo labels for training image {i}")))?;
            let aug = if config.strong_augment {
                StrongAug::sample(&mut rng)
            } else {
                StrongAug::IDENTITY
            };
            batch.extras.push(ExtraSample {
                image: aug.apply_image(&images[i].image),
                labels: stack
                    .levels
                    .iter()
                    .map(|l| aug.apply_labels(l, stack.height, stack.width))
                    .collect(),
                label_h: stack.height,
                label_w: stack.width,
            });
        }
    }
    Ok(batch)
}

/// Loss terms of one training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub total: f64,
    pub seg: f64,
    /// Unweighted per-level pseudo-classification losses.
    pub pseudo: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub record: LossRecord,
    /// ReLU activation signature of every network touched by the step.
    pub signature: u64,
}

/// Forward and backward pass of the joint objective on a fixed batch.
/// Parameter gradients are overwritten (not accumulated across calls).
pub fn joint_step(
    encoder: &mut EncoderModel,
    mut decoders: Option<&mut DecoderModel>,
    batch: &JointBatch,
    weights: &LossWeights,
    temperature: f32,
) -> Result<StepOutput> {
    encoder.net.zero_grad();
    if let Some(d) = decoders.as_deref_mut() {
        d.heads.iter_mut().for_each(|h| h.zero_grad());
    }
    let np = batch.pairs.len();
    let ne = if decoders.is_some() { batch.extras.len() } else { 0 };
    let mut inputs = Vec::with_capacity(2 * np + ne);
    for p in &batch.pairs {
        inputs.push(p.support.to_tensor());
        inputs.push(p.query.to_tensor());
    }
    for e in &batch.extras[..ne] {
        inputs.push(e.image.to_tensor());
    }
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let (feats, caches) = encoder.net.forward(&Tensor::stack(&refs)?, Mode::Train)?;
    let (b, c, h, w) = (feats.dim(0), feats.dim(1), feats.dim(2), feats.dim(3));
    let per = c * h * w;
    let mut grad = vec![0f32; b * per];
    let mut signature = activation_signature(&caches);

    let mut seg = 0f64;
    let seg_scale = weights.seg_weight / np.max(1) as f32;
    for (i, p) in batch.pairs.iter().enumerate() {
        let s = feats.select(2 * i);
        let q = feats.select(2 * i + 1);
        let el = episode_seg_loss(&q, &p.query_mask, &[&s], &[&p.support_mask], temperature)?;
        seg += el.loss / np as f64;
        for (slot, g) in [(2 * i, &el.grad_supports[0]), (2 * i + 1, &el.grad_query)] {
            for (a, &v) in grad[slot * per..(slot + 1) * per].iter_mut().zip(g.data()) {
                *a += seg_scale * v;
            }
        }
    }

    let mut pseudo = Vec::new();
    if let Some(dec) = decoders {
        if dec.heads.len() != weights.gamma.len() {
            return Err(Error::config(format!(
                "{} decoder levels for {} level weights",
                dec.heads.len(),
                weights.gamma.len()
            )));
        }
        if ne > 0 {
            let x = Tensor::new(vec![ne, c, h, w], feats.data()[2 * np * per..].to_vec())?;
            for (l, head) in dec.heads.iter_mut().enumerate() {
                let (logits, dc) = head.forward(&x, Mode::Train)?;
                signature = signature.rotate_left(7) ^ activation_signature(&dc);
                let labels: Vec<&[u32]> = batch.extras.iter().map(|e| e.labels[l].as_slice()).collect();
                let e0 = &batch.extras[0];
                let (loss, mut g) = pseudo_cls_loss(&logits, &labels, e0.label_h, e0.label_w)?;
                g.scale(weights.gamma[l]);
                let gx = head.backward(&dc, &g)?;
                for (a, &v) in grad[2 * np * per..].iter_mut().zip(gx.data()) {
                    *a += v;
                }
                pseudo.push(loss);
            }
        }
    }
    encoder.net.backward(&caches, &Tensor::new(vec![b, c, h, w], grad)?)?;
    let total = weights.seg_weight as f64 * seg
        + pseudo.iter().zip(&weights.gamma).map(|(l, &g)| g as f64 * l).sum::<f64>();
    Ok(StepOutput {
        record: LossRecord {
            iteration: 0,
            total,
            seg,
            pseudo,
        },
        signature,
    })
}

/// Pseudo labels and their label space for the auxiliary branch.
#[derive(Clone, Copy, Debug)]
pub struct PseudoBranch<'a> {
    pub labels: &'a PseudoLabels,
    /// Total label count per level.
    pub label_counts: &'a [usize],
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<LossRecord>,
}

#[derive(Serialize)]
struct HashedConfig<'a> {
    config: &'a TrainConfig,
    weights: Option<&'a LossWeights>,
    label_counts: Option<&'a [usize]>,
}

/// Trains a fresh tiny encoder, with the pseudo-classification branch when
/// `branch` is given.
pub fn train_joint(
    images: &[TrainImage],
    branch: Option<PseudoBranch<'_>>,
    config: &TrainConfig,
    weights: &LossWeights,
    role: &str,
) -> Result<TrainOutcome> {
    config.validate(branch.is_some())?;
    if images.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if branch.is_some() {
        weights.validate()?;
    } else if !(weights.seg_weight > 0.0) {
        return Err(Error::config("seg_weight must be positive"));
    }
    let (ih, iw) = (images[0].image.height, images[0].image.width);
    let index = episode_index(images);
    let mut encoder = EncoderModel::tiny(seeds::derive(config.seed, "encoder", &[]));
    let feature_hw = encoder.feature_size(ih, iw);
    let mut decoders = match branch {
        Some(b) => {
            if b.label_counts.len() != weights.gamma.len() {
                return Err(Error::config(format!(
                    "{} pseudo levels for {} level weights",
                    b.label_counts.len(),
                    weights.gamma.len()
                )));
            }
            Some(DecoderModel::new(
                encoder.channels,
                b.label_counts,
                (ih, iw),
                seeds::derive(config.seed, "decoder", &[]),
            ))
        }
        None => None,
    };
    let mut sgd = Sgd::new(config.sgd.clone())?;
    let mut history = Vec::with_capacity(config.total_iterations);
    for t in 0..config.total_iterations {
        let batch = sample_batch(images, &index, branch.map(|b| b.labels), config, feature_hw, t)?;
        let mut out = joint_step(&mut encoder, decoders.as_mut(), &batch, weights, config.temperature)?;
        if !out.record.total.is_finite() {
            return Err(Error::Data(format!("training loss diverged at iteration {t}")));
        }
        let dec_params = decoders.iter_mut().flat_map(|d| d.heads.iter_mut()).flat_map(|h| h.params_mut());
        sgd.step(encoder.net.params_mut().chain(dec_params), t);
        out.record.iteration = t;
        history.push(out.record);
    }
    let config_hash = config_hash(&HashedConfig {
        config,
        weights: branch.map(|_| weights),
        label_counts: branch.map(|b| b.label_counts),
    })?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            meta: CheckpointMeta {
                role: role.to_string(),
                iteration: config.total_iterations,
                seed: config.seed,
                config_hash,
            },
            encoder,
            decoders,
        },
        history,
    })
}

/// Prototype-matching baseline: segmentation loss only.
pub fn train_baseline(images: &[TrainImage], config: &TrainConfig) -> Result<TrainOutcome> {
    train_joint(images, None, config, &LossWeights::default(), "baseline")
}

/// Joint training with the pseudo-classification branch.
pub fn train_spfl(
    images: &[TrainImage],
    pseudo: &PseudoLabels,
    label_counts: &[usize],
    config: &TrainConfig,
    weights: &LossWeights,
    role: &str,
) -> Result<TrainOutcome> {
    train_joint(
        images,
        Some(PseudoBranch {
            labels: pseudo,
            label_counts,
        }),
        config,
        weights,
        role,
    )
}

/// Mean segmentation loss of an encoder (eval mode) over fixed pairs.
pub fn evaluate_seg_loss(encoder: &EncoderModel, pairs: &[PairSample], temperature: f32) -> Result<f64> {
    let mut total = 0f64;
    for p in pairs {
        let f = encoder.encode_images(&[&p.support, &p.query])?;
        let el = episode_seg_loss(&f[1], &p.query_mask, &[&f[0]], &[&p.support_mask], temperature)?;
        total += el.loss;
    }
    Ok(total / pairs.len().max(1) as f64)
}
