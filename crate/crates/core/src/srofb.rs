//! Inference-time segmentation with a self-refined online
//! foreground-background classifier.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::layers::{bilinear_upsample, Layer, Mode, Sequential};
use crate::model::EncoderModel;
use crate::ops::{sigmoid, sigmoid_bce_with_logits};
use crate::optim::{Sgd, SgdConfig};
use crate::seeds;
use crate::spfl::{compute_mask_prototypes_kshot, MaskPrototypes};
use crate::tensor::{chw, FeatureMap, Tensor};

/// Two-layer perceptron with a single sigmoid output.
#[derive(Clone, Debug)]
pub struct OFBClassifier {
    pub net: Sequential,
    pub input_dim: usize,
}

impl OFBClassifier {
    /// linear(C -> hidden), ReLU, dropout, linear(hidden -> 1).
    pub fn new(input_dim: usize, hidden: usize, dropout: f32, seed: u64) -> Self {
        let mut rng = seeds::rng(seed, "ofb-init", &[]);
        let net = Sequential::new(vec![
            Layer::linear(input_dim, hidden, &mut rng),
            Layer::relu(),
            Layer::dropout(dropout, seeds::derive(seed, "ofb-dropout", &[])),
            Layer::linear(hidden, 1, &mut rng),
        ]);
        OFBClassifier { net, input_dim }
    }

    /// Eval-mode logits for `[N, C]` rows.
    pub fn logits(&self, rows: &Tensor) -> Result<Vec<f32>> {
        Ok(self.net.infer(rows)?.into_data())
    }

    /// Eval-mode foreground probabilities for `[N, C]` rows.
    pub fn scores(&self, rows: &Tensor) -> Result<Vec<f32>> {
        Ok(self.logits(rows)?.into_iter().map(|z| sigmoid(z as f64) as f32).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub tau_fg: f32,
    pub tau_bg: f32,
    pub learning_rate: f32,
    pub momentum: f32,
    pub iterations_1shot: usize,
    pub iterations_kshot: usize,
    /// Cap on positives and on negatives taken from each source.
    pub max_pixels_per_class: usize,
    /// Softmax temperature of the rough prototype-matching pass.
    pub temperature: f32,
    pub hidden: usize,
    pub dropout: f32,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            tau_fg: 0.7,
            tau_bg: 0.6,
            learning_rate: 0.1,
            momentum: 0.9,
            iterations_1shot: 10,
            iterations_kshot: 100,
            max_pixels_per_class: 512,
            temperature: 0.05,
            hidden: 128,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("tau_fg", self.tau_fg), ("tau_bg", self.tau_bg)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::config(format!("{name} must lie in (0, 1), got {t}")));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        if self.hidden == 0 || self.max_pixels_per_class == 0 {
            return Err(Error::config("hidden width and pixel cap must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout rate must lie in [0, 1)"));
        }
        self.sgd().validate()
    }

    /// Refinement steps for an episode with `shots` supports.
    pub fn iterations(&self, shots: usize) -> usize {
        if shots <= 1 {
            self.iterations_1shot
        } else {
            self.iterations_kshot
        }
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: 0.0,
            decay_every: usize::MAX,
            decay_factor: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Support,
    Query,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelSample {
    pub feature: Vec<f32>,
    pub origin: Origin,
}

/// Training pixels of the online classifier.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PixelSampleSet {
    pub positives: Vec<PixelSample>,
    pub negatives: Vec<PixelSample>,
}

impl PixelSampleSet {
    pub fn extend(&mut self, other: PixelSampleSet) {
        self.positives.extend(other.positives);
        self.negatives.extend(other.negatives);
    }
}

/// Per-pixel `softmax(s / temperature)` as a `[2, h, w]` map: channel 0 is
/// the background score, channel 1 the foreground score.
pub fn rough_segment(query: &FeatureMap, protos: &MaskPrototypes, temperature: f32) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::config("temperature must be positive"));
    }
    let (c, h, w) = chw(query);
    if protos.fg.len() != c || protos.bg.len() != c {
        return Err(Error::dim(format!("prototypes of length {} for {c} channels", protos.fg.len())));
    }
    let hw = h * w;
    let unit = |v: &[f32]| -> Vec<f64> {
        let n = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let inv = if n < 1e-12 { 0.0 } else { 1.0 / n };
        v.iter().map(|&x| x as f64 * inv).collect()
    };
    let (pb, pf) = (unit(&protos.bg), unit(&protos.fg));
    let data = query.data();
    let mut out = vec![0f32; 2 * hw];
    for p in 0..hw {
        let (mut dot_b, mut dot_f, mut nn) = (0f64, 0f64, 0f64);
        for k in 0..c {
            let v = data[k * hw + p] as f64;
            dot_b += v * pb[k];
            dot_f += v * pf[k];
            nn += v * v;
        }
        let n = nn.sqrt();
        let inv = if n < 1e-12 { 0.0 } else { 1.0 / n };
        let (zb, zf) = (dot_b * inv / temperature as f64, dot_f * inv / temperature as f64);
        let pfg = 1.0 / (1.0 + (zb - zf).exp());
        out[hw + p] = pfg as f32;
        out[p] = (1.0 - pfg) as f32;
    }
    Tensor::new(vec![2, h, w], out)
}

fn column(features: &FeatureMap, p: usize) -> Vec<f32> {
    let (c, h, w) = chw(features);
    let hw = h * w;
    (0..c).map(|k| features.data()[k * hw + p]).collect()
}

/// Cells whose score exceeds `tau`, highest score first (lower index on
/// ties), truncated to `cap`.
fn confident(scores: &[f32], tau: f32, cap: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&p| scores[p] > tau).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(cap);
    idx
}

/// Harvests query pixels with foreground score above `tau_fg` as positives
/// and background score above `tau_bg` as negatives.
pub fn select_confident_pixels(
    scores: &Tensor,
    query: &FeatureMap,
    config: &RefineConfig,
) -> Result<PixelSampleSet> {
    let (_, h, w) = chw(query);
    if scores.shape() != [2, h, w] {
        return Err(Error::dim(format!(
            "score map {:?} for {h}x{w} features",
            scores.shape()
        )));
    }
    let hw = h * w;
    let (bg, fg) = scores.data().split_at(hw);
    let take = |idx: Vec<usize>| {
        idx.into_iter()
            .map(|p| PixelSample {
                feature: column(query, p),
                origin: Origin::Query,
            })
            .collect()
    };
    Ok(PixelSampleSet {
        positives: take(confident(fg, config.tau_fg, config.max_pixels_per_class)),
        negatives: take(confident(bg, config.tau_bg, config.max_pixels_per_class)),
    })
}

fn subsample<R: Rng>(cells: Vec<(usize, usize)>, cap: usize, rng: &mut R) -> Vec<(usize, usize)> {
    if cells.len() <= cap {
        return cells;
    }
    let mut picked = index::sample(rng, cells.len(), cap).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| cells[i]).collect()
}

/// Every support feature cell labeled by its (feature-resolution) mask,
/// each side subsampled uniformly to the cap.
pub fn gather_support_pixels(
    supports: &[&FeatureMap],
    masks: &[&Mask],
    config: &RefineConfig,
) -> Result<PixelSampleSet> {
    if supports.len() != masks.len() || supports.is_empty() {
        return Err(Error::dim(format!(
            "{} support feature maps for {} masks",
            supports.len(),
            masks.len()
        )));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (s, (f, m)) in supports.iter().zip(masks).enumerate() {
        let (_, h, w) = chw(f);
        let small = if (m.height, m.width) == (h, w) {
            (*m).clone()
        } else {
            m.downsample_majority(h, w)?
        };
        for (p, &v) in small.data.iter().enumerate() {
            if v != 0 {
                pos.push((s, p));
            } else {
                neg.push((s, p));
            }
        }
    }
    if pos.is_empty() {
        return Err(Error::MissingForeground);
    }
    let mut rng = seeds::rng(config.seed, "support-pixels", &[]);
    let cap = config.max_pixels_per_class;
    let pos = subsample(pos, cap, &mut rng);
    let neg = subsample(neg, cap, &mut rng);
    let take = |cells: Vec<(usize, usize)>| {
        cells
            .into_iter()
            .map(|(s, p)| PixelSample {
                feature: column(supports[s], p),
                origin: Origin::Support,
            })
            .collect()
    };
    Ok(PixelSampleSet {
        positives: take(pos),
        negatives: take(neg),
    })
}

/// A trained classifier and its loss on the whole sample set (balanced
/// between the classes, eval mode) before and after refinement.
#[derive(Clone, Debug)]
pub struct Refined {
    pub classifier: OFBClassifier,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn rows(samples: &[&PixelSample], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(samples.len() * dim);
    for s in samples {
        if s.feature.len() != dim {
            return Err(Error::dim(format!("sample of length {} for {dim} inputs", s.feature.len())));
        }
        data.extend_from_slice(&s.feature);
    }
    Tensor::new(vec![samples.len(), dim], data)
}

/// Class-balanced binary cross-entropy of `classifier` over all samples.
pub fn balanced_loss(classifier: &OFBClassifier, samples: &PixelSampleSet) -> Result<f64> {
    let mut total = 0f64;
    for (set, label) in [(&samples.positives, 1.0f32), (&samples.negatives, 0.0)] {
        let refs: Vec<&PixelSample> = set.iter().collect();
        let z = classifier.logits(&rows(&refs, classifier.input_dim)?)?;
        total += 0.5 * sigmoid_bce_with_logits(&z, &vec![label; z.len()])?.0;
    }
    Ok(total)
}

/// Trains a fresh classifier with full-batch SGD on class-balanced batches:
/// each step uses `min(#pos, #neg)` samples drawn without replacement from
/// each class.
pub fn refine_classifier(samples: &PixelSampleSet, config: &RefineConfig, shots: usize) -> Result<Refined> {
    refine_steps(samples, config, config.iterations(shots))
}

/// [`refine_classifier`] with an explicit step count.
pub fn refine_steps(samples: &PixelSampleSet, config: &RefineConfig, steps: usize) -> Result<Refined> {
    config.validate()?;
    let (np, nn) = (samples.positives.len(), samples.negatives.len());
    if np == 0 || nn == 0 {
        return Err(Error::DegenerateSamples {
            positives: np,
            negatives: nn,
        });
    }
    let dim = samples.positives[0].feature.len();
    let mut clf = OFBClassifier::new(dim, config.hidden, config.dropout, config.seed);
    let initial_loss = balanced_loss(&clf, samples)?;
    let mut sgd = Sgd::new(config.sgd())?;
    let mut rng = seeds::rng(config.seed, "refine-batches", &[]);
    let m = np.min(nn);
    for t in 0..steps {
        let mut batch: Vec<&PixelSample> = Vec::with_capacity(2 * m);
        for set in [&samples.positives, &samples.negatives] {
            if set.len() == m {
                batch.extend(set.iter());
            } else {
                let mut pick = index::sample(&mut rng, set.len(), m).into_vec();
                pick.sort_unstable();
                batch.extend(pick.into_iter().map(|i| &set[i]));
            }
        }
        let labels: Vec<f32> = (0..2 * m).map(|i| if i < m { 1.0 } else { 0.0 }).collect();
        let (z, caches) = clf.net.forward(&rows(&batch, dim)?, Mode::Train)?;
        let (_, g) = sigmoid_bce_with_logits(z.data(), &labels)?;
        clf.net.backward(&caches, &Tensor::new(vec![2 * m, 1], g)?)?;
        sgd.step(clf.net.params_mut(), t);
    }
    let final_loss = balanced_loss(&clf, samples)?;
    Ok(Refined {
        classifier: clf,
        steps,
        initial_loss,
        final_loss,
    })
}

/// Per-pixel classifier scores upsampled to `image_size`; foreground where
/// the score is strictly above 0.5.
pub fn predict_mask(classifier: &OFBClassifier, query: &FeatureMap, image_size: (usize, usize)) -> Result<Mask> {
    let (c, h, w) = chw(query);
    if c != classifier.input_dim {
        return Err(Error::dim(format!(
            "classifier takes {} inputs, features have {c}",
            classifier.input_dim
        )));
    }
    let hw = h * w;
    let mut data = vec![0f32; hw * c];
    for k in 0..c {
        for p in 0..hw {
            data[p * c + k] = query.data()[k * hw + p];
        }
    }
    let scores = classifier.scores(&Tensor::new(vec![hw, c], data)?)?;
    threshold_map(Tensor::new(vec![1, 1, h, w], scores)?, image_size)
}

fn threshold_map(scores: Tensor, (ih, iw): (usize, usize)) -> Result<Mask> {
    let up = bilinear_upsample(&scores, ih, iw)?;
    Ok(Mask {
        height: ih,
        width: iw,
        data: up.data().iter().map(|&s| (s > 0.5) as u8).collect(),
    })
}

/// Inference variants compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegMode {
    /// Prototype matching thresholded at 0.5.
    Matching,
    /// Classifier trained on support pixels only.
    SrofbSupportOnly,
    /// Classifier trained on support pixels and harvested query pixels.
    SrofbSelfRefined,
}

impl SegMode {
    pub const ALL: [SegMode; 3] = [SegMode::Matching, SegMode::SrofbSupportOnly, SegMode::SrofbSelfRefined];

    pub fn name(self) -> &'static str {
        match self {
            SegMode::Matching => "matching",
            SegMode::SrofbSupportOnly => "srofb_support_only",
            SegMode::SrofbSelfRefined => "srofb_self_refined",
        }
    }
}

/// Support images with masks and a query image.
#[derive(Clone, Debug)]
pub struct Episode {
    pub class_id: u32,
    pub supports: Vec<Image>,
    pub support_masks: Vec<Mask>,
    pub query: Image,
    pub query_mask: Option<Mask>,
}

/// What happened while segmenting one episode.
#[derive(Clone, Debug)]
pub struct EpisodeResult {
    pub mask: Mask,
    /// Mode actually used after any fallback.
    pub used: SegMode,
    pub harvested_positives: usize,
    pub harvested_negatives: usize,
    pub refined: Option<Refined>,
}

/// Segments a query from already-encoded features.
pub fn segment_features(
    query: &FeatureMap,
    supports: &[&FeatureMap],
    support_masks: &[&Mask],
    image_size: (usize, usize),
    config: &RefineConfig,
    mode: SegMode,
) -> Result<EpisodeResult> {
    config.validate()?;
    let protos = compute_mask_prototypes_kshot(supports, support_masks)?;
    let rough = rough_segment(query, &protos, config.temperature)?;
    let matching = |rough: &Tensor| -> Result<EpisodeResult> {
        let (_, h, w) = chw(query);
        let fg = Tensor::new(vec![1, 1, h, w], rough.data()[h * w..].to_vec())?;
        Ok(EpisodeResult {
            mask: threshold_map(fg, image_size)?,
            used: SegMode::Matching,
            harvested_positives: 0,
            harvested_negatives: 0,
            refined: None,
        })
    };
    if mode == SegMode::Matching {
        return matching(&rough);
    }
    let support = gather_support_pixels(supports, support_masks, config)?;
    let mut attempts = Vec::new();
    let (mut hp, mut hn) = (0, 0);
    if mode == SegMode::SrofbSelfRefined {
        let harvested = select_confident_pixels(&rough, query, config)?;
        hp = harvested.positives.len();
        hn = harvested.negatives.len();
        let mut all = support.clone();
        all.extend(harvested);
        attempts.push((SegMode::SrofbSelfRefined, all));
    }
    attempts.push((SegMode::SrofbSupportOnly, support));
    for (used, samples) in attempts {
        match refine_classifier(&samples, config, supports.len()) {
            Ok(refined) => {
                return Ok(EpisodeResult {
                    mask: predict_mask(&refined.classifier, query, image_size)?,
                    used,
                    harvested_positives: hp,
                    harvested_negatives: hn,
                    refined: Some(refined),
                })
            }
            Err(Error::DegenerateSamples { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    let mut out = matching(&rough)?;
    out.harvested_positives = hp;
    out.harvested_negatives = hn;
    Ok(out)
}

/// Encodes an episode with a frozen encoder and segments its query.
pub fn segment_episode(
    episode: &Episode,
    encoder: &EncoderModel,
    config: &RefineConfig,
    mode: SegMode,
) -> Result<EpisodeResult> {
    if episode.supports.is_empty() || episode.supports.len() != episode.support_masks.len() {
        return Err(Error::Data("episode needs matching support images and masks".into()));
    }
    let mut images: Vec<&Image> = episode.supports.iter().collect();
    images.push(&episode.query);
    let feats = encoder.encode_images(&images)?;
    let (query, supports) = feats.split_last().expect("non-empty");
    let supports: Vec<&FeatureMap> = supports.iter().collect();
    let masks: Vec<&Mask> = episode.support_masks.iter().collect();
    segment_features(
        query,
        &supports,
        &masks,
        (episode.query.height, episode.query.width),
        config,
        mode,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn protos_axes() -> MaskPrototypes {
        MaskPrototypes {
            fg: vec![1.0, 0.0],
            bg: vec![0.0, 1.0],
        }
    }

    #[test]
    fn zero_similarity_gives_half_scores() {
        let f = Tensor::new(vec![3, 1, 2], vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let p = MaskPrototypes {
            fg: vec![1.0, 0.0, 0.0],
            bg: vec![0.0, 1.0, 0.0],
        };
        let c = rough_segment(&f, &p, 0.05).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn gap_of_twenty_is_near_certain() {
        let f = Tensor::new(vec![2, 1, 1], vec![1.0, 0.0]).unwrap();
        let c = rough_segment(&f, &protos_axes(), 0.05).unwrap();
        let expected = 1.0 / (1.0 + (-20f64).exp());
        assert!((c.data()[1] as f64 - expected).abs() < 1e-7);
    }

    #[test]
    fn zero_classifier_predicts_background() {
        let mut clf = OFBClassifier::new(2, 4, 0.1, 0);
        for p in clf.net.params_mut() {
            p.weights.fill(0.0);
            p.bias.fill(0.0);
        }
        let f = Tensor::full(&[2, 2, 2], 1.0);
        let m = predict_mask(&clf, &f, (4, 4)).unwrap();
        assert_eq!(m.count(), 0);
        clf.net.layers[3].params.bias.fill(5.0);
        assert_eq!(predict_mask(&clf, &f, (4, 4)).unwrap().count(), 16);
    }

    #[test]
    fn degenerate_samples_are_reported() {
        let s = PixelSampleSet {
            positives: vec![PixelSample {
                feature: vec![1.0],
                origin: Origin::Support,
            }],
            negatives: vec![],
        };
        assert!(matches!(
            refine_classifier(&s, &RefineConfig::default(), 1),
            Err(Error::DegenerateSamples { positives: 1, negatives: 0 })
        ));
    }

    #[test]
    fn schedule_follows_shot_count() {
        let c = RefineConfig::default();
        assert_eq!((c.iterations(1), c.iterations(5)), (10, 100));
        assert_eq!((c.tau_fg, c.tau_bg), (0.7, 0.6));
    }

    #[test]
    fn thresholds_must_be_open_unit_interval() {
        let c = RefineConfig {
            tau_fg: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
