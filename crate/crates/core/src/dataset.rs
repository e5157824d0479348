//! Procedural shape-and-texture dataset with base/novel folds.
//!
//! Layout under the dataset root:
//!
//! ```text
//! index.json
//! fold{f}/train/{id:05}.ppm        image
//! fold{f}/train/{id:05}_label.pgm  annotated base objects, value = class + 1
//! fold{f}/diag/{id:05}_distractor.pgm  unannotated novel object (diagnostics only)
//! test/{id:05}.ppm, test/{id:05}_label.pgm
//! ```

use std::collections::BTreeMap;
use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{read_gray, Image, Mask};
use crate::pnm;
use crate::seeds;
use crate::spfl::TrainImage;
use crate::srofb::Episode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Ring,
    Cross,
    Star,
    Bar,
    Ellipse,
}

impl Shape {
    pub const ALL: [Shape; 8] = [
        Shape::Circle,
        Shape::Square,
        Shape::Triangle,
        Shape::Ring,
        Shape::Cross,
        Shape::Star,
        Shape::Bar,
        Shape::Ellipse,
    ];

    /// Membership of the offset `(x, y)` (already rotated into the shape
    /// frame) for a shape of radius `r`.
    fn contains(self, x: f32, y: f32, r: f32) -> bool {
        let d = (x * x + y * y).sqrt();
        match self {
            Shape::Circle => d < r,
            Shape::Square => x.abs() < 0.8 * r && y.abs() < 0.8 * r,
            Shape::Triangle => {
                // Equilateral, circumradius r, apex up.
                let h = 1.5 * r;
                let yy = y + 0.5 * r;
                yy > 0.0 && yy < h && x.abs() < (h - yy) / 3f32.sqrt()
            }
            Shape::Ring => d < r && d > 0.55 * r,
            Shape::Cross => (x.abs() < 0.3 * r && y.abs() < r) || (y.abs() < 0.3 * r && x.abs() < r),
            Shape::Star => d < r * (0.62 + 0.38 * (5.0 * y.atan2(x)).cos()),
            Shape::Bar => x.abs() < r && y.abs() < 0.38 * r,
            Shape::Ellipse => (x / r).powi(2) + (y / (0.58 * r)).powi(2) < 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Ring => "ring",
            Shape::Cross => "cross",
            Shape::Star => "star",
            Shape::Bar => "bar",
            Shape::Ellipse => "ellipse",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    HorizontalStripes,
    VerticalStripes,
    DiagonalStripes,
    Checker,
    Dots,
    Waves,
    Speckle,
    Grid,
}

impl Pattern {
    pub const ALL: [Pattern; 8] = [
        Pattern::HorizontalStripes,
        Pattern::Checker,
        Pattern::Dots,
        Pattern::VerticalStripes,
        Pattern::Waves,
        Pattern::Grid,
        Pattern::DiagonalStripes,
        Pattern::Speckle,
    ];

    /// Mixing weight in [0, 1] between the two texture colors at `(x, y)`
    /// relative to the object center.
    fn weight(self, x: f32, y: f32, period: f32, phase: f32) -> f32 {
        let s = |v: f32| 0.5 + 0.5 * (2.0 * PI * v / period + phase).sin();
        match self {
            Pattern::HorizontalStripes => s(y),
            Pattern::VerticalStripes => s(x),
            Pattern::DiagonalStripes => s((x + y) * std::f32::consts::FRAC_1_SQRT_2),
            Pattern::Checker => {
                let a = (2.0 * PI * x / period + phase).sin();
                let b = (2.0 * PI * y / period).sin();
                (a * b > 0.0) as u32 as f32
            }
            Pattern::Dots => {
                let fx = (x / period + phase).rem_euclid(1.0) - 0.5;
                let fy = (y / period).rem_euclid(1.0) - 0.5;
                ((fx * fx + fy * fy).sqrt() < 0.3) as u32 as f32
            }
            Pattern::Waves => s((x * x + y * y).sqrt()),
            Pattern::Speckle => {
                let h = hash2(x.floor() as i32 / 2, y.floor() as i32 / 2, phase.to_bits());
                (h & 1) as f32
            }
            Pattern::Grid => {
                let fx = (x / period + phase).rem_euclid(1.0);
                let fy = (y / period).rem_euclid(1.0);
                (fx < 0.3 || fy < 0.3) as u32 as f32
            }
        }
    }
}

fn hash2(x: i32, y: i32, salt: u32) -> u32 {
    let mut h = (x as u32).wrapping_mul(0x8da6_b343) ^ (y as u32).wrapping_mul(0xd816_3841) ^ salt;
    h ^= h >> 13;
    h = h.wrapping_mul(0x5bd1_e995);
    h ^ (h >> 15)
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundFamily {
    /// Muted gradient, soft "stuff" patches and pixel noise.
    Stuff,
    /// Muted gradient and pixel noise only.
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticDatasetConfig {
    pub image_size: usize,
    pub num_classes: usize,
    /// Training images per base class in each fold.
    pub images_per_class: usize,
    /// Test-pool images whose main object is each class.
    pub test_images_per_class: usize,
    pub folds: usize,
    pub novel_per_fold: usize,
    /// Chance that a training image carries an unannotated novel-class
    /// object, and that a test image carries a second object.
    pub distractor_probability: f64,
    pub background: BackgroundFamily,
    pub min_radius: f32,
    pub max_radius: f32,
    pub noise_std: f32,
    /// Per-image, per-channel illumination gain drawn from `1 ± j`.
    pub illumination_jitter: f32,
    /// Per-object, per-channel color gain drawn from `1 ± j`.
    pub color_jitter: f32,
    pub seed: u64,
}

impl Default for SyntheticDatasetConfig {
    fn default() -> Self {
        SyntheticDatasetConfig {
            image_size: 64,
            num_classes: 8,
            images_per_class: 200,
            test_images_per_class: 50,
            folds: 4,
            novel_per_fold: 2,
            distractor_probability: 0.5,
            background: BackgroundFamily::Stuff,
            min_radius: 10.0,
            max_radius: 16.0,
            noise_std: 0.03,
            illumination_jitter: 0.25,
            color_jitter: 0.15,
            seed: 0,
        }
    }
}

impl SyntheticDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds == 0 || self.novel_per_fold == 0 || self.folds * self.novel_per_fold > self.num_classes {
            return Err(Error::config("folds x novel classes per fold must not exceed the class count"));
        }
        if self.num_classes > Shape::ALL.len() {
            return Err(Error::config(format!("at most {} classes are available", Shape::ALL.len())));
        }
        if !(0.0..=1.0).contains(&self.distractor_probability) {
            return Err(Error::config("distractor probability must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.illumination_jitter) || !(0.0..1.0).contains(&self.color_jitter) {
            return Err(Error::config("jitter amplitudes must lie in [0, 1)"));
        }
        if self.images_per_class < 2 || self.test_images_per_class < 2 {
            return Err(Error::config("need at least two images per class"));
        }
        if !(self.min_radius > 2.0 && self.min_radius <= self.max_radius)
            || 2.0 * self.max_radius + 4.0 > self.image_size as f32
        {
            return Err(Error::config("object radii must fit inside the image"));
        }
        Ok(())
    }

    pub fn novel_classes(&self, fold: usize) -> Vec<u32> {
        (0..self.novel_per_fold).map(|i| (fold * self.novel_per_fold + i) as u32).collect()
    }

    pub fn base_classes(&self, fold: usize) -> Vec<u32> {
        let novel = self.novel_classes(fold);
        (0..self.num_classes as u32).filter(|c| !novel.contains(c)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
    pub shape: Shape,
    pub pattern: Pattern,
    pub colors: [[f32; 3]; 2],
    pub period: f32,
}

/// The appearance of class `c`: shape, texture pattern, two colors.
pub fn class_info(c: u32) -> ClassInfo {
    let i = c as usize % Shape::ALL.len();
    let hue = i as f32 / Shape::ALL.len() as f32 + 0.03;
    ClassInfo {
        id: c,
        name: format!("{}_{}", Shape::ALL[i].name(), i),
        shape: Shape::ALL[i],
        pattern: Pattern::ALL[i],
        colors: [hsv(hue, 0.65, 0.85), hsv(hue + 0.5, 0.45, 0.45)],
        period: 4.0 + (i % 3) as f32,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistractorRecord {
    pub class_id: u32,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: usize,
    pub image: String,
    /// PGM with value `class + 1` on annotated objects.
    pub label: String,
    /// Annotated classes, main object first.
    pub classes: Vec<u32>,
    pub distractor: Option<DistractorRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub novel: Vec<u32>,
    pub base: Vec<u32>,
    pub train: Vec<ImageRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub config: SyntheticDatasetConfig,
    pub classes: Vec<ClassInfo>,
    pub folds: Vec<FoldRecord>,
    pub test: Vec<ImageRecord>,
}

struct Placed {
    class: u32,
    cx: f32,
    cy: f32,
    r: f32,
    angle: f32,
    phase: f32,
}

/// One rendered image: pixels, the per-pixel object index (`0` for
/// background, `j + 1` for the j-th placed object) and the objects.
struct Rendered {
    image: Image,
    owner: Vec<u8>,
    objects: Vec<Placed>,
}

fn place<R: Rng>(classes: &[u32], cfg: &SyntheticDatasetConfig, rng: &mut R) -> Vec<Placed> {
    let s = cfg.image_size as f32;
    let mut out: Vec<Placed> = Vec::new();
    for &class in classes {
        for attempt in 0..200 {
            let r = rng.random_range(cfg.min_radius..=cfg.max_radius);
            let cx = rng.random_range(r + 1.0..s - r - 1.0);
            let cy = rng.random_range(r + 1.0..s - r - 1.0);
            let clear = out
                .iter()
                .all(|o| ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt() > o.r + r + 1.0);
            if clear || attempt == 199 {
                out.push(Placed {
                    class,
                    cx,
                    cy,
                    r,
                    angle: rng.random_range(0.0..2.0 * PI),
                    phase: rng.random_range(0.0..2.0 * PI),
                });
                break;
            }
        }
    }
    out
}

fn gains<R: Rng>(jitter: f32, rng: &mut R) -> [f32; 3] {
    if jitter == 0.0 {
        return [1.0; 3];
    }
    [0; 3].map(|_| rng.random_range(1.0 - jitter..=1.0 + jitter))
}

fn render<R: Rng>(classes: &[u32], cfg: &SyntheticDatasetConfig, rng: &mut R) -> Rendered {
    let n = cfg.image_size;
    let base_hue = rng.random::<f32>();
    let c0 = hsv(base_hue, rng.random_range(0.05..0.25), rng.random_range(0.35..0.75));
    let c1 = hsv(base_hue + rng.random_range(-0.15..0.15), rng.random_range(0.05..0.25), rng.random_range(0.35..0.75));
    let grad_angle = rng.random_range(0.0..2.0 * PI);
    let (ga, gb) = (grad_angle.cos(), grad_angle.sin());
    let mut pixels = vec![0f32; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            let t = 0.5 + 0.5 * ((x as f32 / n as f32 - 0.5) * ga + (y as f32 / n as f32 - 0.5) * gb) * 1.4;
            let t = t.clamp(0.0, 1.0);
            for k in 0..3 {
                pixels[(y * n + x) * 3 + k] = c0[k] * (1.0 - t) + c1[k] * t;
            }
        }
    }
    if cfg.background == BackgroundFamily::Stuff {
        let patches = rng.random_range(1..=3);
        for _ in 0..patches {
            let col = hsv(rng.random::<f32>(), rng.random_range(0.05..0.3), rng.random_range(0.25..0.8));
            let (px, py) = (rng.random_range(0.0..n as f32), rng.random_range(0.0..n as f32));
            let (rx, ry) = (rng.random_range(8.0..26.0f32), rng.random_range(8.0..26.0f32));
            let period = rng.random_range(6.0..12.0f32);
            let salt = rng.random::<u32>();
            for y in 0..n {
                for x in 0..n {
                    let d = ((x as f32 - px) / rx).powi(2) + ((y as f32 - py) / ry).powi(2);
                    if d < 1.0 {
                        let mottle = 0.9 + 0.1 * (hash2(x as i32 / period as i32, y as i32 / period as i32, salt) & 1) as f32;
                        for k in 0..3 {
                            pixels[(y * n + x) * 3 + k] = col[k] * mottle;
                        }
                    }
                }
            }
        }
    }
    let objects = place(classes, cfg, rng);
    let mut owner = vec![0u8; n * n];
    for (j, o) in objects.iter().enumerate() {
        let info = class_info(o.class);
        let cast = gains(cfg.color_jitter, rng);
        let colors = info.colors.map(|c| [0, 1, 2].map(|k| (c[k] * cast[k]).min(1.0)));
        let (ca, sa) = (o.angle.cos(), o.angle.sin());
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f32 + 0.5 - o.cx, y as f32 + 0.5 - o.cy);
                let (rx, ry) = (dx * ca + dy * sa, -dx * sa + dy * ca);
                if info.shape.contains(rx, ry, o.r) {
                    let w = info.pattern.weight(dx, dy, info.period, o.phase);
                    for k in 0..3 {
                        pixels[(y * n + x) * 3 + k] = colors[0][k] * w + colors[1][k] * (1.0 - w);
                    }
                    owner[y * n + x] = (j + 1) as u8;
                }
            }
        }
    }
    let light = gains(cfg.illumination_jitter, rng);
    let noise = Normal::new(0.0f32, cfg.noise_std.max(0.0)).expect("valid std");
    for (i, v) in pixels.iter_mut().enumerate() {
        *v = (*v * light[i % 3] + noise.sample(rng)).clamp(0.0, 1.0);
    }
    Rendered {
        image: Image::new(n, n, pixels).expect("pixels in range"),
        owner,
        objects,
    }
}

fn write_label(path: &Path, owner: &[u8], objects: &[Placed], keep: impl Fn(usize) -> bool, n: usize) -> Result<()> {
    let bytes: Vec<u8> = owner
        .iter()
        .map(|&o| {
            if o > 0 && keep(o as usize - 1) {
                objects[o as usize - 1].class as u8 + 1
            } else {
                0
            }
        })
        .collect();
    pnm::write(path, n, n, 1, &bytes)
}

/// Renders every split and writes images, labels and `index.json`.
pub fn generate_synthetic_dataset(config: &SyntheticDatasetConfig, root: impl AsRef<Path>) -> Result<DatasetIndex> {
    config.validate()?;
    let root = root.as_ref();
    let n = config.image_size;
    let mut folds = Vec::with_capacity(config.folds);
    for f in 0..config.folds {
        let novel = config.novel_classes(f);
        let base = config.base_classes(f);
        let dir = root.join(format!("fold{f}"));
        fs::create_dir_all(dir.join("train")).map_err(|e| Error::io(dir.join("train"), e))?;
        fs::create_dir_all(dir.join("diag")).map_err(|e| Error::io(dir.join("diag"), e))?;
        let jobs: Vec<(usize, u32)> = base
            .iter()
            .flat_map(|&c| (0..config.images_per_class).map(move |i| (c, i)))
            .enumerate()
            .map(|(id, (c, _))| (id, c))
            .collect();
        let records = jobs
            .par_iter()
            .map(|&(id, class)| -> Result<ImageRecord> {
                let mut rng = seeds::rng(config.seed, "train-image", &[f as u64, id as u64]);
                let mut classes = vec![class];
                let distractor = rng.random_bool(config.distractor_probability);
                if distractor {
                    classes.push(novel[rng.random_range(0..novel.len())]);
                }
                let r = render(&classes, config, &mut rng);
                let image = format!("fold{f}/train/{id:05}.ppm");
                let label = format!("fold{f}/train/{id:05}_label.pgm");
                r.image.write_ppm(root.join(&image))?;
                write_label(&root.join(&label), &r.owner, &r.objects, |j| j == 0, n)?;
                let distractor = if distractor {
                    let mask = format!("fold{f}/diag/{id:05}_distractor.pgm");
                    write_label(&root.join(&mask), &r.owner, &r.objects, |j| j == 1, n)?;
                    Some(DistractorRecord {
                        class_id: classes[1],
                        mask,
                    })
                } else {
                    None
                };
                Ok(ImageRecord {
                    id,
                    image,
                    label,
                    classes: vec![class],
                    distractor,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        folds.push(FoldRecord {
            fold: f,
            novel,
            base,
            train: records,
        });
    }

    fs::create_dir_all(root.join("test")).map_err(|e| Error::io(root.join("test"), e))?;
    let jobs: Vec<(usize, u32)> = (0..config.num_classes as u32)
        .flat_map(|c| (0..config.test_images_per_class).map(move |_| c))
        .enumerate()
        .collect();
    let test = jobs
        .par_iter()
        .map(|&(id, class)| -> Result<ImageRecord> {
            let mut rng = seeds::rng(config.seed, "test-image", &[id as u64]);
            let mut classes = vec![class];
            if rng.random_bool(config.distractor_probability) {
                let mut other = rng.random_range(0..config.num_classes as u32 - 1);
                if other >= class {
                    other += 1;
                }
                classes.push(other);
            }
            let r = render(&classes, config, &mut rng);
            let image = format!("test/{id:05}.ppm");
            let label = format!("test/{id:05}_label.pgm");
            r.image.write_ppm(root.join(&image))?;
            write_label(&root.join(&label), &r.owner, &r.objects, |_| true, n)?;
            Ok(ImageRecord {
                id,
                image,
                label,
                classes,
                distractor: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let index = DatasetIndex {
        config: config.clone(),
        classes: (0..config.num_classes as u32).map(class_info).collect(),
        folds,
        test,
    };
    let path = root.join("index.json");
    fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

/// A generated dataset opened from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub index: DatasetIndex,
}

/// Per-pixel class labels (`class + 1`, `0` for background).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let (w, h, _, data) = read_gray(path)?;
        Ok(LabelMap {
            height: h,
            width: w,
            data,
        })
    }

    pub fn class_mask(&self, class: u32) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| (v as u32 == class + 1) as u8).collect(),
        }
    }
}

impl Dataset {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join("index.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Dataset {
            index: serde_json::from_str(&text)?,
            root,
        })
    }

    pub fn fold(&self, fold: usize) -> Result<&FoldRecord> {
        self.index
            .folds
            .get(fold)
            .ok_or_else(|| Error::config(format!("dataset has {} folds, asked for {fold}", self.index.folds.len())))
    }

    pub fn read_image(&self, record: &ImageRecord) -> Result<Image> {
        Image::read_ppm(self.root.join(&record.image))
    }

    pub fn read_labels(&self, record: &ImageRecord) -> Result<LabelMap> {
        LabelMap::read(self.root.join(&record.label))
    }

    /// Training images of `fold` with their base-class annotations.
    pub fn train_images(&self, fold: usize) -> Result<Vec<TrainImage>> {
        let fr = self.fold(fold)?;
        fr.train
            .par_iter()
            .map(|r| {
                let labels = self.read_labels(r)?;
                let objects = r
                    .classes
                    .iter()
                    .filter(|c| fr.base.contains(c))
                    .map(|&c| (c, labels.class_mask(c)))
                    .collect();
                Ok(TrainImage {
                    image: self.read_image(r)?,
                    objects,
                })
            })
            .collect()
    }

    /// Diagnostic mask of the unannotated object in a training image.
    pub fn distractor_mask(&self, fold: usize, id: usize) -> Result<Option<Mask>> {
        let fr = self.fold(fold)?;
        let r = fr
            .train
            .get(id)
            .ok_or_else(|| Error::Data(format!("fold {fold} has no training image {id}")))?;
        r.distractor
            .as_ref()
            .map(|d| Mask::read_pgm(self.root.join(&d.mask)))
            .transpose()
    }

    /// Test-pool images containing `class`, in index order.
    pub fn test_images_with(&self, class: u32) -> Vec<&ImageRecord> {
        self.index.test.iter().filter(|r| r.classes.contains(&class)).collect()
    }

    /// Draws `n` episodes of fold `fold`: a novel class uniformly, then
    /// `k_shot` supports and one query, all distinct images.
    pub fn sample_episodes(&self, fold: usize, k_shot: usize, n: usize, seed: u64) -> Result<Vec<Episode>> {
        Ok(self
            .sample_episode_refs(fold, k_shot, n, seed)?
            .into_par_iter()
            .map(|e| self.materialize(&e))
            .collect::<Result<Vec<_>>>()?)
    }

    /// Episode draws as `(class, support ids, query id)` into the test pool.
    pub fn sample_episode_refs(&self, fold: usize, k_shot: usize, n: usize, seed: u64) -> Result<Vec<EpisodeRef>> {
        if k_shot == 0 {
            return Err(Error::config("k_shot must be at least 1"));
        }
        let novel = &self.fold(fold)?.novel;
        let pools: BTreeMap<u32, Vec<usize>> = novel
            .iter()
            .map(|&c| (c, self.test_images_with(c).iter().map(|r| r.id).collect()))
            .collect();
        for (c, p) in &pools {
            if p.len() < k_shot + 1 {
                return Err(Error::Data(format!(
                    "class {c} has {} test images, {} needed",
                    p.len(),
                    k_shot + 1
                )));
            }
        }
        let mut rng: ChaCha8Rng = seeds::rng(seed, "episodes", &[fold as u64, k_shot as u64]);
        Ok((0..n)
            .map(|_| {
                let class = novel[rng.random_range(0..novel.len())];
                let pool = &pools[&class];
                let pick = index::sample(&mut rng, pool.len(), k_shot + 1).into_vec();
                EpisodeRef {
                    class_id: class,
                    supports: pick[..k_shot].iter().map(|&i| pool[i]).collect(),
                    query: pool[pick[k_shot]],
                }
            })
            .collect())
    }

    pub fn materialize(&self, e: &EpisodeRef) -> Result<Episode> {
        let load = |id: usize| -> Result<(Image, Mask)> {
            let r = &self.index.test[id];
            Ok((self.read_image(r)?, self.read_labels(r)?.class_mask(e.class_id)))
        };
        let mut supports = Vec::new();
        let mut support_masks = Vec::new();
        for &s in &e.supports {
            let (i, m) = load(s)?;
            supports.push(i);
            support_masks.push(m);
        }
        let (query, qm) = load(e.query)?;
        Ok(Episode {
            class_id: e.class_id,
            supports,
            support_masks,
            query,
            query_mask: Some(qm),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeRef {
    pub class_id: u32,
    pub supports: Vec<usize>,
    pub query: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticDatasetConfig {
        SyntheticDatasetConfig {
            images_per_class: 3,
            test_images_per_class: 4,
            ..Default::default()
        }
    }

    #[test]
    fn fold_classes_partition() {
        let c = SyntheticDatasetConfig::default();
        assert_eq!(c.novel_classes(1), vec![2, 3]);
        assert_eq!(c.base_classes(1), vec![0, 1, 4, 5, 6, 7]);
        let bad = SyntheticDatasetConfig {
            folds: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn shapes_are_non_trivial() {
        for s in Shape::ALL {
            let mut inside = 0;
            for y in -20..20 {
                for x in -20..20 {
                    inside += s.contains(x as f32, y as f32, 14.0) as usize;
                }
            }
            assert!(inside > 150 && inside < 900, "{s:?}: {inside}");
        }
    }

    #[test]
    fn generation_is_deterministic_and_hygienic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ia = generate_synthetic_dataset(&small(), a.path()).unwrap();
        let ib = generate_synthetic_dataset(&small(), b.path()).unwrap();
        assert_eq!(ia, ib);
        for r in &ia.folds[2].train {
            assert_eq!(
                fs::read(a.path().join(&r.image)).unwrap(),
                fs::read(b.path().join(&r.image)).unwrap()
            );
        }
        let ds = Dataset::load(a.path()).unwrap();
        for f in 0..4 {
            let fr = ds.fold(f).unwrap();
            for (r, t) in fr.train.iter().zip(ds.train_images(f).unwrap()) {
                assert!(r.classes.iter().all(|c| !fr.novel.contains(c)));
                let labels = ds.read_labels(r).unwrap();
                assert!(labels.data.iter().all(|&v| v == 0 || !fr.novel.contains(&(v as u32 - 1))));
                assert!(t.objects.iter().all(|(c, m)| fr.base.contains(c) && m.count() > 0));
            }
        }
    }

    #[test]
    fn zero_distractor_probability_plants_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticDatasetConfig {
            distractor_probability: 0.0,
            ..small()
        };
        let idx = generate_synthetic_dataset(&cfg, dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        for f in &idx.folds {
            for r in &f.train {
                assert!(r.distractor.is_none());
                assert!(ds.distractor_mask(f.fold, r.id).unwrap().is_none());
            }
        }
    }

    #[test]
    fn episodes_are_disjoint_and_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(&small(), dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        let a = ds.sample_episode_refs(0, 2, 20, 5).unwrap();
        assert_eq!(a, ds.sample_episode_refs(0, 2, 20, 5).unwrap());
        for e in &a {
            assert_eq!(e.supports.len(), 2);
            assert!(!e.supports.contains(&e.query));
            assert!(ds.index.folds[0].novel.contains(&e.class_id));
        }
        let eps = ds.sample_episodes(0, 1, 3, 5).unwrap();
        for e in &eps {
            assert!(e.support_masks[0].count() > 0 && e.query_mask.as_ref().unwrap().count() > 0);
        }
        assert!(matches!(ds.sample_episode_refs(0, 40, 1, 0), Err(Error::Data(_))));
    }
}
