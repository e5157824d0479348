//! Region descriptor corpora and the coarse-to-fine prototype hierarchy.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ftns;
use crate::image::Mask;
use crate::kmeans::{kmeans, KMeansConfig, KMeansResult};
use crate::ops::{l2_normalize, region_means};
use crate::region::RegionMap;
use crate::seeds;
use crate::tensor::{chw, FeatureMap, Tensor};

/// Mask-pooled, L2-normalized feature of one region.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionDescriptor {
    pub vector: Vec<f32>,
    pub image_id: usize,
    /// Background region id, or the class id for a foreground object.
    pub region_id: u32,
    pub foreground: bool,
    /// Number of feature cells pooled.
    pub pixel_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegionCorpus {
    pub fg: Vec<RegionDescriptor>,
    pub bg: Vec<RegionDescriptor>,
    /// Regions or objects dropped because no feature cell covered them.
    pub skipped: usize,
}

impl RegionCorpus {
    pub fn extend(&mut self, other: RegionCorpus) {
        self.fg.extend(other.fg);
        self.bg.extend(other.bg);
        self.skipped += other.skipped;
    }
}

/// Pools one descriptor per background region of `bg_regions` (a
/// background-restricted map at image resolution) and one per annotated
/// object in `objects` (`(class id, mask)` pairs at image resolution).
pub fn extract_region_descriptors(
    features: &FeatureMap,
    bg_regions: &RegionMap,
    objects: &[(u32, Mask)],
    image_id: usize,
) -> Result<RegionCorpus> {
    let (_, h, w) = chw(features);
    let mut corpus = RegionCorpus::default();

    let cells = bg_regions.downsample_nearest(h, w);
    let (means, counts) = region_means(features, &cells, bg_regions.num_regions)?;
    for (id, (m, n)) in means.into_iter().zip(counts).enumerate() {
        match (n, l2_normalize(&m)) {
            (n, Some(vector)) if n > 0 => corpus.bg.push(RegionDescriptor {
                vector,
                image_id,
                region_id: id as u32,
                foreground: false,
                pixel_count: n,
            }),
            _ => corpus.skipped += 1,
        }
    }

    for (class_id, mask) in objects {
        let small = mask.downsample_majority(h, w)?;
        let (means, counts) = region_means(features, &small.as_labels(), 2)?;
        match (counts[1], l2_normalize(&means[1])) {
            (n, Some(vector)) if n > 0 => corpus.fg.push(RegionDescriptor {
                vector,
                image_id,
                region_id: *class_id,
                foreground: true,
                pixel_count: n,
            }),
            _ => corpus.skipped += 1,
        }
    }
    Ok(corpus)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    /// `(foreground, background)` cluster counts, finest level first.
    pub level_sizes: Vec<(usize, usize)>,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            level_sizes: vec![(8, 12), (4, 6), (2, 3)],
            max_iters: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

impl ClusterConfig {
    /// Combined per-level counts 50/25/15 split 40:60 between foreground
    /// and background.
    pub fn pascal() -> Self {
        ClusterConfig {
            level_sizes: vec![(20, 30), (10, 15), (6, 9)],
            ..Default::default()
        }
    }

    /// Combined per-level counts 75/50/25 split 40:60.
    pub fn coco() -> Self {
        ClusterConfig {
            level_sizes: vec![(30, 45), (20, 30), (10, 15)],
            ..Default::default()
        }
    }

    /// Only the finest level of `self`.
    pub fn single_level(&self) -> Self {
        ClusterConfig {
            level_sizes: self.level_sizes[..1].to_vec(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.level_sizes.is_empty() {
            return Err(Error::config("a hierarchy needs at least one level"));
        }
        if self.level_sizes.iter().any(|&(f, b)| f == 0 || b == 0) {
            return Err(Error::config("every level needs at least one prototype per side"));
        }
        if self
            .level_sizes
            .windows(2)
            .any(|w| w[1].0 >= w[0].0 || w[1].1 >= w[0].1)
        {
            return Err(Error::config(format!(
                "level sizes must strictly decrease toward coarser levels: {:?}",
                self.level_sizes
            )));
        }
        Ok(())
    }
}

/// Prototype sets of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeLevel {
    pub fg: Vec<Vec<f32>>,
    pub bg: Vec<Vec<f32>>,
}

impl PrototypeLevel {
    pub fn num_labels(&self) -> usize {
        self.fg.len() + self.bg.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeHierarchy {
    /// Finest level first.
    pub levels: Vec<PrototypeLevel>,
}

/// k-means runs behind one hierarchy level.
#[derive(Clone, Debug)]
pub struct LevelRuns {
    pub fg: KMeansResult,
    pub bg: KMeansResult,
}

#[derive(Serialize, Deserialize)]
struct HierarchyManifest {
    levels: usize,
    sizes: Vec<(usize, usize)>,
    channels: usize,
    seed: u64,
    encoder_checkpoint_hash: String,
}

fn matrix(rows: &[Vec<f32>]) -> Result<Tensor> {
    let c = rows.first().map_or(0, Vec::len);
    Tensor::new(vec![rows.len(), c], rows.concat())
}

fn rows(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    if t.ndim() != 2 {
        return Err(Error::dim(format!("prototype matrix must be 2-D, got {:?}", t.shape())));
    }
    Ok(t.data().chunks(t.dim(1).max(1)).map(<[f32]>::to_vec).collect())
}

impl PrototypeHierarchy {
    pub fn level_sizes(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|l| (l.fg.len(), l.bg.len())).collect()
    }

    pub fn channels(&self) -> usize {
        self.levels[0].fg[0].len()
    }

    /// Label count per level (`K_fg + K_bg`).
    pub fn label_counts(&self) -> Vec<usize> {
        self.levels.iter().map(PrototypeLevel::num_labels).collect()
    }

    /// Writes one FTNS matrix per (level, side) plus `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>, seed: u64, encoder_checkpoint_hash: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, level) in self.levels.iter().enumerate() {
            ftns::write_tensor(dir.join(format!("level{}_fg.ftns", i + 1)), &matrix(&level.fg)?)?;
            ftns::write_tensor(dir.join(format!("level{}_bg.ftns", i + 1)), &matrix(&level.bg)?)?;
        }
        let manifest = HierarchyManifest {
            levels: self.levels.len(),
            sizes: self.level_sizes(),
            channels: self.channels(),
            seed,
            encoder_checkpoint_hash: encoder_checkpoint_hash.to_string(),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    /// Loads a saved hierarchy and the encoder hash it was built from.
    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, String)> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: HierarchyManifest = serde_json::from_str(&text)?;
        let mut levels = Vec::with_capacity(manifest.levels);
        for i in 0..manifest.levels {
            let fg = rows(&ftns::read_tensor(dir.join(format!("level{}_fg.ftns", i + 1)))?)?;
            let bg = rows(&ftns::read_tensor(dir.join(format!("level{}_bg.ftns", i + 1)))?)?;
            if (fg.len(), bg.len()) != manifest.sizes[i] {
                return Err(Error::Data(format!("level {} sizes disagree with manifest", i + 1)));
            }
            levels.push(PrototypeLevel { fg, bg });
        }
        Ok((PrototypeHierarchy { levels }, manifest.encoder_checkpoint_hash))
    }
}

fn cluster(points: &[Vec<f32>], k: usize, config: &ClusterConfig, level: usize, side: u64) -> Result<KMeansResult> {
    kmeans(
        points,
        k,
        &KMeansConfig {
            max_iters: config.max_iters,
            tol: config.tol,
            seed: seeds::derive(config.seed, "hierarchy", &[level as u64, side]),
        },
    )
}

/// Clusters the corpus into a prototype hierarchy. Level 1 clusters the raw
/// descriptors; each coarser level clusters the prototypes of the level
/// below. Foreground and background are clustered separately.
pub fn build_hierarchy(corpus: &RegionCorpus, config: &ClusterConfig) -> Result<PrototypeHierarchy> {
    build_hierarchy_detailed(corpus, config).map(|(h, _)| h)
}

/// [`build_hierarchy`] that also returns the k-means runs per level.
pub fn build_hierarchy_detailed(
    corpus: &RegionCorpus,
    config: &ClusterConfig,
) -> Result<(PrototypeHierarchy, Vec<LevelRuns>)> {
    config.validate()?;
    let (kf, kb) = config.level_sizes[0];
    if corpus.fg.len() < kf || corpus.bg.len() < kb {
        return Err(Error::config(format!(
            "corpus has {} foreground and {} background descriptors but level 1 asks for ({kf}, {kb}); use smaller level sizes",
            corpus.fg.len(),
            corpus.bg.len()
        )));
    }
    let mut fg_points: Vec<Vec<f32>> = corpus.fg.iter().map(|d| d.vector.clone()).collect();
    let mut bg_points: Vec<Vec<f32>> = corpus.bg.iter().map(|d| d.vector.clone()).collect();
    let mut levels = Vec::new();
    let mut runs = Vec::new();
    for (l, &(kf, kb)) in config.level_sizes.iter().enumerate() {
        let fg = cluster(&fg_points, kf, config, l, 0)?;
        let bg = cluster(&bg_points, kb, config, l, 1)?;
        fg_points = fg.centers.clone();
        bg_points = bg.centers.clone();
        levels.push(PrototypeLevel {
            fg: fg.centers.clone(),
            bg: bg.centers.clone(),
        });
        runs.push(LevelRuns { fg, bg });
    }
    Ok((PrototypeHierarchy { levels }, runs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::mask_average_pool;
    use crate::region::FOREGROUND;

    fn descriptor(v: Vec<f32>, fg: bool) -> RegionDescriptor {
        RegionDescriptor {
            vector: l2_normalize(&v).unwrap(),
            image_id: 0,
            region_id: 0,
            foreground: fg,
            pixel_count: 1,
        }
    }

    fn small_corpus() -> RegionCorpus {
        let mut c = RegionCorpus::default();
        for i in 0..10 {
            let a = i as f32 * 0.3;
            c.fg.push(descriptor(vec![a.cos(), a.sin(), 0.2], true));
            c.bg.push(descriptor(vec![0.1, a.sin(), a.cos()], false));
        }
        c
    }

    #[test]
    fn counts_three_bg_and_one_fg() {
        let features = Tensor::new(vec![2, 2, 4], (0..16).map(|v| v as f32 + 1.0).collect()).unwrap();
        // 4x8 image: fg object in the top-left 2x4 block, three bg regions.
        let labels: Vec<u32> = (0..32)
            .map(|i| {
                let (y, x) = (i / 8, i % 8);
                if y < 2 && x < 4 {
                    FOREGROUND
                } else if y < 2 {
                    0
                } else if x < 4 {
                    1
                } else {
                    2
                }
            })
            .collect();
        let bg = RegionMap {
            height: 4,
            width: 8,
            labels,
            num_regions: 3,
        };
        let obj = Mask::from_fn(4, 8, |y, x| y < 2 && x < 4);
        let c = extract_region_descriptors(&features, &bg, &[(5, obj)], 7).unwrap();
        assert_eq!((c.fg.len(), c.bg.len(), c.skipped), (1, 3, 0));
        assert_eq!(c.fg[0].region_id, 5);
        let cells = bg.downsample_nearest(2, 4);
        for d in &c.bg {
            let m = mask_average_pool(&features, &cells, d.region_id).unwrap();
            let m = l2_normalize(&m).unwrap();
            for (a, b) in m.iter().zip(&d.vector) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_field_gives_identical_descriptors() {
        let features = Tensor::full(&[3, 4, 4], 2.0);
        let labels: Vec<u32> = (0..64).map(|i| ((i % 8) / 4) as u32).collect();
        let bg = RegionMap {
            height: 8,
            width: 8,
            labels,
            num_regions: 2,
        };
        let c = extract_region_descriptors(&features, &bg, &[(0, Mask::from_fn(8, 8, |y, _| y < 4))], 0).unwrap();
        let v = &c.fg[0].vector;
        assert!(c.bg.iter().all(|d| &d.vector == v));
    }

    #[test]
    fn level_counts_and_unit_norm() {
        let cfg = ClusterConfig {
            level_sizes: vec![(4, 4), (2, 2), (1, 1)],
            ..Default::default()
        };
        let h = build_hierarchy(&small_corpus(), &cfg).unwrap();
        assert_eq!(h.level_sizes(), vec![(4, 4), (2, 2), (1, 1)]);
        for l in &h.levels {
            for p in l.fg.iter().chain(&l.bg) {
                let n: f32 = p.iter().map(|v| v * v).sum::<f32>().sqrt();
                assert!((n - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rejects_small_corpus_and_bad_sizes() {
        let cfg = ClusterConfig {
            level_sizes: vec![(11, 2)],
            ..Default::default()
        };
        assert!(matches!(build_hierarchy(&small_corpus(), &cfg), Err(Error::Config(_))));
        let cfg = ClusterConfig {
            level_sizes: vec![(4, 4), (4, 2)],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ClusterConfig {
            level_sizes: vec![(3, 3), (2, 1)],
            ..Default::default()
        };
        let h = build_hierarchy(&small_corpus(), &cfg).unwrap();
        h.save(dir.path(), 0, "abc").unwrap();
        let (back, hash) = PrototypeHierarchy::load(dir.path()).unwrap();
        assert_eq!(back, h);
        assert_eq!(hash, "abc");
    }
}
