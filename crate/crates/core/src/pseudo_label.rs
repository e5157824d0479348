//! Per-pixel pseudo labels from nearest-prototype cosine matching.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ftns::{self, LabelTensor};
use crate::image::Mask;
use crate::prototypes::PrototypeHierarchy;
use crate::tensor::{chw, FeatureMap};

/// Pseudo label maps of one image at feature resolution, finest level
/// first. At level `l`, ids `0..K_fg` are foreground prototypes and
/// `K_fg..K_fg+K_bg` are background prototypes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabelStack {
    pub height: usize,
    pub width: usize,
    pub levels: Vec<Vec<u32>>,
    /// `(K_fg, K_bg)` per level.
    pub label_space: Vec<(usize, usize)>,
}

impl PseudoLabelStack {
    pub fn num_labels(&self, level: usize) -> usize {
        let (f, b) = self.label_space[level];
        f + b
    }

    /// Checks the label-space partition against the foreground mask used
    /// to build the stack.
    pub fn verify_partition(&self, fg: &Mask) -> Result<()> {
        for (l, labels) in self.levels.iter().enumerate() {
            let (kf, kb) = self.label_space[l];
            for (&lab, &m) in labels.iter().zip(&fg.data) {
                let lab = lab as usize;
                let ok = if m != 0 { lab < kf } else { (kf..kf + kb).contains(&lab) };
                if !ok {
                    return Err(Error::Data(format!("label {lab} on the wrong side at level {}", l + 1)));
                }
            }
        }
        Ok(())
    }
}

fn unit_rows(rows: &[Vec<f32>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let n = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            let inv = if n < 1e-12 { 0.0 } else { 1.0 / n };
            r.iter().map(|&v| v as f64 * inv).collect()
        })
        .collect()
}

/// Index of the most cosine-similar row (lowest index on ties).
fn best_match(pixel: &[f64], protos: &[Vec<f64>]) -> usize {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (j, p) in protos.iter().enumerate() {
        let s: f64 = pixel.iter().zip(p).map(|(a, b)| a * b).sum();
        if s > best.1 {
            best = (j, s);
        }
    }
    best.0
}

/// Labels every feature cell at every hierarchy level. `fg_mask` may be
/// given at feature resolution or at any block multiple of it, in which
/// case it is majority-downsampled (ties to background).
pub fn assign_pseudo_labels(
    features: &FeatureMap,
    fg_mask: &Mask,
    hierarchy: &PrototypeHierarchy,
) -> Result<PseudoLabelStack> {
    let (c, h, w) = chw(features);
    if hierarchy.channels() != c {
        return Err(Error::dim(format!(
            "prototypes have {} channels, features have {c}",
            hierarchy.channels()
        )));
    }
    let mask = if (fg_mask.height, fg_mask.width) == (h, w) {
        fg_mask.clone()
    } else {
        fg_mask.downsample_majority(h, w)?
    };
    let hw = h * w;
    let data = features.data();
    let pixels: Vec<Vec<f64>> = (0..hw)
        .map(|p| {
            let v: Vec<f64> = (0..c).map(|k| data[k * hw + p] as f64).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let inv = if n < 1e-12 { 0.0 } else { 1.0 / n };
            v.into_iter().map(|x| x * inv).collect()
        })
        .collect();
    let mut levels = Vec::with_capacity(hierarchy.levels.len());
    for level in &hierarchy.levels {
        let fg = unit_rows(&level.fg);
        let bg = unit_rows(&level.bg);
        let offset = fg.len() as u32;
        let labels = pixels
            .iter()
            .zip(&mask.data)
            .map(|(p, &m)| {
                if m != 0 {
                    best_match(p, &fg) as u32
                } else {
                    offset + best_match(p, &bg) as u32
                }
            })
            .collect();
        levels.push(labels);
    }
    Ok(PseudoLabelStack {
        height: h,
        width: w,
        levels,
        label_space: hierarchy.level_sizes(),
    })
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PseudoLabelManifest {
    pub hierarchy_hash: String,
    pub label_space: Vec<(usize, usize)>,
    pub height: usize,
    pub width: usize,
    /// Image id -> per-level file names.
    pub images: BTreeMap<usize, Vec<String>>,
}

/// Writes each stack as one FTNS label tensor per level, plus a manifest.
pub fn save_pseudo_labels(
    dir: impl AsRef<Path>,
    stacks: &BTreeMap<usize, PseudoLabelStack>,
    hierarchy_hash: &str,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = PseudoLabelManifest {
        hierarchy_hash: hierarchy_hash.to_string(),
        ..Default::default()
    };
    for (&id, stack) in stacks {
        manifest.label_space = stack.label_space.clone();
        manifest.height = stack.height;
        manifest.width = stack.width;
        let mut files = Vec::new();
        for (l, labels) in stack.levels.iter().enumerate() {
            let name = format!("img{id:06}_level{}.ftns", l + 1);
            ftns::write_labels(
                dir.join(&name),
                &LabelTensor {
                    shape: vec![stack.height, stack.width],
                    data: labels.clone(),
                },
            )?;
            files.push(name);
        }
        manifest.images.insert(id, files);
    }
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_pseudo_labels(dir: impl AsRef<Path>) -> Result<(BTreeMap<usize, PseudoLabelStack>, String)> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: PseudoLabelManifest = serde_json::from_str(&text)?;
    let mut out = BTreeMap::new();
    for (id, files) in &manifest.images {
        let mut levels = Vec::new();
        for f in files {
            let t = ftns::read_labels(dir.join(f))?;
            if t.shape != [manifest.height, manifest.width] {
                return Err(Error::Data(format!("{f} has shape {:?}", t.shape)));
            }
            levels.push(t.data);
        }
        out.insert(
            *id,
            PseudoLabelStack {
                height: manifest.height,
                width: manifest.width,
                levels,
                label_space: manifest.label_space.clone(),
            },
        );
    }
    Ok((out, manifest.hierarchy_hash))
}
