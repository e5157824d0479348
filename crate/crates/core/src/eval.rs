//! mIoU accumulation, evaluation reports and mask overlays.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{intersection_union, Image, Mask};

/// Summed pixel counts of one class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassIoU {
    pub intersection: u64,
    pub union: u64,
    pub iou: f64,
    pub episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Always `count_sum`: IoU per class from intersections and unions
    /// summed over that class's episodes.
    pub convention: String,
    pub per_class: BTreeMap<u32, ClassIoU>,
    /// Mean of the per-class IoUs.
    pub miou: f64,
    pub episodes: usize,
    /// Episodes whose prediction and ground truth were both empty.
    pub skipped_empty_union: usize,
    pub config_hash: String,
    pub seed: u64,
    pub wall_clock_secs: f64,
}

impl EvalReport {
    /// The report without its wall-clock field, for run-to-run comparison.
    pub fn without_timing(&self) -> EvalReport {
        EvalReport {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }
}

/// Accumulates per-class counts over aligned prediction/ground-truth pairs.
pub fn compute_miou(predictions: &[Mask], ground_truths: &[Mask], class_ids: &[u32]) -> Result<EvalReport> {
    if predictions.len() != ground_truths.len() || predictions.len() != class_ids.len() {
        return Err(Error::dim(format!(
            "{} predictions, {} ground truths, {} class ids",
            predictions.len(),
            ground_truths.len(),
            class_ids.len()
        )));
    }
    let mut per_class: BTreeMap<u32, ClassIoU> = BTreeMap::new();
    let mut skipped = 0;
    for ((p, g), &c) in predictions.iter().zip(ground_truths).zip(class_ids) {
        if (p.height, p.width) != (g.height, g.width) {
            return Err(Error::dim(format!(
                "prediction {}x{} vs ground truth {}x{}",
                p.height, p.width, g.height, g.width
            )));
        }
        let (i, u) = intersection_union(p, g);
        if u == 0 {
            skipped += 1;
            continue;
        }
        let e = per_class.entry(c).or_default();
        e.intersection += i;
        e.union += u;
        e.episodes += 1;
    }
    for e in per_class.values_mut() {
        e.iou = e.intersection as f64 / e.union as f64;
    }
    let miou = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().map(|e| e.iou).sum::<f64>() / per_class.len() as f64
    };
    Ok(EvalReport {
        convention: "count_sum".into(),
        per_class,
        miou,
        episodes: predictions.len(),
        skipped_empty_union: skipped,
        config_hash: String::new(),
        seed: 0,
        wall_clock_secs: 0.0,
    })
}

/// Overlay color of predicted foreground.
pub const OVERLAY_COLOR: [f32; 3] = [1.0, 0.0, 0.0];

/// Blends the mask at 50% in [`OVERLAY_COLOR`] over the image.
pub fn overlay(image: &Image, mask: &Mask) -> Result<Image> {
    if (image.height, image.width) != (mask.height, mask.width) {
        return Err(Error::dim(format!(
            "image {}x{} vs mask {}x{}",
            image.height, image.width, mask.height, mask.width
        )));
    }
    let mut out = image.clone();
    for (p, &m) in mask.data.iter().enumerate() {
        if m != 0 {
            for k in 0..3 {
                let v = &mut out.pixels[p * 3 + k];
                *v = 0.5 * *v + 0.5 * OVERLAY_COLOR[k];
            }
        }
    }
    Ok(out)
}

pub fn render_overlay(image: &Image, mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    overlay(image, mask)?.write_ppm(path)
}
