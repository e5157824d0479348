//! Unsupervised region segmentation of training images.
//!
//! Greedy graph-based merging over an 8-connected pixel graph (Felzenszwalb
//! and Huttenlocher), followed by a small-region cleanup. Output regions are
//! 4-connected with ids numbered in raster order of first appearance.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ftns::{self, LabelTensor};
use crate::image::{resample_nearest, Image, Mask};
use crate::pnm;

/// Label carried by foreground pixels in a background-only region map.
pub const FOREGROUND: u32 = u32::MAX;

/// Scale factor from the contour threshold knob to `scale_k`.
pub const K_PER_CONTOUR_THRESHOLD: f32 = 300.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegConfig {
    /// Region granularity; larger values give fewer, bigger regions.
    /// Edge weights are color distances on a 0..255 scale.
    pub scale_k: f32,
    pub min_region_size: usize,
    pub gaussian_sigma: f32,
    /// Kept for parity with contour-based segmenters; see
    /// [`SegConfig::from_contour_threshold`].
    pub contour_threshold: f32,
}

impl SegConfig {
    /// Config whose `scale_k` is `300 * tau`.
    pub fn from_contour_threshold(tau: f32) -> Self {
        SegConfig {
            scale_k: K_PER_CONTOUR_THRESHOLD * tau,
            contour_threshold: tau,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_k > 0.0) || self.min_region_size < 1 || !(self.gaussian_sigma >= 0.0) {
            return Err(Error::config(
                "segmentation needs scale_k > 0, min_region_size >= 1, sigma >= 0",
            ));
        }
        if !(self.contour_threshold > 0.0 && self.contour_threshold < 1.0) {
            return Err(Error::config("contour threshold must lie in (0, 1)"));
        }
        Ok(())
    }
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            scale_k: K_PER_CONTOUR_THRESHOLD * 0.45,
            min_region_size: 24,
            gaussian_sigma: 0.8,
            contour_threshold: 0.45,
        }
    }
}

/// A partition of an image into labeled regions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub num_regions: usize,
}

struct DisjointSets {
    parent: Vec<usize>,
    size: Vec<usize>,
    internal: Vec<f32>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        DisjointSets {
            parent: (0..n).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let next = self.parent[x];
            self.parent[x] = root;
            x = next;
        }
        root
    }

    /// Joins two roots; the larger set (then the lower index) stays root.
    fn union(&mut self, a: usize, b: usize, weight: f32) -> usize {
        let (keep, drop) = match self.size[a].cmp(&self.size[b]) {
            std::cmp::Ordering::Greater => (a, b),
            std::cmp::Ordering::Less => (b, a),
            std::cmp::Ordering::Equal => (a.min(b), a.max(b)),
        };
        self.parent[drop] = keep;
        self.size[keep] += self.size[drop];
        self.internal[keep] = weight;
        keep
    }
}

#[derive(Clone, Copy)]
struct Edge {
    a: usize,
    b: usize,
    w: f32,
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (4.0 * sigma).ceil().max(1.0) as i32;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with clamp-to-edge borders, on planar channels
/// scaled to 0..255.
fn smooth(image: &Image, sigma: f32) -> Vec<[f32; 3]> {
    let (h, w) = (image.height, image.width);
    let mut px: Vec<[f32; 3]> = (0..h * w)
        .map(|i| {
            let p = image.get(i / w, i % w);
            [p[0] * 255.0, p[1] * 255.0, p[2] * 255.0]
        })
        .collect();
    if sigma <= 0.0 {
        return px;
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = px.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f32; 3];
            for (i, kv) in k.iter().enumerate() {
                let sx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                let p = px[y * w + sx];
                for c in 0..3 {
                    acc[c] += kv * p[c];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f32; 3];
            for (i, kv) in k.iter().enumerate() {
                let sy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                let p = tmp[sy * w + x];
                for c in 0..3 {
                    acc[c] += kv * p[c];
                }
            }
            px[y * w + x] = acc;
        }
    }
    px
}

fn color_distance(a: [f32; 3], b: [f32; 3]) -> f32 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn build_edges(px: &[[f32; 3]], h: usize, w: usize, eight: bool) -> Vec<Edge> {
    let mut edges = Vec::with_capacity(h * w * if eight { 4 } else { 2 });
    let mut push = |a: usize, b: usize| {
        edges.push(Edge {
            a,
            b,
            w: color_distance(px[a], px[b]),
        })
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                push(i, i + 1);
            }
            if y + 1 < h {
                push(i, i + w);
                if eight {
                    if x + 1 < w {
                        push(i, i + w + 1);
                    }
                    if x > 0 {
                        push(i, i + w - 1);
                    }
                }
            }
        }
    }
    // Stable sort keeps generation order among equal weights.
    edges.sort_by(|p, q| p.w.total_cmp(&q.w));
    edges
}

/// Merges any component below `min_size` into the neighbor across its
/// lightest edge.
fn merge_small(sets: &mut DisjointSets, edges: &[Edge], min_size: usize) {
    for e in edges {
        let a = sets.find(e.a);
        let b = sets.find(e.b);
        if a != b && (sets.size[a] < min_size || sets.size[b] < min_size) {
            sets.union(a, b, e.w);
        }
    }
}

/// Relabels `keys` (one per pixel) into 4-connected components, numbered in
/// raster order. Pixels whose key is `skip` get [`FOREGROUND`].
fn connected_components(keys: &[u32], h: usize, w: usize, skip: Option<u32>) -> (Vec<u32>, usize) {
    let mut out = vec![FOREGROUND; h * w];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if out[start] != FOREGROUND || Some(keys[start]) == skip {
            continue;
        }
        let key = keys[start];
        out[start] = next;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if out[q] == FOREGROUND && keys[q] == key {
                    out[q] = next;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        next += 1;
    }
    (out, next as usize)
}

/// Partitions `image` into appearance-coherent, 4-connected regions.
pub fn segment_regions(image: &Image, config: &SegConfig) -> Result<RegionMap> {
    config.validate()?;
    let (h, w) = (image.height, image.width);
    if h * w == 0 {
        return Err(Error::dim("cannot segment an empty image"));
    }
    let n = h * w;
    let px = smooth(image, config.gaussian_sigma);
    let edges = build_edges(&px, h, w, true);
    let mut sets = DisjointSets::new(n);
    for e in &edges {
        let a = sets.find(e.a);
        let b = sets.find(e.b);
        if a == b {
            continue;
        }
        let ta = sets.internal[a] + config.scale_k / sets.size[a] as f32;
        let tb = sets.internal[b] + config.scale_k / sets.size[b] as f32;
        if e.w <= ta.min(tb) {
            sets.union(a, b, e.w);
        }
    }
    merge_small(&mut sets, &edges, config.min_region_size);

    // Diagonal-only links do not count as connected for the output, so
    // split on 4-connectivity and clean up any fragments that creates.
    let roots: Vec<u32> = (0..n).map(|i| sets.find(i) as u32).collect();
    let (pieces, num_pieces) = connected_components(&roots, h, w, None);
    let mut piece_sets = DisjointSets::new(num_pieces);
    let mut sizes = vec![0usize; num_pieces];
    for &p in &pieces {
        sizes[p as usize] += 1;
    }
    piece_sets.size = sizes;
    let piece_edges: Vec<Edge> = build_edges(&px, h, w, false)
        .into_iter()
        .map(|e| Edge {
            a: pieces[e.a] as usize,
            b: pieces[e.b] as usize,
            w: e.w,
        })
        .collect();
    merge_small(&mut piece_sets, &piece_edges, config.min_region_size);
    let merged: Vec<u32> = pieces.iter().map(|&p| piece_sets.find(p as usize) as u32).collect();
    let (labels, num_regions) = connected_components(&merged, h, w, None);
    Ok(RegionMap {
        height: h,
        width: w,
        labels,
        num_regions,
    })
}

/// Keeps region ids only on background pixels. Foreground pixels get
/// [`FOREGROUND`]; regions that the foreground splits apart become separate
/// regions, and ids are renumbered contiguously.
pub fn restrict_to_background(regions: &RegionMap, fg_mask: &Mask) -> Result<RegionMap> {
    if fg_mask.height != regions.height || fg_mask.width != regions.width {
        return Err(Error::dim(format!(
            "mask {}x{} vs regions {}x{}",
            fg_mask.height, fg_mask.width, regions.height, regions.width
        )));
    }
    let keys: Vec<u32> = regions
        .labels
        .iter()
        .zip(&fg_mask.data)
        .map(|(&l, &m)| if m != 0 { FOREGROUND } else { l })
        .collect();
    let (labels, num_regions) = connected_components(&keys, regions.height, regions.width, Some(FOREGROUND));
    Ok(RegionMap {
        height: regions.height,
        width: regions.width,
        labels,
        num_regions,
    })
}

impl RegionMap {
    pub fn region_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.num_regions];
        for &l in &self.labels {
            if l != FOREGROUND {
                sizes[l as usize] += 1;
            }
        }
        sizes
    }

    /// Checks that ids are exactly `0..num_regions` (plus the foreground
    /// sentinel) and that every region is 4-connected.
    pub fn verify_invariants(&self) -> Result<()> {
        if self.labels.len() != self.height * self.width {
            return Err(Error::Data("label count does not match image size".into()));
        }
        let mut seen = vec![false; self.num_regions];
        for &l in &self.labels {
            if l == FOREGROUND {
                continue;
            }
            let slot = seen
                .get_mut(l as usize)
                .ok_or_else(|| Error::Data(format!("region id {l} >= {}", self.num_regions)))?;
            *slot = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Data(format!("region id {missing} is unused")));
        }
        let (_, components) = connected_components(&self.labels, self.height, self.width, Some(FOREGROUND));
        if components != self.num_regions {
            return Err(Error::Data(format!(
                "{} regions but {components} 4-connected components",
                self.num_regions
            )));
        }
        Ok(())
    }

    /// Nearest-neighbor label lookup on an `h x w` grid.
    pub fn downsample_nearest(&self, h: usize, w: usize) -> Vec<u32> {
        resample_nearest(&self.labels, self.height, self.width, h, w)
    }

    pub fn to_label_tensor(&self) -> LabelTensor {
        LabelTensor {
            shape: vec![self.height, self.width],
            data: self.labels.clone(),
        }
    }

    pub fn from_label_tensor(t: &LabelTensor) -> Result<Self> {
        if t.shape.len() != 2 {
            return Err(Error::dim(format!("region labels must be 2-D, got {:?}", t.shape)));
        }
        let num_regions = t
            .data
            .iter()
            .filter(|&&l| l != FOREGROUND)
            .map(|&l| l as usize + 1)
            .max()
            .unwrap_or(0);
        let map = RegionMap {
            height: t.shape[0],
            width: t.shape[1],
            labels: t.data.clone(),
            num_regions,
        };
        map.verify_invariants()?;
        Ok(map)
    }

    /// Writes a PGM preview (id mod 256) and the exact FTNS label sidecar
    /// next to it (`<stem>.ftns`).
    pub fn save(&self, pgm_path: impl AsRef<Path>) -> Result<()> {
        let pgm_path = pgm_path.as_ref();
        let bytes: Vec<u8> = self.labels.iter().map(|&l| (l % 256) as u8).collect();
        pnm::write(pgm_path, self.width, self.height, 1, &bytes)?;
        ftns::write_labels(pgm_path.with_extension("ftns"), &self.to_label_tensor())
    }

    pub fn load(pgm_path: impl AsRef<Path>) -> Result<Self> {
        Self::from_label_tensor(&ftns::read_labels(pgm_path.as_ref().with_extension("ftns"))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(k: f32, min: usize) -> SegConfig {
        SegConfig {
            scale_k: k,
            min_region_size: min,
            gaussian_sigma: 0.0,
            contour_threshold: 0.45,
        }
    }

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, (0..h * w * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn uniform_image_is_one_region() {
        let img = Image::filled(10, 12, [0.3, 0.5, 0.1]);
        let r = segment_regions(&img, &SegConfig::default()).unwrap();
        assert_eq!(r.num_regions, 1);
        assert!(r.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn two_halves_split_at_column_boundary() {
        let mut img = Image::filled(8, 8, [0.0; 3]);
        for y in 0..8 {
            for x in 4..8 {
                img.set(y, x, [1.0; 3]);
            }
        }
        let r = segment_regions(&img, &cfg(10.0, 1)).unwrap();
        assert_eq!(r.num_regions, 2);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(r.labels[y * 8 + x], (x >= 4) as u32);
            }
        }
    }

    #[test]
    fn single_pixel_image() {
        let img = Image::filled(1, 1, [0.5; 3]);
        let r = segment_regions(&img, &SegConfig::default()).unwrap();
        assert_eq!((r.num_regions, r.labels.clone()), (1, vec![0]));
    }

    #[test]
    fn diagonal_only_links_are_split_and_cleaned() {
        // Checkerboard: every 8-connected merge is diagonal.
        let mut img = Image::filled(6, 6, [0.0; 3]);
        for y in 0..6 {
            for x in 0..6 {
                if (x + y) % 2 == 0 {
                    img.set(y, x, [1.0; 3]);
                }
            }
        }
        let r = segment_regions(&img, &cfg(1.0, 4)).unwrap();
        r.verify_invariants().unwrap();
        assert!(r.region_sizes().iter().all(|&s| s >= 4));
    }

    #[test]
    fn random_images_satisfy_partition_and_min_size() {
        for seed in 0..10 {
            let img = random_image(seed, 16, 20);
            let c = cfg(50.0, 6);
            let r = segment_regions(&img, &c).unwrap();
            r.verify_invariants().unwrap();
            if r.num_regions > 1 {
                assert!(r.region_sizes().iter().all(|&s| s >= 6));
            }
            assert_eq!(segment_regions(&img, &c).unwrap(), r);
        }
    }

    #[test]
    fn restrict_identity_and_empty() {
        let img = random_image(3, 12, 12);
        let r = segment_regions(&img, &cfg(200.0, 5)).unwrap();
        let same = restrict_to_background(&r, &Mask::zeros(12, 12)).unwrap();
        assert_eq!(same, r);
        let none = restrict_to_background(&r, &Mask::from_fn(12, 12, |_, _| true)).unwrap();
        assert_eq!(none.num_regions, 0);
        assert!(none.labels.iter().all(|&l| l == FOREGROUND));
        none.verify_invariants().unwrap();
    }

    #[test]
    fn restrict_clips_straddling_region() {
        // Two regions: left 3 columns (id 0) and right 3 columns (id 1) of a
        // 6x6 grid; the foreground covers a 2x2 block straddling both.
        let labels: Vec<u32> = (0..36).map(|i| ((i % 6) >= 3) as u32).collect();
        let r = RegionMap {
            height: 6,
            width: 6,
            labels,
            num_regions: 2,
        };
        let fg = Mask::from_fn(6, 6, |y, x| (2..4).contains(&y) && (2..4).contains(&x));
        let b = restrict_to_background(&r, &fg).unwrap();
        assert_eq!(b.num_regions, 2);
        let sizes = b.region_sizes();
        assert_eq!(sizes, vec![16, 16]);
        for y in 0..6 {
            for x in 0..6 {
                let l = b.labels[y * 6 + x];
                if fg.get(y, x) {
                    assert_eq!(l, FOREGROUND);
                } else {
                    assert_eq!(l, (x >= 3) as u32);
                }
            }
        }
    }

    #[test]
    fn restrict_splits_disconnected_pieces() {
        let r = RegionMap {
            height: 3,
            width: 5,
            labels: vec![0; 15],
            num_regions: 1,
        };
        let fg = Mask::from_fn(3, 5, |_, x| x == 2);
        let b = restrict_to_background(&r, &fg).unwrap();
        assert_eq!(b.num_regions, 2);
        b.verify_invariants().unwrap();
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_image(5, 9, 7);
        let r = segment_regions(&img, &cfg(80.0, 3)).unwrap();
        let p = dir.path().join("r.pgm");
        r.save(&p).unwrap();
        assert_eq!(RegionMap::load(&p).unwrap(), r);
    }
}
