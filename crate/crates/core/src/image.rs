//! RGB images, binary masks and resampling helpers.

use std::path::Path;

use crate::error::{Error, Result};
use crate::pnm;
use crate::tensor::Tensor;

/// An RGB image with interleaved channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::dim(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("pixel values must lie in [0, 1]".into()));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Image {
            height,
            width,
            pixels,
        }
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for (k, v) in rgb.into_iter().enumerate() {
            self.pixels[i + k] = v.clamp(0.0, 1.0);
        }
    }

    /// Planar `[3, H, W]` tensor for the encoder.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.height * self.width;
        let mut data = vec![0f32; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                data[c * hw + p] = self.pixels[p * 3 + c];
            }
        }
        Tensor::new(vec![3, self.height, self.width], data).expect("sized above")
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, x, self.get(y, self.width - 1 - x));
            }
        }
        out
    }

    /// Bilinear crop of the box `(top, left, size_h, size_w)` (in source
    /// pixels, fractional allowed) resized back to the full image size.
    pub fn crop_resize(&self, top: f32, left: f32, size_h: f32, size_w: f32) -> Image {
        let (h, w) = (self.height, self.width);
        let mut out = Image::filled(h, w, [0.0; 3]);
        for y in 0..h {
            let sy = (top + (y as f32 + 0.5) * size_h / h as f32 - 0.5).clamp(0.0, (h - 1) as f32);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f32;
            for x in 0..w {
                let sx = (left + (x as f32 + 0.5) * size_w / w as f32 - 0.5).clamp(0.0, (w - 1) as f32);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f32;
                let (a, b, c, d) = (self.get(y0, x0), self.get(y0, x1), self.get(y1, x0), self.get(y1, x1));
                let mut v = [0f32; 3];
                for k in 0..3 {
                    let top = a[k] * (1.0 - fx) + b[k] * fx;
                    let bot = c[k] * (1.0 - fx) + d[k] * fx;
                    v[k] = top * (1.0 - fy) + bot * fy;
                }
                out.set(y, x, v);
            }
        }
        out
    }

    /// `v -> (v - 0.5) * contrast + 0.5 + brightness`, clamped to `[0, 1]`.
    pub fn jitter(&self, brightness: f32, contrast: f32) -> Image {
        let pixels = self
            .pixels
            .iter()
            .map(|&v| ((v - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0))
            .collect();
        Image {
            height: self.height,
            width: self.width,
            pixels,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let (w, h, c, bytes) = pnm::read(path)?;
        if c != 3 {
            return Err(Error::Format {
                kind: "PPM",
                reason: "expected a P6 color image".into(),
            });
        }
        Image::from_bytes(h, w, &bytes)
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        pnm::write(path, self.width, self.height, 3, &self.to_bytes())
    }
}

/// A binary foreground mask stored as 0/1 bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Data("mask values must be 0 or 1".into()));
        }
        Ok(Mask { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Mask { height, width, data }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Per-pixel labels: 1 for foreground, 0 for background.
    pub fn as_labels(&self) -> Vec<u32> {
        self.data.iter().map(|&v| v as u32).collect()
    }

    /// Block majority vote down to `height x width`; ties go to background.
    pub fn downsample_majority(&self, height: usize, width: usize) -> Result<Mask> {
        if height == 0 || width == 0 || self.height % height != 0 || self.width % width != 0 {
            return Err(Error::dim(format!(
                "cannot block-downsample {}x{} to {height}x{width}",
                self.height, self.width
            )));
        }
        let (fy, fx) = (self.height / height, self.width / width);
        Ok(Mask::from_fn(height, width, |y, x| {
            let mut n = 0;
            for dy in 0..fy {
                for dx in 0..fx {
                    n += self.get(y * fy + dy, x * fx + dx) as usize;
                }
            }
            2 * n > fy * fx
        }))
    }

    pub fn flip_horizontal(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    pub fn iou(&self, other: &Mask) -> Option<f64> {
        let (i, u) = intersection_union(self, other);
        (u > 0).then(|| i as f64 / u as f64)
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| v * 255).collect();
        pnm::write(path, self.width, self.height, 1, &bytes)
    }

    /// Reads a PGM where any nonzero sample is foreground.
    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let (w, h, _, bytes) = read_gray(path)?;
        Mask::new(h, w, bytes.iter().map(|&b| (b != 0) as u8).collect())
    }
}

/// Reads a P5 file and returns `(width, height, 1, samples)`.
pub fn read_gray(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<u8>)> {
    let (w, h, c, bytes) = pnm::read(path)?;
    if c != 1 {
        return Err(Error::Format {
            kind: "PGM",
            reason: "expected a P5 grayscale image".into(),
        });
    }
    Ok((w, h, c, bytes))
}

/// Pixel counts `(|a ∩ b|, |a ∪ b|)`.
pub fn intersection_union(a: &Mask, b: &Mask) -> (u64, u64) {
    let mut i = 0u64;
    let mut u = 0u64;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        i += (x & y) as u64;
        u += (x | y) as u64;
    }
    (i, u)
}

/// Nearest-neighbor resampling of a label grid, sampling source pixel
/// centers.
pub fn resample_nearest(labels: &[u32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<u32> {
    assert_eq!(labels.len(), h * w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = (((y as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1);
        for x in 0..out_w {
            let sx = (((x as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1);
            out.push(labels[sy * w + sx]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_downsample_ties_go_to_background() {
        // 2x2 blocks with 2 of 4 foreground pixels -> background.
        let m = Mask::from_fn(2, 4, |_, x| x == 0 || x == 3);
        let d = m.downsample_majority(1, 2).unwrap();
        assert_eq!(d.data, vec![0, 0]);
        let m = Mask::from_fn(2, 2, |y, x| !(y == 1 && x == 1));
        assert_eq!(m.downsample_majority(1, 1).unwrap().data, vec![1]);
    }

    #[test]
    fn nearest_resample_doubles() {
        let up = resample_nearest(&[1, 2, 3, 4], 2, 2, 4, 4);
        assert_eq!(&up[..4], &[1, 1, 2, 2]);
        assert_eq!(&up[12..], &[3, 3, 4, 4]);
        assert_eq!(resample_nearest(&up, 4, 4, 2, 2), vec![1, 2, 3, 4]);
    }

    #[test]
    fn ppm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_bytes(2, 3, &(0..18).map(|v| v * 10).collect::<Vec<u8>>()).unwrap();
        let p = dir.path().join("a.ppm");
        img.write_ppm(&p).unwrap();
        assert_eq!(Image::read_ppm(&p).unwrap(), img);
        let m = Mask::from_fn(2, 3, |y, x| y == x);
        let q = dir.path().join("m.pgm");
        m.write_pgm(&q).unwrap();
        assert_eq!(Mask::read_pgm(&q).unwrap(), m);
    }

    #[test]
    fn flip_is_involution() {
        let m = Mask::from_fn(3, 4, |y, x| x > y);
        assert_eq!(m.flip_horizontal().flip_horizontal(), m);
        let img = Image::from_bytes(1, 2, &[0, 0, 0, 255, 255, 255]).unwrap();
        assert_eq!(img.flip_horizontal().get(0, 0), [1.0; 3]);
    }
}
