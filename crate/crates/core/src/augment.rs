//! Training-time augmentation that keeps images and label maps aligned.

use rand::Rng;

use crate::image::{Image, Mask};

/// Geometric and photometric parameters of one strong augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrongAug {
    pub flip: bool,
    pub brightness: f32,
    pub contrast: f32,
    /// Crop box as fractions of the image: top, left, side scale.
    pub top: f32,
    pub left: f32,
    pub scale: f32,
}

impl StrongAug {
    pub const IDENTITY: StrongAug = StrongAug {
        flip: false,
        brightness: 0.0,
        contrast: 1.0,
        top: 0.0,
        left: 0.0,
        scale: 1.0,
    };

    /// Flip with probability 1/2, brightness and contrast jitter of +-0.2,
    /// and a square crop covering 0.8 to 1.0 of each side.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let scale = rng.random_range(0.8..=1.0f32);
        StrongAug {
            flip: rng.random_bool(0.5),
            brightness: rng.random_range(-0.2..=0.2),
            contrast: 1.0 + rng.random_range(-0.2..=0.2f32),
            top: rng.random_range(0.0..=1.0 - scale),
            left: rng.random_range(0.0..=1.0 - scale),
            scale,
        }
    }

    pub fn apply_image(&self, image: &Image) -> Image {
        let (h, w) = (image.height as f32, image.width as f32);
        let mut out = image.crop_resize(self.top * h, self.left * w, self.scale * h, self.scale * w);
        if self.flip {
            out = out.flip_horizontal();
        }
        out.jitter(self.brightness, self.contrast)
    }

    /// Applies the same crop and flip to an `h x w` label grid (nearest
    /// neighbor, sampling cell centers).
    pub fn apply_labels(&self, labels: &[u32], h: usize, w: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            let sy = self.top * h as f32 + (y as f32 + 0.5) * self.scale;
            let sy = (sy.floor() as usize).min(h - 1);
            for x in 0..w {
                let xx = if self.flip { w - 1 - x } else { x };
                let sx = self.left * w as f32 + (xx as f32 + 0.5) * self.scale;
                let sx = (sx.floor() as usize).min(w - 1);
                out.push(labels[sy * w + sx]);
            }
        }
        out
    }
}

/// Horizontal flip of an image/mask pair with probability 1/2.
pub fn random_flip<R: Rng + ?Sized>(image: &Image, mask: &Mask, rng: &mut R) -> (Image, Mask) {
    if rng.random_bool(0.5) {
        (image.flip_horizontal(), mask.flip_horizontal())
    } else {
        (image.clone(), mask.clone())
    }
}
