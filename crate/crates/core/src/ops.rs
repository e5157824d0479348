//! Vector primitives and loss functions.
//!
//! Reductions accumulate in `f64` and return `f32` values, except losses,
//! which are reported as `f64` so finite-difference checks see the full
//! precision of the sum.

use crate::error::{Error, Result};
use crate::tensor::{chw, FeatureMap, Tensor};

/// Norms below this are treated as zero by [`cosine_similarity`].
pub const NORM_EPS: f64 = 1e-12;

/// Clamp applied to sigmoid scores before taking logs.
pub const BCE_CLAMP: f32 = 1e-7;

fn dot_norms(a: &[f32], b: &[f32]) -> (f64, f64, f64) {
    let mut dot = 0f64;
    let mut na = 0f64;
    let mut nb = 0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot, na.sqrt(), nb.sqrt())
}

/// Cosine of the angle between `a` and `b`; zero if either is a zero vector.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (dot, na, nb) = dot_norms(a, b);
    if na < NORM_EPS || nb < NORM_EPS {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0) as f32)
}

/// Cosine similarity plus its partial derivatives with respect to both
/// arguments. Lengths must match.
pub fn cosine_with_grad(a: &[f32], b: &[f32]) -> (f64, Vec<f64>, Vec<f64>) {
    debug_assert_eq!(a.len(), b.len());
    let (dot, na, nb) = dot_norms(a, b);
    if na < NORM_EPS || nb < NORM_EPS {
        return (0.0, vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let cos = dot / (na * nb);
    let inv = 1.0 / (na * nb);
    let ca = cos / (na * na);
    let cb = cos / (nb * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| y as f64 * inv - ca * x as f64)
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x as f64 * inv - cb * y as f64)
        .collect();
    (cos, ga, gb)
}

/// Softmax of `logits / temperature`, max-subtracted for stability.
pub fn softmax(logits: &[f32], temperature: f32) -> Result<Vec<f32>> {
    if !(temperature > 0.0) {
        return Err(Error::config(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::dim("softmax of an empty vector"));
    }
    let t = temperature as f64;
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let exps: Vec<f64> = logits.iter().map(|&v| ((v as f64 - max) / t).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| (e / z) as f32).collect())
}

/// Channel-wise mean of `features` over the pixels whose label equals
/// `region_id`.
pub fn mask_average_pool(features: &FeatureMap, labels: &[u32], region_id: u32) -> Result<Vec<f32>> {
    let (c, h, w) = chw(features);
    if labels.len() != h * w {
        return Err(Error::dim(format!(
            "mask has {} pixels, features have {}x{}",
            labels.len(),
            h,
            w
        )));
    }
    let count = labels.iter().filter(|&&l| l == region_id).count();
    if count == 0 {
        return Err(Error::EmptyRegion(region_id));
    }
    let hw = h * w;
    let data = features.data();
    let out = (0..c)
        .map(|k| {
            let plane = &data[k * hw..(k + 1) * hw];
            let s: f64 = plane
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == region_id)
                .map(|(&v, _)| v as f64)
                .sum();
            (s / count as f64) as f32
        })
        .collect();
    Ok(out)
}

/// Mean of every region at once: returns `(means, counts)` indexed by label
/// in `0..num_labels`. Labels `>= num_labels` are ignored. Regions with no
/// pixels get a zero vector and a zero count.
pub fn region_means(features: &FeatureMap, labels: &[u32], num_labels: usize) -> Result<(Vec<Vec<f32>>, Vec<usize>)> {
    let (c, h, w) = chw(features);
    if labels.len() != h * w {
        return Err(Error::dim(format!(
            "mask has {} pixels, features have {}x{}",
            labels.len(),
            h,
            w
        )));
    }
    let hw = h * w;
    let mut sums = vec![vec![0f64; c]; num_labels];
    let mut counts = vec![0usize; num_labels];
    for &l in labels {
        if (l as usize) < num_labels {
            counts[l as usize] += 1;
        }
    }
    let data = features.data();
    for k in 0..c {
        let plane = &data[k * hw..(k + 1) * hw];
        for (&v, &l) in plane.iter().zip(labels) {
            if (l as usize) < num_labels {
                sums[l as usize][k] += v as f64;
            }
        }
    }
    let means = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| {
            if n == 0 {
                vec![0f32; c]
            } else {
                s.into_iter().map(|v| (v / n as f64) as f32).collect()
            }
        })
        .collect();
    Ok((means, counts))
}

/// Mean cross-entropy over the `N` columns of a `[K, N]` logit matrix.
///
/// Returns the loss and its gradient `(softmax - onehot) / N`.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[u32]) -> Result<(f64, Tensor)> {
    if logits.ndim() != 2 {
        return Err(Error::dim(format!(
            "cross entropy expects [K, N] logits, got {:?}",
            logits.shape()
        )));
    }
    let (k, n) = (logits.dim(0), logits.dim(1));
    let (loss, grad) = cross_entropy_columns(logits.data(), k, n, labels, 1.0 / n as f64)?;
    Ok((loss, Tensor::new(vec![k, n], grad)?))
}

/// Cross-entropy summed over the columns of a `[K, N]` row-major block,
/// each column weighted by `weight`. Shared by the pixel-wise losses.
pub(crate) fn cross_entropy_columns(
    logits: &[f32],
    k: usize,
    n: usize,
    labels: &[u32],
    weight: f64,
) -> Result<(f64, Vec<f32>)> {
    if labels.len() != n {
        return Err(Error::dim(format!("{} labels for {n} columns", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::Label {
            label: bad,
            classes: k,
        });
    }
    let mut grad = vec![0f32; k * n];
    let mut loss = 0f64;
    let mut col = vec![0f64; k];
    for j in 0..n {
        let mut max = f64::NEG_INFINITY;
        for (i, c) in col.iter_mut().enumerate() {
            *c = logits[i * n + j] as f64;
            max = max.max(*c);
        }
        let mut z = 0f64;
        for c in col.iter_mut() {
            *c = (*c - max).exp();
            z += *c;
        }
        let y = labels[j] as usize;
        loss += weight * -(col[y] / z).ln();
        for (i, c) in col.iter().enumerate() {
            let p = c / z;
            let t = if i == y { 1.0 } else { 0.0 };
            grad[i * n + j] = (weight * (p - t)) as f32;
        }
    }
    Ok((loss, grad))
}

/// Mean binary cross-entropy of sigmoid scores against 0/1 labels, with its
/// gradient with respect to the (clamped) scores.
pub fn binary_cross_entropy(scores: &[f32], labels: &[f32]) -> Result<(f64, Vec<f32>)> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::dim(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n = scores.len() as f64;
    let mut loss = 0f64;
    let grad = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let s = s.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP) as f64;
            let y = y as f64;
            loss -= y * s.ln() + (1.0 - y) * (1.0 - s).ln();
            ((-y / s + (1.0 - y) / (1.0 - s)) / n) as f32
        })
        .collect();
    Ok((loss / n, grad))
}

/// BCE on raw logits through a sigmoid, fused for a stable gradient
/// `(sigmoid(z) - y) / N`. Same loss as [`binary_cross_entropy`] on
/// `sigmoid(z)` away from the clamp.
pub fn sigmoid_bce_with_logits(logits: &[f32], labels: &[f32]) -> Result<(f64, Vec<f32>)> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::dim(format!(
            "{} logits for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let n = logits.len() as f64;
    let mut loss = 0f64;
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let s = sigmoid(z as f64).clamp(BCE_CLAMP as f64, 1.0 - BCE_CLAMP as f64);
            let y = y as f64;
            loss -= y * s.ln() + (1.0 - y) * (1.0 - s).ln();
            ((sigmoid(z as f64) - y) / n) as f32
        })
        .collect();
    Ok((loss / n, grad))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Scales `v` to unit Euclidean length; `None` for a zero vector.
pub fn l2_normalize(v: &[f32]) -> Option<Vec<f32>> {
    let n = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if n < NORM_EPS {
        return None;
    }
    Some(v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[3.0, 4.0], &[4.0, 3.0]).unwrap();
        assert!(close(c as f64, 0.96, 1e-7));
    }

    #[test]
    fn cosine_zero_and_mismatch() {
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[3f32.ln(), 0.0], 1.0).unwrap();
        assert!(close(p[0] as f64, 0.75, 1e-6) && close(p[1] as f64, 0.25, 1e-6));
        let a = softmax(&[0.3, -1.2, 2.0], 1.0).unwrap();
        let b = softmax(&[5.3, 3.8, 7.0], 1.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(close(*x as f64, *y as f64, 1e-6));
        }
        assert!(matches!(softmax(&[1.0], 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn map_examples() {
        let f = Tensor::new(vec![2, 1, 3], vec![1.0, 3.0, 9.0, 3.0, 5.0, 9.0]).unwrap();
        let m = mask_average_pool(&f, &[0, 0, 1], 0).unwrap();
        assert_eq!(m, vec![2.0, 4.0]);
        assert!(matches!(
            mask_average_pool(&f, &[0, 0, 1], 7),
            Err(Error::EmptyRegion(7))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let z = Tensor::zeros(&[2, 4]);
        let (loss, _) = cross_entropy_loss(&z, &[0, 1, 1, 0]).unwrap();
        assert!(close(loss, std::f64::consts::LN_2, 1e-9));
        let sure = Tensor::new(vec![2, 1], vec![60.0, -60.0]).unwrap();
        let (loss, _) = cross_entropy_loss(&sure, &[0]).unwrap();
        assert!(loss < 1e-12);
        assert!(matches!(
            cross_entropy_loss(&z, &[0, 2, 1, 0]),
            Err(Error::Label { label: 2, .. })
        ));
    }

    #[test]
    fn bce_examples() {
        let (l, _) = binary_cross_entropy(&[0.5], &[1.0]).unwrap();
        assert!(close(l, std::f64::consts::LN_2, 1e-9));
        let (l, _) = binary_cross_entropy(&[1.0 - 1e-7], &[1.0]).unwrap();
        assert!(l < 2e-7);
        assert!(binary_cross_entropy(&[0.5, 0.5], &[1.0]).is_err());
    }
}
