//! Lloyd's k-means with k-means++ seeding.
//!
//! After the Euclidean iterations converge the centers are projected onto
//! the unit sphere and refined with spherical updates (normalized means)
//! until assignments settle, so every returned center is unit length, is
//! the normalized mean of the points assigned to it, and every point is
//! assigned to its nearest center.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            max_iters: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centers: Vec<Vec<f32>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances from each point to its returned center.
    pub inertia: f64,
    /// Inertia after each Euclidean assignment step.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center per point (lowest index on ties) and the total squared
/// distance.
fn assign(points: &[Vec<f64>], centers: &[Vec<f64>]) -> (Vec<usize>, f64, Vec<f64>) {
    let mut inertia = 0f64;
    let mut dists = Vec::with_capacity(points.len());
    let assignments = points
        .iter()
        .map(|p| {
            let mut best = (0usize, f64::INFINITY);
            for (j, c) in centers.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            inertia += best.1;
            dists.push(best.1);
            best.0
        })
        .collect();
    (assignments, inertia, dists)
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-12 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Greedy k-means++: each step draws `2 + ln k` candidates by squared
/// distance and keeps the one that lowers the total potential most.
fn plus_plus_init<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<usize> {
    let n = points.len();
    let trials = 2 + (k as f64).ln() as usize;
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            // Every point coincides with a chosen center.
            let next = (0..n).find(|i| !chosen.contains(i)).expect("k <= n");
            chosen.push(next);
            continue;
        }
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    if r < d {
                        pick = i;
                        break;
                    }
                    r -= d;
                }
            }
            while d2[pick] == 0.0 {
                pick -= 1;
            }
            let next: Vec<f64> = points
                .iter()
                .zip(&d2)
                .map(|(p, &d)| d.min(sq_dist(p, &points[pick])))
                .collect();
            let potential: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, pick, next));
            }
        }
        let (_, pick, next) = best.expect("at least one trial");
        chosen.push(pick);
        d2 = next;
    }
    chosen
}

fn means(points: &[Vec<f64>], assignments: &[usize], k: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sums = vec![vec![0f64; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    (sums, counts)
}

/// Clusters `points` into `k` groups.
pub fn kmeans(points: &[Vec<f32>], k: usize, config: &KMeansConfig) -> Result<KMeansResult> {
    if k == 0 || k > points.len() {
        return Err(Error::config(format!(
            "k-means needs 1 <= k <= {} points, got k = {k}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::dim("k-means points have differing lengths"));
    }
    let pts: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().map(|&v| v as f64).collect())
        .collect();
    let mut rng = seeds::rng(config.seed, "kmeans++", &[]);
    let mut centers: Vec<Vec<f64>> = plus_plus_init(&pts, k, &mut rng)
        .into_iter()
        .map(|i| pts[i].clone())
        .collect();

    let mut history = Vec::new();
    let mut prev_centers = centers.clone();
    let mut converged = false;
    for iter in 0..=config.max_iters {
        let (assignments, inertia, dists) = assign(&pts, &centers);
        if let Some(&last) = history.last() {
            if inertia > last {
                // Floating-point noise at a fixed point; keep the better state.
                centers = prev_centers;
                break;
            }
        }
        history.push(inertia);
        if converged || iter == config.max_iters {
            break;
        }
        let (mut next, counts) = means(&pts, &assignments, k, dim);
        let mut taken: Vec<usize> = Vec::new();
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..pts.len())
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("k <= n");
                taken.push(far);
                next[j] = pts[far].clone();
            }
        }
        let movement = centers
            .iter()
            .zip(&next)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0f64, f64::max);
        prev_centers = std::mem::replace(&mut centers, next);
        converged = movement < config.tol;
    }

    let mut centers: Vec<Vec<f64>> = centers.iter().map(|c| normalized(c)).collect();
    let (mut assignments, _, _) = assign(&pts, &centers);
    for _ in 0..config.max_iters.max(1) {
        let (sums, counts) = means(&pts, &assignments, k, dim);
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = normalized(&sums[j]);
            }
        }
        let (next, _, _) = assign(&pts, &centers);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    let (assignments, inertia, _) = assign(&pts, &centers);
    Ok(KMeansResult {
        centers: centers
            .into_iter()
            .map(|c| c.into_iter().map(|v| v as f32).collect())
            .collect(),
        assignments,
        inertia,
        inertia_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(a: f32) -> Vec<f32> {
        vec![a.cos(), a.sin()]
    }

    #[test]
    fn k_equal_to_distinct_points() {
        let pts = vec![unit(0.0), unit(1.0), unit(2.0), unit(1.0)];
        let r = kmeans(&pts, 3, &KMeansConfig::default()).unwrap();
        assert!(r.inertia < 1e-12);
        for p in &pts {
            assert!(r.centers.iter().any(|c| (c[0] - p[0]).abs() < 1e-6 && (c[1] - p[1]).abs() < 1e-6));
        }
    }

    #[test]
    fn two_blobs_give_normalized_means() {
        let pts = vec![vec![1.0, 0.1], vec![1.0, -0.1], vec![0.1, 1.0], vec![-0.1, 1.0]];
        let r = kmeans(&pts, 2, &KMeansConfig::default()).unwrap();
        let mut c = r.centers.clone();
        c.sort_by(|a, b| b[0].total_cmp(&a[0]));
        assert!((c[0][0] - 1.0).abs() < 1e-6 && c[0][1].abs() < 1e-6);
        assert!(c[1][0].abs() < 1e-6 && (c[1][1] - 1.0).abs() < 1e-6);
        assert_eq!(r.assignments[0], r.assignments[1]);
        assert_ne!(r.assignments[0], r.assignments[2]);
    }

    #[test]
    fn too_many_clusters_is_config_error() {
        assert!(matches!(
            kmeans(&[vec![1.0]], 2, &KMeansConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn history_is_non_increasing_and_seeded() {
        let mut rng = seeds::rng(3, "test", &[]);
        let pts: Vec<Vec<f32>> = (0..200)
            .map(|_| (0..5).map(|_| rng.random::<f32>() - 0.5).collect())
            .collect();
        let cfg = KMeansConfig {
            seed: 11,
            ..Default::default()
        };
        let r = kmeans(&pts, 7, &cfg).unwrap();
        assert!(r.inertia_history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(kmeans(&pts, 7, &cfg).unwrap(), r);
    }
}
