//! Unsupervised grouping of verification features.
//!
//! The affinity matrix holds clipped cosine similarities. Clustering follows
//! the normalized-cut recipe: eigendecompose the symmetric normalized
//! Laplacian, pick the cluster count at the largest eigengap (capped by
//! `k_max`), row-normalize the leading eigenvectors and run seeded k-means
//! on the rows. Everything is deterministic given the seed.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::nn::cosine;
use crate::rng::SplitMix64;

/// Pairwise affinities: `A[i][j] = max(0, cos(f_i, f_j))` off the diagonal,
/// `A[i][i] = 1`. Negative cosines are clipped so the graph stays
/// non-negative.
pub fn affinity(features: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = features.len();
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        a[i][i] = 1.0;
        for j in (i + 1)..n {
            let c = cosine(&features[i], &features[j]).max(0.0);
            a[i][j] = c;
            a[j][i] = c;
        }
    }
    a
}

/// Result of spectral clustering: one label per feature plus the chosen
/// cluster count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterResult {
    pub labels: Vec<usize>,
    pub k: usize,
}

impl ClusterResult {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

/// Spectral clustering with the eigengap rule.
///
/// `k_max` caps the number of clusters; a single feature (or an empty set)
/// short-circuits without touching the eigensolver.
pub fn spectral_cluster(affinity: &[Vec<f64>], k_max: usize, seed: u64) -> ClusterResult {
    let n = affinity.len();
    if n == 0 {
        return ClusterResult { labels: Vec::new(), k: 0 };
    }
    if n == 1 {
        return ClusterResult { labels: vec![0], k: 1 };
    }

    // L = I - D^{-1/2} A D^{-1/2}; degrees include the unit diagonal, so they
    // are always positive.
    let mut lap = DMatrix::<f64>::zeros(n, n);
    let inv_sqrt_deg: Vec<f64> = affinity
        .iter()
        .map(|row| 1.0 / row.iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..n {
        for j in 0..n {
            let norm = affinity[i][j] * inv_sqrt_deg[i] * inv_sqrt_deg[j];
            lap[(i, j)] = if i == j { 1.0 - norm } else { -norm };
        }
    }

    let eigen = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[a].total_cmp(&eigen.eigenvalues[b]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eigen.eigenvalues[i]).collect();

    // Largest gap between consecutive eigenvalues over k in 1..=cap picks k.
    let cap = k_max.min(n - 1);
    let mut k = 1;
    let mut best_gap = f64::NEG_INFINITY;
    for cand in 1..=cap {
        let gap = eigenvalues[cand] - eigenvalues[cand - 1];
        if gap > best_gap + 1e-15 {
            best_gap = gap;
            k = cand;
        }
    }
    if k == 1 {
        return ClusterResult { labels: vec![0; n], k: 1 };
    }

    // Rows of the leading-k eigenvector matrix, normalized to the unit
    // sphere.
    let mut rows = vec![vec![0.0; k]; n];
    for (col, &src) in order.iter().take(k).enumerate() {
        for i in 0..n {
            rows[i][col] = eigen.eigenvectors[(i, src)];
        }
    }
    for row in &mut rows {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }

    let labels = kmeans(&rows, k, seed);
    ClusterResult { labels, k }
}

/// Lloyd's algorithm with k-means++ seeding. Deterministic given the seed:
/// ties in assignment go to the lowest center index, empty clusters keep
/// their previous center.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    assert!(k >= 1 && n >= k);
    let dim = points[0].len();
    let mut rng = SplitMix64::new(seed ^ 0x6b6d65616e73);

    // k-means++ seeding.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.below(n)].clone());
    let mut dist2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist2.iter().sum();
        let next = if total <= 1e-18 {
            // All points coincide with current centers; take the first
            // point not yet chosen.
            (0..n).find(|&i| dist2[i] > 0.0).unwrap_or(centers.len() % n)
        } else {
            let mut target = rng.next_f64() * total;
            let mut chosen = n - 1;
            for (i, &d) in dist2.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centers.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, centers.last().unwrap());
            if d < dist2[i] {
                dist2[i] = d;
            }
        }
    }

    let mut labels = vec![0usize; n];
    for _iter in 0..50 {
        // Assignment.
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(p, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            labels[i] = best;
        }
        // Update.
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut movement: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            for d in 0..dim {
                let new = sums[c][d] / counts[c] as f64;
                movement += (new - centers[c][d]).abs();
                centers[c][d] = new;
            }
        }
        if movement < 1e-6 {
            break;
        }
    }
    labels
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
