//! Lloyd's algorithm with k-means++ seeding.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::FeatureMatrix;
use crate::error::{domain, Result};
use crate::quant::{sq_dist_scaled, Codebook};

/// Outcome of a k-means run. `sse[0]` is measured right after seeding,
/// `sse[t]` after Lloyd iteration `t`.
#[derive(Debug, Clone)]
pub struct KMeans {
    pub centroids: Codebook,
    pub assignments: Vec<usize>,
    pub sse: Vec<f64>,
}

fn nearest(x: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist_scaled(x, c, 1.0);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn seed_plus_plus(features: &FeatureMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = features.rows();
    let dim = features.dim();
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(features.row(first));
    let mut d2: Vec<f64> = features
        .iter_rows()
        .map(|x| sq_dist_scaled(x, features.row(first), 1.0))
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            // guard against rounding landing on an already-covered point
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|d| *d > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            // every point coincides with a centroid already
            rng.random_range(0..n)
        };
        let c = features.row(pick).to_vec();
        for (i, x) in features.iter_rows().enumerate() {
            d2[i] = d2[i].min(sq_dist_scaled(x, &c, 1.0));
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Clusters `features` into `k` groups. Stops after `iters` Lloyd iterations
/// or when assignments stop changing. Empty clusters are moved onto the point
/// farthest from its current centroid.
pub fn kmeans(features: &FeatureMatrix, k: usize, iters: usize, seed: u64) -> Result<KMeans> {
    let n = features.rows();
    let dim = features.dim();
    if k == 0 {
        return domain("k-means needs k >= 1");
    }
    if n < k {
        return domain(format!("k-means needs at least k={k} points, got {n}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(features, k, &mut rng);

    let mut assignments = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let assign = |centroids: &[f64], assignments: &mut [usize], dists: &mut [f64]| -> (f64, bool) {
        let mut sse = 0.0;
        let mut changed = false;
        for (i, x) in features.iter_rows().enumerate() {
            let (c, d) = nearest(x, centroids, dim);
            if assignments[i] != c {
                changed = true;
                assignments[i] = c;
            }
            dists[i] = d;
            sse += d;
        }
        (sse, changed)
    };

    let (sse0, _) = assign(&centroids, &mut assignments, &mut dists);
    let mut sse = vec![sse0];
    for _ in 0..iters {
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, x) in features.iter_rows().enumerate() {
            let c = assignments[i];
            counts[c] += 1;
            sums[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(x)
                .for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *dst = s * inv;
                }
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist_scaled(features.row(a), &centroids[assignments[a] * dim..(assignments[a] + 1) * dim], 1.0);
                        let db = sq_dist_scaled(features.row(b), &centroids[assignments[b] * dim..(assignments[b] + 1) * dim], 1.0);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap();
                centroids[c * dim..(c + 1) * dim].copy_from_slice(features.row(far));
                assignments[far] = c;
            }
        }
        let (s, changed) = assign(&centroids, &mut assignments, &mut dists);
        sse.push(s);
        if !changed {
            break;
        }
    }

    Ok(KMeans {
        centroids: Codebook::new(centroids, dim)?,
        assignments,
        sse,
    })
}

/// Codebook initialization: centroids from k-means.
pub fn kmeans_init(features: &FeatureMatrix, k: usize, iters: usize, seed: u64) -> Result<Codebook> {
    Ok(kmeans(features, k, iters, seed)?.centroids)
}
