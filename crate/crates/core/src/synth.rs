//! Seeded Gaussian-mixture datasets for tests and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::FeatureMatrix;
use crate::error::{domain, Result};
use crate::quant::norm;

/// A labelled dataset plus the centers it was drawn around.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub features: FeatureMatrix,
    /// `clusters x d`, row-major, each row unit norm
    pub centers: Vec<f64>,
}

/// Draws `n` points around `clusters` unit-norm centers.
///
/// Point `i` belongs to cluster `i % clusters`, so every cluster is used.
/// Noise is isotropic with standard deviation `spread`.
pub fn synth_dataset(n: usize, d: usize, clusters: usize, spread: f64, seed: u64) -> Result<FeatureMatrix> {
    Ok(synth_dataset_with_centers(n, d, clusters, spread, seed)?.features)
}

pub fn synth_dataset_with_centers(
    n: usize,
    d: usize,
    clusters: usize,
    spread: f64,
    seed: u64,
) -> Result<SynthDataset> {
    if d == 0 {
        return domain("dimension must be at least 1");
    }
    if clusters == 0 {
        return domain("need at least one cluster");
    }
    if n < clusters {
        return domain(format!("n = {n} is smaller than the {clusters} clusters"));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return domain("spread must be finite and non-negative");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(clusters * d);
    for _ in 0..clusters {
        let c = loop {
            let c: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let len = norm(&c);
            if len > 1e-12 {
                break c.into_iter().map(|v| v / len).collect::<Vec<f64>>();
            }
        };
        centers.extend(c);
    }
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % clusters;
        let center = &centers[c * d..(c + 1) * d];
        for &v in center {
            let z: f64 = rng.sample(StandardNormal);
            data.push(v + spread * z);
        }
        labels.push(c as i64);
    }
    let features = FeatureMatrix::new(data, d)?.with_labels(labels)?;
    Ok(SynthDataset { features, centers })
}
