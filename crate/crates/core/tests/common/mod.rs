//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the quantizer internals: distances, residuals and
//! rankings are recomputed from scratch so they can serve as oracles.

#![allow(dead_code)]

use drq_core::{Codebook, FeatureMatrix, RqModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, n);
        let len = norm(&v);
        if len > 1e-9 {
            return v.into_iter().map(|x| x / len).collect();
        }
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn random_codebook(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Codebook {
    Codebook::new(gaussian_vec(rng, k * d), d).unwrap()
}

pub fn random_model(rng: &mut ChaCha8Rng, k: usize, d: usize, levels: usize) -> RqModel {
    let w = rng.random_range(0.2..0.9);
    RqModel::new(random_codebook(rng, k, d), w, 20.0, levels).unwrap()
}

pub fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> FeatureMatrix {
    FeatureMatrix::new(gaussian_vec(rng, n * d), d).unwrap()
}

/// Exhaustive nearest codeword; the first minimum wins.
pub fn brute_nearest(x: &[f64], codewords: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in codewords.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// The explicit per-level codebooks `{C, wC, w^2 C, ...}`.
pub fn stacked_codebooks(model: &RqModel) -> Vec<Vec<Vec<f64>>> {
    let mut scale = 1.0;
    let mut out = Vec::with_capacity(model.levels());
    for m in 0..model.levels() {
        if m > 0 {
            scale *= model.scale();
        }
        out.push(
            model
                .codebook()
                .iter()
                .map(|c| c.iter().map(|v| scale * v).collect())
                .collect(),
        );
    }
    out
}

/// Greedy stacked encoding: level `m` quantizes the running residual against
/// its own explicit codebook. Returns the codes and final residual.
pub fn stacked_encode(x: &[f64], books: &[Vec<Vec<f64>>]) -> (Vec<u32>, Vec<f64>) {
    let mut h = x.to_vec();
    let mut codes = Vec::with_capacity(books.len());
    for book in books {
        let b = brute_nearest(&h, book);
        for (hi, ci) in h.iter_mut().zip(&book[b]) {
            *hi -= ci;
        }
        codes.push(b as u32);
    }
    (codes, h)
}

/// Sum of the selected stacked codewords.
pub fn stacked_reconstruct(codes: &[u32], books: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let dim = books[0][0].len();
    let mut out = vec![0.0; dim];
    for (b, book) in codes.iter().zip(books) {
        for (o, c) in out.iter_mut().zip(&book[*b as usize]) {
            *o += c;
        }
    }
    out
}

/// Ranks every reconstruction by squared distance to `q`, ties by id.
pub fn brute_ranking(q: &[f64], recons: &[Vec<f64>]) -> Vec<(u64, f64)> {
    let mut all: Vec<(u64, f64)> = recons
        .iter()
        .enumerate()
        .map(|(i, r)| (i as u64, sq_dist(q, r)))
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all
}

/// Central finite difference of `f` along every coordinate of `at`.
pub fn central_diff(at: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = at.to_vec();
    (0..at.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + eps;
            let up = f(&p);
            p[i] = orig - eps;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `|a - b| / max(|b|, floor)` in the Euclidean norm.
pub fn rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(numeric).max(floor)
}

/// A copy of `model` with new codebook entries and scale.
pub fn with_params(model: &RqModel, codebook: &[f64], scale: f64) -> RqModel {
    RqModel::new(
        Codebook::new(codebook.to_vec(), model.dim()).unwrap(),
        scale,
        model.gamma(),
        model.levels(),
    )
    .unwrap()
}
