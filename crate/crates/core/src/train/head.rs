//! Linear feature-refinement head.
//!
//! Two linear maps read the same input; their outputs are concatenated and
//! l2-normalized to give the refined feature. The second block alone also
//! feeds the label-embedding loss, so its width must match the embeddings.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::FeatureMatrix;
use crate::error::{domain, Result};
use crate::quant::{dot, norm};

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementHead {
    in_dim: usize,
    first_width: usize,
    second_width: usize,
    /// `[W1 (first x in), b1, W2 (second x in), b2]`
    params: Vec<f64>,
}

/// Forward values of one input needed for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct HeadForward {
    /// concatenated raw output
    pub raw: Vec<f64>,
    pub raw_norm: f64,
    /// `raw / |raw|`
    pub feature: Vec<f64>,
}

impl RefinementHead {
    /// Xavier-uniform weights, zero biases.
    pub(crate) fn init(
        in_dim: usize,
        first_width: usize,
        second_width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if in_dim == 0 || first_width == 0 || second_width == 0 {
            return domain("refinement head dimensions must be positive");
        }
        let mut params = Vec::with_capacity(Self::param_len(in_dim, first_width, second_width));
        for width in [first_width, second_width] {
            let bound = (6.0 / (in_dim + width) as f64).sqrt();
            params.extend((0..width * in_dim).map(|_| rng.random_range(-bound..bound)));
            params.extend(std::iter::repeat_n(0.0, width));
        }
        Ok(Self {
            in_dim,
            first_width,
            second_width,
            params,
        })
    }

    pub fn from_params(
        in_dim: usize,
        first_width: usize,
        second_width: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        if in_dim == 0 || first_width == 0 || second_width == 0 {
            return domain("refinement head dimensions must be positive");
        }
        if params.len() != Self::param_len(in_dim, first_width, second_width) {
            return domain("refinement head parameter count does not match its shape");
        }
        if params.iter().any(|v| !v.is_finite()) {
            return domain("refinement head has a non-finite parameter");
        }
        Ok(Self {
            in_dim,
            first_width,
            second_width,
            params,
        })
    }

    fn param_len(in_dim: usize, a: usize, b: usize) -> usize {
        (a + b) * (in_dim + 1)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.first_width + self.second_width
    }

    pub fn widths(&self) -> (usize, usize) {
        (self.first_width, self.second_width)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Offsets of `(W, b)` for block 0 or 1.
    fn block(&self, which: usize) -> (usize, usize, usize) {
        let first_len = self.first_width * (self.in_dim + 1);
        let (start, width) = if which == 0 {
            (0, self.first_width)
        } else {
            (first_len, self.second_width)
        };
        (start, start + width * self.in_dim, width)
    }

    pub(crate) fn forward(&self, x: &[f64]) -> HeadForward {
        let mut raw = Vec::with_capacity(self.out_dim());
        for which in 0..2 {
            let (w_off, b_off, width) = self.block(which);
            for r in 0..width {
                let w = &self.params[w_off + r * self.in_dim..w_off + (r + 1) * self.in_dim];
                raw.push(dot(w, x) + self.params[b_off + r]);
            }
        }
        let raw_norm = norm(&raw);
        let feature = if raw_norm > 0.0 {
            raw.iter().map(|v| v / raw_norm).collect()
        } else {
            vec![0.0; raw.len()]
        };
        HeadForward {
            raw,
            raw_norm,
            feature,
        }
    }

    /// Output of the second block, the input of the label-embedding loss.
    pub(crate) fn second_block<'a>(&self, fwd: &'a HeadForward) -> &'a [f64] {
        &fwd.raw[self.first_width..]
    }

    /// Accumulates parameter gradients for one input given `dL/dfeature`
    /// and, optionally, `dL/d(second block raw output)`.
    pub(crate) fn backward(
        &self,
        x: &[f64],
        fwd: &HeadForward,
        d_feature: &[f64],
        d_second_raw: Option<&[f64]>,
        grad: &mut [f64],
    ) {
        // through normalization: d raw = (I - n n^T) d_feature / |raw|
        let mut d_raw = vec![0.0; self.out_dim()];
        if fwd.raw_norm > 0.0 {
            let proj = dot(&fwd.feature, d_feature);
            for ((d, n), g) in d_raw.iter_mut().zip(&fwd.feature).zip(d_feature) {
                *d = (g - proj * n) / fwd.raw_norm;
            }
        }
        if let Some(ds) = d_second_raw {
            d_raw[self.first_width..]
                .iter_mut()
                .zip(ds)
                .for_each(|(a, b)| *a += b);
        }
        for which in 0..2 {
            let (w_off, b_off, width) = self.block(which);
            let base = if which == 0 { 0 } else { self.first_width };
            for r in 0..width {
                let d = d_raw[base + r];
                if d == 0.0 {
                    continue;
                }
                grad[w_off + r * self.in_dim..w_off + (r + 1) * self.in_dim]
                    .iter_mut()
                    .zip(x)
                    .for_each(|(g, xi)| *g += d * xi);
                grad[b_off + r] += d;
            }
        }
    }

    /// Refined, normalized features for every row. Labels are carried over.
    pub fn transform(&self, features: &FeatureMatrix) -> Result<FeatureMatrix> {
        if features.dim() != self.in_dim {
            return domain(format!(
                "features have dimension {}, head expects {}",
                features.dim(),
                self.in_dim
            ));
        }
        let mut data = Vec::with_capacity(features.rows() * self.out_dim());
        for x in features.iter_rows() {
            data.extend(self.forward(x).feature);
        }
        let out = FeatureMatrix::new(data, self.out_dim())?;
        let out = match features.multi_labels() {
            Some(sets) => out.with_multi_labels(sets.to_vec())?,
            None => match features.labels() {
                Some(l) => out.with_labels(l.to_vec())?,
                None => out,
            },
        };
        Ok(out)
    }
}
