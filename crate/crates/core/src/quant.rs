//! Shared-codebook recurrent quantization.
//!
//! One `K x D` codebook is reused at every level. Level `m` (1-based) sees
//! the codebook scaled by `w^(m-1)`, picks the codeword closest to the
//! current residual and subtracts it. The indices picked at each level form
//! the code; any prefix of it is the code the same model would produce with
//! fewer levels.

use crate::error::{domain, Result};

/// A `K x D` codebook stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    data: Vec<f64>,
    k: usize,
    dim: usize,
}

impl Codebook {
    pub fn new(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return domain(format!(
                "codebook of {} values cannot be split into rows of {dim}",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return domain("codebook contains a non-finite entry");
        }
        let k = data.len() / dim;
        Ok(Self { data, k, dim })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return domain("codebook rows have unequal lengths");
        }
        Self::new(rows.concat(), dim)
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn codeword(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }
}

/// The trained artifact: codebook, scale factor, softmax sharpness and depth.
#[derive(Debug, Clone, PartialEq)]
pub struct RqModel {
    codebook: Codebook,
    scale: f64,
    gamma: f64,
    levels: usize,
}

impl RqModel {
    /// Largest supported codebook, so a sub-index always fits in 16 bits.
    pub const MAX_K: usize = 1 << 16;

    pub fn new(codebook: Codebook, scale: f64, gamma: f64, levels: usize) -> Result<Self> {
        let k = codebook.k();
        if k < 2 || !k.is_power_of_two() || k > Self::MAX_K {
            return domain(format!(
                "codebook size K={k} must be a power of two in [2, {}]",
                Self::MAX_K
            ));
        }
        Self::new_any_k(codebook, scale, gamma, levels)
    }

    /// Like [`RqModel::new`] but accepts any `K >= 1`. Such models quantize
    /// and reconstruct normally but their codes cannot be bit-packed.
    pub fn new_any_k(codebook: Codebook, scale: f64, gamma: f64, levels: usize) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return domain(format!("scale factor must be finite and positive, got {scale}"));
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return domain(format!("gamma must be finite and positive, got {gamma}"));
        }
        if levels == 0 {
            return domain("model needs at least one level");
        }
        Ok(Self {
            codebook,
            scale,
            gamma,
            levels,
        })
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn k(&self) -> usize {
        self.codebook.k()
    }

    pub fn dim(&self) -> usize {
        self.codebook.dim()
    }

    /// `log2 K`; only meaningful for power-of-two `K`.
    pub fn bits_per_level(&self) -> u32 {
        self.k().trailing_zeros()
    }

    /// Total code length `M * log2 K` in bits.
    pub fn code_bits(&self) -> usize {
        self.levels * self.bits_per_level() as usize
    }

    /// Number of learned scalars: the codebook plus the scale factor.
    /// Independent of the number of levels.
    pub fn parameter_count(&self) -> usize {
        self.k() * self.dim() + 1
    }

    /// The same codebook and scale run for a different number of levels.
    pub fn with_levels(&self, levels: usize) -> Result<Self> {
        if levels == 0 {
            return domain("model needs at least one level");
        }
        Ok(Self {
            levels,
            ..self.clone()
        })
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new_any_k(self.codebook.clone(), self.scale, gamma, self.levels)
    }

    pub(crate) fn set_params(&mut self, codebook: &[f64], scale: f64) {
        self.codebook.as_mut_slice().copy_from_slice(codebook);
        self.scale = scale;
    }

    /// Codebook scale at each level: `1, w, w^2, ...` (length `levels`).
    pub fn level_scales(&self) -> Vec<f64> {
        level_scales(self.scale, self.levels)
    }

    pub(crate) fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return domain(format!(
                "input has dimension {}, model expects {}",
                x.len(),
                self.dim()
            ));
        }
        check_finite(x)
    }
}

pub(crate) fn level_scales(w: f64, levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(levels);
    let mut s = 1.0;
    for _ in 0..levels {
        out.push(s);
        s *= w;
    }
    out
}

fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return domain("input vector contains a non-finite value");
    }
    Ok(())
}

/// Sub-indices, one per level.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CodeSequence(Vec<u32>);

impl CodeSequence {
    pub fn new(indices: Vec<u32>) -> Self {
        Self(indices)
    }

    pub fn indices(&self) -> &[u32] {
        &self.0
    }

    pub fn levels(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.0
    }

    /// First `m` sub-indices: the code of the same vector under an `m`-level model.
    pub fn slice_prefix(&self, m: usize) -> Result<Self> {
        if m == 0 || m > self.0.len() {
            return domain(format!(
                "prefix length {m} out of range 1..={}",
                self.0.len()
            ));
        }
        Ok(Self(self.0[..m].to_vec()))
    }
}

/// Convex combination of codewords.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment {
    pub probs: Vec<f64>,
    pub expected: Vec<f64>,
}

/// Everything computed while encoding one vector.
///
/// Row `m` of `states` is the residual after `m` levels (`states[0]` is the
/// input). Errors are distances from the accumulated reconstruction to the
/// original input.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTrace {
    pub dim: usize,
    pub states: Vec<f64>,
    pub hard_partials: Vec<f64>,
    pub soft_partials: Vec<f64>,
    pub soft_probs: Vec<Vec<f64>>,
    pub per_level_hard_err: Vec<f64>,
    pub per_level_soft_err: Vec<f64>,
}

impl QuantTrace {
    pub fn levels(&self) -> usize {
        self.per_level_hard_err.len()
    }

    /// Residual `h^m`; `m = 0` is the input.
    pub fn state(&self, m: usize) -> &[f64] {
        &self.states[m * self.dim..(m + 1) * self.dim]
    }

    /// Hard quantization at level `m` (1-based).
    pub fn hard_partial(&self, m: usize) -> &[f64] {
        &self.hard_partials[(m - 1) * self.dim..m * self.dim]
    }

    /// Soft quantization at level `m` (1-based).
    pub fn soft_partial(&self, m: usize) -> &[f64] {
        &self.soft_partials[(m - 1) * self.dim..m * self.dim]
    }
}

#[inline]
pub(crate) fn sq_dist_scaled(x: &[f64], c: &[f64], scale: f64) -> f64 {
    x.iter()
        .zip(c)
        .map(|(a, b)| {
            let d = scale * b - a;
            d * d
        })
        .sum()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Nearest codeword of the `scale`-scaled codebook; ties go to the smaller index.
pub(crate) fn nearest_scaled(x: &[f64], codebook: &Codebook, scale: f64) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in codebook.iter().enumerate() {
        let d = sq_dist_scaled(x, c, scale);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Softmax over `-gamma * ||scale*C_k - x||`, computed with max-subtraction.
/// Returns the probabilities and the (non-squared) distances.
pub(crate) fn soft_probs_scaled(
    x: &[f64],
    codebook: &Codebook,
    scale: f64,
    gamma: f64,
) -> (Vec<f64>, Vec<f64>) {
    let dists: Vec<f64> = codebook
        .iter()
        .map(|c| sq_dist_scaled(x, c, scale).sqrt())
        .collect();
    let min_d = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let mut probs: Vec<f64> = dists.iter().map(|d| (-gamma * (d - min_d)).exp()).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    (probs, dists)
}

pub(crate) fn weighted_codeword_sum(probs: &[f64], codebook: &Codebook, scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; codebook.dim()];
    for (p, c) in probs.iter().zip(codebook.iter()) {
        let coef = p * scale;
        out.iter_mut().zip(c).for_each(|(o, v)| *o += coef * v);
    }
    out
}

/// Index and value of the codeword nearest to `x` (Euclidean).
pub fn hard_quantize(x: &[f64], codebook: &Codebook) -> Result<(usize, Vec<f64>)> {
    if x.len() != codebook.dim() {
        return domain(format!(
            "input has dimension {}, codebook has {}",
            x.len(),
            codebook.dim()
        ));
    }
    check_finite(x)?;
    let (idx, _) = nearest_scaled(x, codebook, 1.0);
    Ok((idx, codebook.codeword(idx).to_vec()))
}

/// Softmax-weighted combination of codewords with sharpness `gamma`.
pub fn soft_quantize(x: &[f64], codebook: &Codebook, gamma: f64) -> Result<SoftAssignment> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return domain(format!("gamma must be finite and positive, got {gamma}"));
    }
    if x.len() != codebook.dim() {
        return domain(format!(
            "input has dimension {}, codebook has {}",
            x.len(),
            codebook.dim()
        ));
    }
    check_finite(x)?;
    let (probs, _) = soft_probs_scaled(x, codebook, 1.0, gamma);
    let expected = weighted_codeword_sum(&probs, codebook, 1.0);
    Ok(SoftAssignment { probs, expected })
}

/// Code of `x` without building the soft path. Used for database encoding.
pub fn encode_codes(x: &[f64], model: &RqModel) -> Result<CodeSequence> {
    model.check_input(x)?;
    Ok(encode_codes_unchecked(x, model, &mut vec![0.0; x.len()]))
}

/// Hard recurrence only; leaves the final residual in `residual`.
pub(crate) fn encode_codes_unchecked(
    x: &[f64],
    model: &RqModel,
    residual: &mut Vec<f64>,
) -> CodeSequence {
    residual.clear();
    residual.extend_from_slice(x);
    let cb = model.codebook();
    let mut codes = Vec::with_capacity(model.levels());
    for s in model.level_scales() {
        let (b, _) = nearest_scaled(residual, cb, s);
        residual
            .iter_mut()
            .zip(cb.codeword(b))
            .for_each(|(h, c)| *h -= s * c);
        codes.push(b as u32);
    }
    CodeSequence(codes)
}

/// Runs the recurrence on `x` and records the hard and soft paths.
pub fn encode(x: &[f64], model: &RqModel) -> Result<(CodeSequence, QuantTrace)> {
    model.check_input(x)?;
    Ok(encode_unchecked(x, model))
}

pub(crate) fn encode_unchecked(x: &[f64], model: &RqModel) -> (CodeSequence, QuantTrace) {
    let dim = model.dim();
    let levels = model.levels();
    let cb = model.codebook();

    let mut states = Vec::with_capacity((levels + 1) * dim);
    states.extend_from_slice(x);
    let mut hard_partials = Vec::with_capacity(levels * dim);
    let mut soft_partials = Vec::with_capacity(levels * dim);
    let mut soft_probs = Vec::with_capacity(levels);
    let mut per_level_hard_err = Vec::with_capacity(levels);
    let mut per_level_soft_err = Vec::with_capacity(levels);
    let mut codes = Vec::with_capacity(levels);

    // x minus the accumulated soft reconstruction
    let mut soft_gap = x.to_vec();

    for (m, s) in model.level_scales().into_iter().enumerate() {
        let h_prev = states[m * dim..(m + 1) * dim].to_vec();

        let (b, _) = nearest_scaled(&h_prev, cb, s);
        codes.push(b as u32);
        let q_hat: Vec<f64> = cb.codeword(b).iter().map(|c| s * c).collect();
        let h_next: Vec<f64> = h_prev.iter().zip(&q_hat).map(|(h, q)| h - q).collect();
        per_level_hard_err.push(norm(&h_next));

        let (probs, _) = soft_probs_scaled(&h_prev, cb, s, model.gamma());
        let q_tilde = weighted_codeword_sum(&probs, cb, s);
        soft_gap.iter_mut().zip(&q_tilde).for_each(|(g, q)| *g -= q);
        per_level_soft_err.push(norm(&soft_gap));

        states.extend_from_slice(&h_next);
        hard_partials.extend_from_slice(&q_hat);
        soft_partials.extend_from_slice(&q_tilde);
        soft_probs.push(probs);
    }

    (
        CodeSequence(codes),
        QuantTrace {
            dim,
            states,
            hard_partials,
            soft_partials,
            soft_probs,
            per_level_hard_err,
            per_level_soft_err,
        },
    )
}

/// Prefix reconstruction `sum_{i<=m} w^(i-1) C_{b_i}`.
pub fn reconstruct_hard(codes: &CodeSequence, model: &RqModel, m: usize) -> Result<Vec<f64>> {
    if m == 0 || m > codes.levels() || m > model.levels() {
        return domain(format!(
            "reconstruction level {m} out of range 1..={}",
            codes.levels().min(model.levels())
        ));
    }
    if let Some(bad) = codes.indices()[..m].iter().find(|&&b| b as usize >= model.k()) {
        return domain(format!("code index {bad} out of range for K={}", model.k()));
    }
    Ok(reconstruct_hard_unchecked(&codes.indices()[..m], model))
}

pub(crate) fn reconstruct_hard_unchecked(codes: &[u32], model: &RqModel) -> Vec<f64> {
    let cb = model.codebook();
    let mut out = vec![0.0; cb.dim()];
    for (b, s) in codes.iter().zip(level_scales(model.scale(), codes.len())) {
        out.iter_mut()
            .zip(cb.codeword(*b as usize))
            .for_each(|(o, c)| *o += s * c);
    }
    out
}

/// Sum of the first `m` soft quantizations recorded in `trace`.
pub fn reconstruct_soft(trace: &QuantTrace, m: usize) -> Result<Vec<f64>> {
    if m == 0 || m > trace.levels() {
        return domain(format!(
            "reconstruction level {m} out of range 1..={}",
            trace.levels()
        ));
    }
    let mut out = vec![0.0; trace.dim];
    for level in 1..=m {
        out.iter_mut()
            .zip(trace.soft_partial(level))
            .for_each(|(o, q)| *o += q);
    }
    Ok(out)
}
