//! Distortion losses over the recurrence, metric-learning losses, and their
//! analytic gradients.
//!
//! Backward rule for the recurrence: the discrete argmin selections are held
//! fixed. Within that region everything else is differentiated exactly,
//! including the dependence of each level's residual input on the codewords
//! selected earlier and on `w`.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::FeatureMatrix;
use crate::error::{domain, Result};
use crate::quant::{dot, encode_unchecked, level_scales, norm, RqModel};

/// Samples per parallel work unit. Partial sums are combined in chunk order,
/// so results do not depend on the number of worker threads.
const CHUNK: usize = 64;

/// Batch-averaged distortions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistortionReport {
    pub e_hard: f64,
    pub e_soft: f64,
    pub e_joint: f64,
    pub per_level_hard: Vec<f64>,
    pub per_level_soft: Vec<f64>,
}

/// Gradient with respect to the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    /// `K x D`, row-major like the codebook.
    pub codebook: Vec<f64>,
    pub scale: f64,
}

impl ModelGrad {
    fn zeros(len: usize) -> Self {
        Self {
            codebook: vec![0.0; len],
            scale: 0.0,
        }
    }

    fn add(&mut self, other: &Self) {
        self.codebook
            .iter_mut()
            .zip(&other.codebook)
            .for_each(|(a, b)| *a += b);
        self.scale += other.scale;
    }

    fn scale_by(&mut self, f: f64) {
        self.codebook.iter_mut().for_each(|v| *v *= f);
        self.scale *= f;
    }
}

fn check_batch(batch: &FeatureMatrix, model: &RqModel) -> Result<()> {
    if batch.is_empty() {
        return domain("empty batch");
    }
    if batch.dim() != model.dim() {
        return domain(format!(
            "batch has dimension {}, model expects {}",
            batch.dim(),
            model.dim()
        ));
    }
    Ok(())
}

/// `E_h`, `E_s` summed over levels and averaged over the batch, plus
/// `E_j = |E_h - E_s|`.
pub fn distortion_losses(batch: &FeatureMatrix, model: &RqModel) -> Result<DistortionReport> {
    check_batch(batch, model)?;
    let levels = model.levels();
    let n = batch.rows();
    let rows: Vec<&[f64]> = batch.iter_rows().collect();
    let partial: Vec<(Vec<f64>, Vec<f64>)> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut h = vec![0.0; levels];
            let mut s = vec![0.0; levels];
            for x in chunk {
                let (_, trace) = encode_unchecked(x, model);
                h.iter_mut()
                    .zip(&trace.per_level_hard_err)
                    .for_each(|(a, b)| *a += b);
                s.iter_mut()
                    .zip(&trace.per_level_soft_err)
                    .for_each(|(a, b)| *a += b);
            }
            (h, s)
        })
        .collect();
    let mut per_level_hard = vec![0.0; levels];
    let mut per_level_soft = vec![0.0; levels];
    for (h, s) in &partial {
        per_level_hard.iter_mut().zip(h).for_each(|(a, b)| *a += b);
        per_level_soft.iter_mut().zip(s).for_each(|(a, b)| *a += b);
    }
    per_level_hard.iter_mut().for_each(|v| *v /= n as f64);
    per_level_soft.iter_mut().for_each(|v| *v /= n as f64);
    let e_hard: f64 = per_level_hard.iter().sum();
    let e_soft: f64 = per_level_soft.iter().sum();
    Ok(DistortionReport {
        e_hard,
        e_soft,
        e_joint: (e_hard - e_soft).abs(),
        per_level_hard,
        per_level_soft,
    })
}

/// Mean hard distortion `E_h` only, skipping the soft path.
pub fn hard_distortion(batch: &FeatureMatrix, model: &RqModel) -> Result<f64> {
    check_batch(batch, model)?;
    let rows: Vec<&[f64]> = batch.iter_rows().collect();
    let sums: Vec<f64> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let cb = model.codebook();
            let mut h = Vec::with_capacity(model.dim());
            let mut total = 0.0;
            for x in chunk {
                h.clear();
                h.extend_from_slice(x);
                for s in model.level_scales() {
                    let (b, _) = crate::quant::nearest_scaled(&h, cb, s);
                    h.iter_mut()
                        .zip(cb.codeword(b))
                        .for_each(|(v, c)| *v -= s * c);
                    total += norm(&h);
                }
            }
            total
        })
        .collect();
    Ok(sums.iter().sum::<f64>() / batch.rows() as f64)
}

/// Batch-mean distortions together with gradients of the hard and soft
/// paths, kept separate so callers can weight them (e.g. for `E_j`).
#[derive(Debug, Clone)]
pub(crate) struct BatchGrad {
    pub report: DistortionReport,
    pub hard: Option<ModelGrad>,
    pub soft: Option<ModelGrad>,
    /// Per-sample input gradients (`N x D`), already divided by `N`.
    pub dx_hard: Option<Vec<f64>>,
    pub dx_soft: Option<Vec<f64>>,
}

struct ChunkAcc {
    e_hard: Vec<f64>,
    e_soft: Vec<f64>,
    hard: Option<ModelGrad>,
    soft: Option<ModelGrad>,
    dx_hard: Vec<f64>,
    dx_soft: Vec<f64>,
}

pub(crate) fn batch_grad(
    batch: &FeatureMatrix,
    model: &RqModel,
    want_hard: bool,
    want_soft: bool,
    want_dx: bool,
) -> Result<BatchGrad> {
    check_batch(batch, model)?;
    let levels = model.levels();
    let dim = model.dim();
    let plen = model.k() * dim;
    let n = batch.rows();
    let rows: Vec<&[f64]> = batch.iter_rows().collect();

    let chunks: Vec<ChunkAcc> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = ChunkAcc {
                e_hard: vec![0.0; levels],
                e_soft: vec![0.0; levels],
                hard: want_hard.then(|| ModelGrad::zeros(plen)),
                soft: want_soft.then(|| ModelGrad::zeros(plen)),
                dx_hard: Vec::new(),
                dx_soft: Vec::new(),
            };
            let mut dx = vec![0.0; dim];
            for x in chunk {
                let (codes, trace) = encode_unchecked(x, model);
                acc.e_hard
                    .iter_mut()
                    .zip(&trace.per_level_hard_err)
                    .for_each(|(a, b)| *a += b);
                acc.e_soft
                    .iter_mut()
                    .zip(&trace.per_level_soft_err)
                    .for_each(|(a, b)| *a += b);
                if let Some(g) = acc.hard.as_mut() {
                    hard_backward(model, codes.indices(), &trace, g, &mut dx);
                    if want_dx {
                        acc.dx_hard.extend_from_slice(&dx);
                    }
                }
                if let Some(g) = acc.soft.as_mut() {
                    soft_backward(model, codes.indices(), &trace, g, &mut dx);
                    if want_dx {
                        acc.dx_soft.extend_from_slice(&dx);
                    }
                }
            }
            acc
        })
        .collect();

    let inv = 1.0 / n as f64;
    let mut per_level_hard = vec![0.0; levels];
    let mut per_level_soft = vec![0.0; levels];
    let mut hard = want_hard.then(|| ModelGrad::zeros(plen));
    let mut soft = want_soft.then(|| ModelGrad::zeros(plen));
    let mut dx_hard = (want_hard && want_dx).then(|| Vec::with_capacity(n * dim));
    let mut dx_soft = (want_soft && want_dx).then(|| Vec::with_capacity(n * dim));
    for c in &chunks {
        per_level_hard.iter_mut().zip(&c.e_hard).for_each(|(a, b)| *a += b);
        per_level_soft.iter_mut().zip(&c.e_soft).for_each(|(a, b)| *a += b);
        if let (Some(g), Some(cg)) = (hard.as_mut(), c.hard.as_ref()) {
            g.add(cg);
        }
        if let (Some(g), Some(cg)) = (soft.as_mut(), c.soft.as_ref()) {
            g.add(cg);
        }
        if let Some(d) = dx_hard.as_mut() {
            d.extend(c.dx_hard.iter().map(|v| v * inv));
        }
        if let Some(d) = dx_soft.as_mut() {
            d.extend(c.dx_soft.iter().map(|v| v * inv));
        }
    }
    per_level_hard.iter_mut().for_each(|v| *v *= inv);
    per_level_soft.iter_mut().for_each(|v| *v *= inv);
    if let Some(g) = hard.as_mut() {
        g.scale_by(inv);
    }
    if let Some(g) = soft.as_mut() {
        g.scale_by(inv);
    }
    let e_hard: f64 = per_level_hard.iter().sum();
    let e_soft: f64 = per_level_soft.iter().sum();
    Ok(BatchGrad {
        report: DistortionReport {
            e_hard,
            e_soft,
            e_joint: (e_hard - e_soft).abs(),
            per_level_hard,
            per_level_soft,
        },
        hard,
        soft,
        dx_hard,
        dx_soft,
    })
}

/// d(w^(m-1))/dw for each level.
fn scale_derivs(w: f64, levels: usize) -> Vec<f64> {
    let powers = level_scales(w, levels);
    (0..levels)
        .map(|m| if m == 0 { 0.0 } else { m as f64 * powers[m - 1] })
        .collect()
}

fn unit_or_zero(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Adds the gradient of `sum_m ||h^m||` for one sample into `grad` and writes
/// the input gradient into `dx`.
fn hard_backward(
    model: &RqModel,
    codes: &[u32],
    trace: &crate::quant::QuantTrace,
    grad: &mut ModelGrad,
    dx: &mut [f64],
) {
    let levels = codes.len();
    let dim = model.dim();
    let scales = model.level_scales();
    let dscales = scale_derivs(model.scale(), levels);
    let cb = model.codebook();

    // running = sum_{m >= i} h^m / ||h^m||
    let mut running = vec![0.0; dim];
    for i in (1..=levels).rev() {
        let u = unit_or_zero(trace.state(i));
        running.iter_mut().zip(&u).for_each(|(r, v)| *r += v);
        // h^m = x - sum_{i<=m} s_i C_{b_i}
        let b = codes[i - 1] as usize;
        let row = &mut grad.codebook[b * dim..(b + 1) * dim];
        row.iter_mut()
            .zip(&running)
            .for_each(|(g, r)| *g -= scales[i - 1] * r);
        grad.scale -= dscales[i - 1] * dot(&running, cb.codeword(b));
    }
    dx.copy_from_slice(&running);
}

/// Adds the gradient of `sum_m ||sum_{i<=m} q~^i - x||` for one sample into
/// `grad` and writes the input gradient into `dx`.
fn soft_backward(
    model: &RqModel,
    codes: &[u32],
    trace: &crate::quant::QuantTrace,
    grad: &mut ModelGrad,
    dx: &mut [f64],
) {
    let levels = codes.len();
    let dim = model.dim();
    let k = model.k();
    let gamma = model.gamma();
    let scales = model.level_scales();
    let dscales = scale_derivs(model.scale(), levels);
    let cb = model.codebook();
    let x = trace.state(0);

    // v_m = (S_m - x) / ||S_m - x||, S_m the accumulated soft reconstruction.
    let mut v = Vec::with_capacity(levels);
    let mut acc = vec![0.0; dim];
    for m in 1..=levels {
        acc.iter_mut()
            .zip(trace.soft_partial(m))
            .for_each(|(a, q)| *a += q);
        let gap: Vec<f64> = acc.iter().zip(x).map(|(s, xi)| s - xi).collect();
        v.push(unit_or_zero(&gap));
    }

    dx.iter_mut().for_each(|d| *d = 0.0);
    for vm in &v {
        dx.iter_mut().zip(vm).for_each(|(d, e)| *d -= e);
    }

    // g = dL/dq~^i = sum_{m >= i} v_m, walked from the last level down.
    // dh_later = sum over levels > j of dL/dh^{level-1}, used to route
    // gradient through the residual inputs into earlier selections.
    let mut g = vec![0.0; dim];
    let mut dh_later = vec![0.0; dim];
    let mut ds = vec![0.0; levels];
    let mut dy = vec![0.0; dim];
    for i in (1..=levels).rev() {
        g.iter_mut().zip(&v[i - 1]).for_each(|(a, b)| *a += b);

        let s = scales[i - 1];
        let h = trace.state(i - 1);
        let probs = &trace.soft_probs[i - 1];
        let q = trace.soft_partial(i);
        let gq = dot(&g, q);

        let mut dh = vec![0.0; dim];
        for kk in 0..k {
            let c = cb.codeword(kk);
            let p = probs[kk];
            let mut d2 = 0.0;
            let mut gy = 0.0;
            for (((dyj, cj), hj), gj) in dy.iter_mut().zip(c).zip(h).zip(&g) {
                let diff = s * cj - hj;
                *dyj = diff;
                d2 += diff * diff;
                gy += gj * s * cj;
            }
            let alpha = p * (gy - gq);
            let d = d2.sqrt();
            // dL/dd_k = -gamma * alpha; dd_k/dy_k = (y_k - h)/d_k
            let coef = if d > 0.0 { -gamma * alpha / d } else { 0.0 };
            let row = &mut grad.codebook[kk * dim..(kk + 1) * dim];
            let mut ds_k = 0.0;
            for j in 0..dim {
                let dly = p * g[j] + coef * dy[j];
                row[j] += s * dly;
                ds_k += dly * c[j];
                dh[j] -= coef * dy[j];
            }
            ds[i - 1] += ds_k;
        }

        // h^{i-1} = x - sum_{j < i} s_j C_{b_j}: the selection at level i
        // feeds every later level's input.
        let b = codes[i - 1] as usize;
        let row = &mut grad.codebook[b * dim..(b + 1) * dim];
        row.iter_mut()
            .zip(&dh_later)
            .for_each(|(r, d)| *r -= s * d);
        ds[i - 1] -= dot(&dh_later, cb.codeword(b));

        dh_later.iter_mut().zip(&dh).for_each(|(a, b)| *a += b);
    }
    dx.iter_mut().zip(&dh_later).for_each(|(d, e)| *d += e);
    grad.scale += ds.iter().zip(&dscales).map(|(a, b)| a * b).sum::<f64>();
}

/// Gradient of the batch-mean soft distortion `E_s`.
pub fn grad_soft_distortion(batch: &FeatureMatrix, model: &RqModel) -> Result<ModelGrad> {
    Ok(batch_grad(batch, model, false, true, false)?.soft.unwrap())
}

/// Gradient of the batch-mean hard distortion `E_h`, argmin selections fixed.
pub fn grad_hard_distortion(batch: &FeatureMatrix, model: &RqModel) -> Result<ModelGrad> {
    Ok(batch_grad(batch, model, true, false, false)?.hard.unwrap())
}

/// Triplet hinge value and gradients for each of its three inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletTerm {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negative: Vec<f64>,
}

/// `max(||a - p|| - ||a - n|| + margin, 0)`.
pub fn triplet_loss(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: f64,
) -> Result<TripletTerm> {
    if !(margin >= 0.0 && margin.is_finite()) {
        return domain(format!("triplet margin must be finite and >= 0, got {margin}"));
    }
    if anchor.len() != positive.len() || anchor.len() != negative.len() {
        return domain("triplet members have different dimensions");
    }
    let ap: Vec<f64> = anchor.iter().zip(positive).map(|(a, p)| a - p).collect();
    let an: Vec<f64> = anchor.iter().zip(negative).map(|(a, n)| a - n).collect();
    let value = norm(&ap) - norm(&an) + margin;
    let dim = anchor.len();
    if value <= 0.0 {
        return Ok(TripletTerm {
            loss: 0.0,
            grad_anchor: vec![0.0; dim],
            grad_positive: vec![0.0; dim],
            grad_negative: vec![0.0; dim],
        });
    }
    let u_ap = unit_or_zero(&ap);
    let u_an = unit_or_zero(&an);
    Ok(TripletTerm {
        loss: value,
        grad_anchor: u_ap.iter().zip(&u_an).map(|(a, b)| a - b).collect(),
        grad_positive: u_ap.iter().map(|v| -v).collect(),
        grad_negative: u_an,
    })
}

/// Fixed label embeddings, one row per label id.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbeddings {
    vectors: Vec<f64>,
    count: usize,
    dim: usize,
}

impl LabelEmbeddings {
    pub fn new(vectors: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || vectors.is_empty() || vectors.len() % dim != 0 {
            return domain("label embeddings must be a non-empty matrix");
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return domain("label embeddings contain a non-finite value");
        }
        let count = vectors.len() / dim;
        if let Some(i) = vectors.chunks_exact(dim).position(|r| norm(r) == 0.0) {
            return domain(format!("label embedding {i} has zero norm"));
        }
        Ok(Self { vectors, count, dim })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return domain("label embedding rows have unequal lengths");
        }
        Self::new(rows.concat(), dim)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, label: usize) -> &[f64] {
        &self.vectors[label * self.dim..(label + 1) * self.dim]
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// `sum_{i in Y} sum_{j not in Y} max(0, delta_ij - cos(v_i, z) + cos(v_j, z))`
/// with `delta_ij = 1 - cos(v_i, v_j)`. Returns the loss and `dL/dz`.
pub fn adaptive_margin_loss(
    z: &[f64],
    label_set: &[i64],
    embeddings: &LabelEmbeddings,
) -> Result<(f64, Vec<f64>)> {
    if label_set.is_empty() {
        return domain("adaptive margin loss needs at least one label");
    }
    if z.len() != embeddings.dim() {
        return domain(format!(
            "feature has dimension {}, embeddings have {}",
            z.len(),
            embeddings.dim()
        ));
    }
    let z_norm = norm(z);
    if z_norm == 0.0 || !z_norm.is_finite() {
        return domain("adaptive margin loss is undefined for a zero feature");
    }
    let mut positive = vec![false; embeddings.count()];
    for &l in label_set {
        if l < 0 || l as usize >= embeddings.count() {
            return domain(format!(
                "label {l} has no embedding ({} available)",
                embeddings.count()
            ));
        }
        positive[l as usize] = true;
    }

    let cos_z: Vec<f64> = (0..embeddings.count())
        .map(|l| cosine(embeddings.vector(l), z))
        .collect();
    // d cos(v, z) / dz = v / (|v||z|) - cos(v, z) z / |z|^2
    let dcos = |l: usize, out: &mut [f64], sign: f64| {
        let v = embeddings.vector(l);
        let vn = norm(v);
        for j in 0..z.len() {
            out[j] += sign * (v[j] / (vn * z_norm) - cos_z[l] * z[j] / (z_norm * z_norm));
        }
    };

    let mut loss = 0.0;
    let mut grad = vec![0.0; z.len()];
    for i in (0..embeddings.count()).filter(|&l| positive[l]) {
        for j in (0..embeddings.count()).filter(|&l| !positive[l]) {
            let delta = 1.0 - cosine(embeddings.vector(i), embeddings.vector(j));
            let t = delta - cos_z[i] + cos_z[j];
            if t > 0.0 {
                loss += t;
                dcos(i, &mut grad, -1.0);
                dcos(j, &mut grad, 1.0);
            }
        }
    }
    Ok((loss, grad))
}
