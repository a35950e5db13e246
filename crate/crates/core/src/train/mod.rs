//! Gradient training of the shared codebook and scale factor.
//!
//! Training runs in up to three stages:
//!
//! 1. (optional) fit a linear refinement head on labeled features with the
//!    triplet and adaptive-margin losses;
//! 2. one quantization level, optimizing the enabled distortion losses
//!    (plus the refinement losses when stage 1 ran);
//! 3. the full depth, same losses, until the epoch budget is spent or the
//!    total loss stops moving.
//!
//! Each epoch visits the data in a freshly shuffled order drawn from the
//! config seed, so runs are reproducible.

pub mod adam;
pub mod head;
pub mod kmeans;
pub mod losses;

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::FeatureMatrix;
use crate::error::{config, Error, Result};
use crate::quant::{encode_codes_unchecked, norm, Codebook, RqModel};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use head::RefinementHead;
pub use kmeans::{kmeans, kmeans_init, KMeans};
pub use losses::{
    adaptive_margin_loss, distortion_losses, grad_hard_distortion, grad_soft_distortion,
    hard_distortion, triplet_loss, DistortionReport, LabelEmbeddings, ModelGrad, TripletTerm,
};

/// Which loss terms are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    pub hard_distortion: bool,
    pub soft_distortion: bool,
    pub joint_central: bool,
    pub triplet: bool,
    pub adaptive_margin: bool,
}

impl LossFlags {
    pub const NONE: Self = Self {
        hard_distortion: false,
        soft_distortion: false,
        joint_central: false,
        triplet: false,
        adaptive_margin: false,
    };

    /// Hard, soft and joint distortion.
    pub const DISTORTION: Self = Self {
        hard_distortion: true,
        soft_distortion: true,
        joint_central: true,
        ..Self::NONE
    };

    pub const ALL: Self = Self {
        triplet: true,
        adaptive_margin: true,
        ..Self::DISTORTION
    };

    pub fn any_distortion(&self) -> bool {
        self.hard_distortion || self.soft_distortion || self.joint_central
    }

    pub fn any_refinement(&self) -> bool {
        self.triplet || self.adaptive_margin
    }
}

impl Default for LossFlags {
    fn default() -> Self {
        Self::DISTORTION
    }
}

impl FromStr for LossFlags {
    type Err = Error;

    /// Comma-separated names: `hard`, `soft`, `joint`, `triplet`, `margin`
    /// (or the long field names).
    fn from_str(s: &str) -> Result<Self> {
        let mut flags = Self::NONE;
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            match name {
                "hard" | "hard_distortion" => flags.hard_distortion = true,
                "soft" | "soft_distortion" => flags.soft_distortion = true,
                "joint" | "joint_central" => flags.joint_central = true,
                "triplet" => flags.triplet = true,
                "margin" | "adaptive_margin" => flags.adaptive_margin = true,
                other => return config(format!("unknown loss flag '{other}'")),
            }
        }
        if flags == Self::NONE {
            return config("no loss terms selected");
        }
        Ok(flags)
    }
}

impl fmt::Display for LossFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.hard_distortion, "hard"),
            (self.soft_distortion, "soft"),
            (self.joint_central, "joint"),
            (self.triplet, "triplet"),
            (self.adaptive_margin, "margin"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        f.write_str(&names.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CodebookInit {
    /// Gaussian entries matching the per-dimension mean and spread of the data.
    Random,
    KMeans { iters: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleInit {
    /// Uniform in `[0.1, 0.9]`.
    Random,
    /// Mean first-level residual norm over mean selected codeword norm.
    DataDriven,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub m: usize,
    pub gamma: f64,
    /// When set, gamma moves linearly to this value over stages 2 and 3.
    pub gamma_final: Option<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub epochs_stage3: usize,
    pub enable_stage1: bool,
    pub loss_flags: LossFlags,
    pub triplet_margin: f64,
    pub seed: u64,
    pub init: CodebookInit,
    pub scale_init: ScaleInit,
    /// Widths of the two refinement blocks. Defaults to half the input
    /// dimension and the label-embedding dimension (64 without embeddings).
    pub head_widths: Option<(usize, usize)>,
    /// Return the parameters with the lowest full-data hard distortion seen
    /// (initialization included) instead of the last ones.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            k: 256,
            m: 4,
            gamma: 20.0,
            gamma_final: None,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            batch_size: 256,
            epochs_stage1: 10,
            epochs_stage2: 10,
            epochs_stage3: 20,
            enable_stage1: false,
            loss_flags: LossFlags::default(),
            triplet_margin: 1.0,
            seed: 0,
            init: CodebookInit::KMeans { iters: 25 },
            scale_init: ScaleInit::Random,
            head_widths: None,
            keep_best: true,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.k < 2 || !self.k.is_power_of_two() || self.k > RqModel::MAX_K {
            return config(format!("k={} must be a power of two in [2, {}]", self.k, RqModel::MAX_K));
        }
        if self.m == 0 {
            return config("m must be at least 1");
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return config(format!("gamma must be positive, got {}", self.gamma));
        }
        if let Some(g) = self.gamma_final {
            if !(g > 0.0 && g.is_finite()) {
                return config(format!("final gamma must be positive, got {g}"));
            }
        }
        if self.batch_size == 0 {
            return config("batch size must be at least 1");
        }
        if !(self.triplet_margin >= 0.0 && self.triplet_margin.is_finite()) {
            return config("triplet margin must be >= 0");
        }
        if self.enable_stage1 && !self.loss_flags.any_refinement() {
            return config("feature refinement needs the triplet or margin loss");
        }
        if !self.enable_stage1 && self.loss_flags.any_refinement() {
            return config("triplet/margin losses need feature refinement (stage 1) enabled");
        }
        if !self.loss_flags.any_distortion() && (self.epochs_stage2 + self.epochs_stage3) > 0 {
            return config("stages 2 and 3 need at least one distortion loss");
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub levels: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e_hard: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e_soft: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e_joint: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub triplet: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adaptive_margin: Option<f64>,
    pub total: f64,
    /// Full-data hard distortion at the target depth after this epoch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monitor_e_hard: Option<f64>,
    pub gamma: f64,
    pub scale: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: RqModel,
    pub head: Option<RefinementHead>,
    pub log: Vec<EpochRecord>,
    /// Full-data hard distortion of the initialized model at the target depth.
    pub init_e_hard: f64,
    /// Same measure for the returned model.
    pub final_e_hard: f64,
}

const CONVERGENCE_TOL: f64 = 1e-6;
const CONVERGENCE_WINDOW: usize = 5;
const MIN_SCALE: f64 = 1e-6;
const SAMPLE_TRIES: usize = 100;

// independent RNG streams derived from the seed
const STREAM_HEAD: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_TRIPLET: u64 = 4;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Random codebook with entries drawn per dimension from the data's mean and
/// standard deviation.
pub fn random_codebook(features: &FeatureMatrix, k: usize, seed: u64) -> Result<Codebook> {
    let dim = features.dim();
    let n = features.rows().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for x in features.iter_rows() {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; dim];
    for x in features.iter_rows() {
        var.iter_mut()
            .zip(x)
            .zip(&mean)
            .for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
    }
    let mut rng = rng_for(seed, STREAM_INIT);
    let mut data = Vec::with_capacity(k * dim);
    for _ in 0..k {
        for d in 0..dim {
            let dist = Normal::new(mean[d], var[d].sqrt())
                .map_err(|e| Error::Domain(e.to_string()))?;
            data.push(dist.sample(&mut rng));
        }
    }
    Codebook::new(data, dim)
}

fn data_driven_scale(features: &FeatureMatrix, codebook: &Codebook) -> f64 {
    let probe = RqModel::new_any_k(codebook.clone(), 1.0, 1.0, 1).expect("valid probe model");
    let mut residual = Vec::new();
    let (mut res_sum, mut cw_sum) = (0.0, 0.0);
    for x in features.iter_rows() {
        let codes = encode_codes_unchecked(x, &probe, &mut residual);
        res_sum += norm(&residual);
        cw_sum += norm(codebook.codeword(codes.indices()[0] as usize));
    }
    if cw_sum > 0.0 {
        (res_sum / cw_sum).clamp(1e-3, 1.0)
    } else {
        0.5
    }
}

#[derive(Default)]
struct EpochSums {
    e_hard: f64,
    e_soft: f64,
    e_joint: f64,
    triplet: f64,
    margin: f64,
    batches: usize,
}

struct Trainer<'a> {
    features: &'a FeatureMatrix,
    config: &'a TrainConfig,
    embeddings: Option<&'a LabelEmbeddings>,
    head: Option<RefinementHead>,
    model: RqModel,
    shuffle_rng: ChaCha8Rng,
    triplet_rng: ChaCha8Rng,
    log: Vec<EpochRecord>,
    best: Option<(f64, RqModel, Option<RefinementHead>)>,
    quant_epoch: usize,
    started: Instant,
}

impl Trainer<'_> {
    fn refined(&self) -> Result<Cow<'_, FeatureMatrix>> {
        Ok(match &self.head {
            Some(h) => Cow::Owned(h.transform(self.features)?),
            None => Cow::Borrowed(self.features),
        })
    }

    fn monitor(&self) -> Result<f64> {
        let target = self.model.with_levels(self.config.m)?;
        hard_distortion(&*self.refined()?, &target)
    }

    fn gamma_at(&self, epoch: usize) -> f64 {
        let total = self.config.epochs_stage2 + self.config.epochs_stage3;
        match self.config.gamma_final {
            Some(end) if total > 1 => {
                let t = epoch as f64 / (total - 1) as f64;
                self.config.gamma + (end - self.config.gamma) * t
            }
            Some(end) if total == 1 => end,
            _ => self.config.gamma,
        }
    }

    /// Picks a positive and a negative partner for `anchor` by rejection
    /// sampling. Returns `None` when either cannot be found.
    fn sample_triplet(&mut self, anchor: usize) -> Option<(usize, usize)> {
        let n = self.features.rows();
        let mut pos = None;
        for _ in 0..SAMPLE_TRIES {
            let j = self.triplet_rng.random_range(0..n);
            if j != anchor && self.features.shares_label(anchor, j) == Some(true) {
                pos = Some(j);
                break;
            }
        }
        let mut neg = None;
        for _ in 0..SAMPLE_TRIES {
            let j = self.triplet_rng.random_range(0..n);
            if self.features.shares_label(anchor, j) == Some(false) {
                neg = Some(j);
                break;
            }
        }
        Some((pos?, neg?))
    }

    fn head_len(&self) -> usize {
        self.head.as_ref().map_or(0, |h| h.params().len())
    }

    /// One optimizer step on the rows in `batch`. `quantize` selects whether
    /// the distortion losses participate (stages 2 and 3).
    fn step(
        &mut self,
        batch: &[usize],
        quantize: bool,
        adam: &mut AdamState,
        sums: &mut EpochSums,
    ) -> Result<()> {
        let flags = self.config.loss_flags;
        let cb_len = self.model.k() * self.model.dim();
        let head_off = if quantize { cb_len + 1 } else { 0 };
        let mut grad = vec![0.0; head_off + self.head_len()];

        // forward through the head
        let fwds: Option<Vec<head::HeadForward>> = self
            .head
            .as_ref()
            .map(|h| batch.iter().map(|&i| h.forward(self.features.row(i))).collect());
        let mut d_feat: Vec<Vec<f64>> = match &fwds {
            Some(f) => vec![vec![0.0; f[0].feature.len()]; batch.len()],
            None => Vec::new(),
        };
        let mut d_second: Vec<Option<Vec<f64>>> = vec![None; batch.len()];

        if quantize {
            let feats = match &fwds {
                Some(f) => FeatureMatrix::new(
                    f.iter().flat_map(|h| h.feature.iter().copied()).collect(),
                    self.model.dim(),
                )?,
                None => self.features.select(batch),
            };
            let need_hard = flags.hard_distortion || flags.joint_central;
            let need_soft = flags.soft_distortion || flags.joint_central;
            let bg = losses::batch_grad(&feats, &self.model, need_hard, need_soft, fwds.is_some())?;
            let r = &bg.report;
            let sign = if flags.joint_central {
                (r.e_hard - r.e_soft).signum() * f64::from(u8::from(r.e_hard != r.e_soft))
            } else {
                0.0
            };
            let c_hard = f64::from(u8::from(flags.hard_distortion)) + sign;
            let c_soft = f64::from(u8::from(flags.soft_distortion)) - sign;
            for (g, c, dx) in [(&bg.hard, c_hard, &bg.dx_hard), (&bg.soft, c_soft, &bg.dx_soft)] {
                if let Some(g) = g {
                    grad[..cb_len]
                        .iter_mut()
                        .zip(&g.codebook)
                        .for_each(|(a, b)| *a += c * b);
                    grad[cb_len] += c * g.scale;
                }
                if let Some(dx) = dx {
                    let dim = self.model.dim();
                    for (i, df) in d_feat.iter_mut().enumerate() {
                        df.iter_mut()
                            .zip(&dx[i * dim..(i + 1) * dim])
                            .for_each(|(a, b)| *a += c * b);
                    }
                }
            }
            if flags.hard_distortion {
                sums.e_hard += r.e_hard;
            }
            if flags.soft_distortion {
                sums.e_soft += r.e_soft;
            }
            if flags.joint_central {
                sums.e_joint += r.e_joint;
            }
        }

        if let (Some(head), Some(fwds)) = (self.head.clone(), fwds.as_ref()) {
            let mut head_grad = vec![0.0; head.params().len()];

            if flags.adaptive_margin {
                let emb = self.embeddings.expect("validated: embeddings present");
                let mut total = 0.0;
                let inv = 1.0 / batch.len() as f64;
                for (slot, (&i, f)) in batch.iter().zip(fwds).enumerate() {
                    let labels = self.features.label_set(i).expect("validated: labels present");
                    let (l, g) = adaptive_margin_loss(head.second_block(f), labels, emb)?;
                    total += l;
                    d_second[slot] = Some(g.iter().map(|v| v * inv).collect());
                }
                sums.margin += total * inv;
            }

            if flags.triplet {
                let mut triplets = Vec::new();
                for (slot, &i) in batch.iter().enumerate() {
                    if let Some((p, n)) = self.sample_triplet(i) {
                        triplets.push((slot, p, n));
                    }
                }
                if !triplets.is_empty() {
                    let inv = 1.0 / triplets.len() as f64;
                    let mut total = 0.0;
                    for &(slot, p, n) in &triplets {
                        let fp = head.forward(self.features.row(p));
                        let fn_ = head.forward(self.features.row(n));
                        let t = triplet_loss(
                            &fwds[slot].feature,
                            &fp.feature,
                            &fn_.feature,
                            self.config.triplet_margin,
                        )?;
                        total += t.loss;
                        if t.loss > 0.0 {
                            d_feat[slot]
                                .iter_mut()
                                .zip(&t.grad_anchor)
                                .for_each(|(a, b)| *a += inv * b);
                            let gp: Vec<f64> = t.grad_positive.iter().map(|v| v * inv).collect();
                            let gn: Vec<f64> = t.grad_negative.iter().map(|v| v * inv).collect();
                            head.backward(self.features.row(p), &fp, &gp, None, &mut head_grad);
                            head.backward(self.features.row(n), &fn_, &gn, None, &mut head_grad);
                        }
                    }
                    sums.triplet += total * inv;
                }
            }

            for (slot, &i) in batch.iter().enumerate() {
                head.backward(
                    self.features.row(i),
                    &fwds[slot],
                    &d_feat[slot],
                    d_second[slot].as_deref(),
                    &mut head_grad,
                );
            }
            grad[head_off..].copy_from_slice(&head_grad);
        }

        // assemble, step, scatter back
        let mut params = Vec::with_capacity(grad.len());
        if quantize {
            params.extend_from_slice(self.model.codebook().as_slice());
            params.push(self.model.scale());
        }
        if let Some(h) = &self.head {
            params.extend_from_slice(h.params());
        }
        adam_step(&mut params, &grad, adam, &self.config.adam())?;
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("training diverged: non-finite parameter".into()));
        }
        if quantize {
            let w = params[cb_len].max(MIN_SCALE);
            self.model.set_params(&params[..cb_len], w);
        }
        if let Some(h) = self.head.as_mut() {
            h.params_mut().copy_from_slice(&params[head_off..]);
        }
        sums.batches += 1;
        Ok(())
    }

    fn run_stage(&mut self, stage: u8, epochs: usize) -> Result<()> {
        if epochs == 0 {
            return Ok(());
        }
        let quantize = stage >= 2;
        let levels = if stage == 2 { 1 } else { self.config.m };
        if quantize {
            self.model = self.model.with_levels(levels)?;
        }
        let param_len = if quantize {
            self.model.k() * self.model.dim() + 1
        } else {
            0
        } + self.head_len();
        let mut adam = AdamState::new(param_len);
        let mut order: Vec<usize> = (0..self.features.rows()).collect();
        let mut totals: Vec<f64> = Vec::new();
        let flags = self.config.loss_flags;

        for epoch in 0..epochs {
            if quantize {
                let gamma = self.gamma_at(self.quant_epoch);
                self.model = self.model.with_gamma(gamma)?;
                self.quant_epoch += 1;
            }
            order.shuffle(&mut self.shuffle_rng);
            let mut sums = EpochSums::default();
            for batch in order.clone().chunks(self.config.batch_size) {
                self.step(batch, quantize, &mut adam, &mut sums)?;
            }
            let nb = sums.batches.max(1) as f64;
            let term = |on: bool, v: f64| on.then_some(v / nb);
            let e_hard = term(quantize && flags.hard_distortion, sums.e_hard);
            let e_soft = term(quantize && flags.soft_distortion, sums.e_soft);
            let e_joint = term(quantize && flags.joint_central, sums.e_joint);
            let triplet = term(flags.triplet, sums.triplet);
            let adaptive_margin = term(flags.adaptive_margin, sums.margin);
            let total = [e_hard, e_soft, e_joint, triplet, adaptive_margin]
                .iter()
                .flatten()
                .sum::<f64>();

            let monitor_e_hard = if quantize {
                let e = self.monitor()?;
                let better = self.best.as_ref().is_none_or(|(b, _, _)| e < *b);
                if better {
                    self.best = Some((e, self.model.clone(), self.head.clone()));
                }
                Some(e)
            } else {
                None
            };

            self.log.push(EpochRecord {
                stage,
                epoch,
                levels: if quantize { levels } else { 0 },
                e_hard,
                e_soft,
                e_joint,
                triplet,
                adaptive_margin,
                total,
                monitor_e_hard,
                gamma: self.model.gamma(),
                scale: self.model.scale(),
                wall_ms: self.started.elapsed().as_secs_f64() * 1e3,
            });

            totals.push(total);
            if totals.len() > CONVERGENCE_WINDOW {
                let prev = totals[totals.len() - 1 - CONVERGENCE_WINDOW];
                if (total - prev).abs() <= CONVERGENCE_TOL * prev.abs() {
                    break;
                }
            }
        }
        Ok(())
    }
}

/// Trains a model on `features`. `embeddings` is required when the
/// adaptive-margin loss is enabled.
pub fn train(
    features: &FeatureMatrix,
    config: &TrainConfig,
    embeddings: Option<&LabelEmbeddings>,
) -> Result<TrainOutput> {
    config.validate()?;
    if features.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    if config.enable_stage1 && !features.has_labels() {
        return config_err("feature refinement requires labels");
    }
    if config.loss_flags.adaptive_margin && embeddings.is_none() {
        return config_err("the margin loss requires label embeddings");
    }

    let head = if config.enable_stage1 {
        let (a, b) = config.head_widths.unwrap_or((
            features.dim().div_ceil(2),
            embeddings.map_or(64, LabelEmbeddings::dim),
        ));
        if let Some(e) = embeddings {
            if config.loss_flags.adaptive_margin && e.dim() != b {
                return config_err(format!(
                    "second head block width {b} must equal the embedding dimension {}",
                    e.dim()
                ));
            }
        }
        Some(RefinementHead::init(features.dim(), a, b, &mut rng_for(config.seed, STREAM_HEAD))?)
    } else {
        None
    };

    // placeholder model until the codebook is initialized after stage 1
    let placeholder = RqModel::new_any_k(
        Codebook::new(vec![0.0; head.as_ref().map_or(features.dim(), |h| h.out_dim())], head.as_ref().map_or(features.dim(), |h| h.out_dim()))?,
        1.0,
        config.gamma,
        1,
    )?;
    let mut trainer = Trainer {
        features,
        config,
        embeddings,
        head,
        model: placeholder,
        shuffle_rng: rng_for(config.seed, STREAM_SHUFFLE),
        triplet_rng: rng_for(config.seed, STREAM_TRIPLET),
        log: Vec::new(),
        best: None,
        quant_epoch: 0,
        started: Instant::now(),
    };

    if config.enable_stage1 {
        trainer.run_stage(1, config.epochs_stage1)?;
    }

    let refined = trainer.refined()?.into_owned();
    let codebook = match config.init {
        CodebookInit::Random => random_codebook(&refined, config.k, config.seed)?,
        CodebookInit::KMeans { iters } => kmeans_init(&refined, config.k, iters, config.seed)?,
    };
    let scale = match config.scale_init {
        ScaleInit::Random => rng_for(config.seed, STREAM_INIT).random_range(0.1..=0.9),
        ScaleInit::DataDriven => data_driven_scale(&refined, &codebook),
    };
    trainer.model = RqModel::new(codebook, scale, trainer.gamma_at(0), config.m)?;
    let init_e_hard = hard_distortion(&refined, &trainer.model)?;
    trainer.best = Some((init_e_hard, trainer.model.clone(), trainer.head.clone()));

    trainer.run_stage(2, config.epochs_stage2)?;
    trainer.run_stage(3, config.epochs_stage3)?;

    let final_gamma = trainer.model.gamma();
    let (model, head) = if config.keep_best {
        let (_, m, h) = trainer.best.take().expect("initialized above");
        (m, h)
    } else {
        (trainer.model.clone(), trainer.head.clone())
    };
    let model = model.with_levels(config.m)?.with_gamma(final_gamma)?;
    let final_refined = match &head {
        Some(h) => Cow::Owned(h.transform(features)?),
        None => Cow::Borrowed(features),
    };
    let final_e_hard = hard_distortion(&final_refined, &model)?;
    Ok(TrainOutput {
        model,
        head,
        log: trainer.log,
        init_e_hard,
        final_e_hard,
    })
}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    config(msg)
}
