//! Encoded database and asymmetric-distance search.
//!
//! A raw query is compared against quantized items through a per-level
//! table of query/codeword dot products:
//!
//! `||q - x_hat||^2 = ||q||^2 - 2 sum_m w^(m-1) <q, C_{b_m}> + ||x_hat||^2`
//!
//! with `||x_hat||^2` cached per item at encode time.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::FeatureMatrix;
use crate::error::{domain, Result};
use crate::quant::{dot, encode_codes_unchecked, reconstruct_hard_unchecked, CodeSequence, RqModel};

const ENCODE_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDatabase {
    model: RqModel,
    /// `N x M` sub-indices, row-major.
    codes: Vec<u32>,
    recon_sq_norms: Vec<f64>,
    /// Optional `N x M` table: squared norm of the prefix reconstruction
    /// after each level.
    level_norms: Option<Vec<f64>>,
    ids: Vec<u64>,
    labels: Option<Vec<Vec<i64>>>,
}

fn sq_norm(v: &[f64]) -> f64 {
    dot(v, v)
}

/// Encodes every row with `model`. Ids default to row numbers and labels
/// are carried over from `features`.
pub fn encode_database(features: &FeatureMatrix, model: &RqModel) -> Result<EncodedDatabase> {
    encode_database_with(features, model, false)
}

/// Like [`encode_database`], optionally caching per-level reconstruction
/// norms for faster prefix search (costs `N x M` extra floats).
pub fn encode_database_with(
    features: &FeatureMatrix,
    model: &RqModel,
    cache_level_norms: bool,
) -> Result<EncodedDatabase> {
    if features.dim() != model.dim() {
        return domain(format!(
            "features have dimension {}, model expects {}",
            features.dim(),
            model.dim()
        ));
    }
    let rows: Vec<&[f64]> = features.iter_rows().collect();
    let levels = model.levels();
    let chunks: Vec<(Vec<u32>, Vec<f64>)> = rows
        .par_chunks(ENCODE_CHUNK)
        .map(|chunk| {
            let mut codes = Vec::with_capacity(chunk.len() * levels);
            let mut residual = Vec::with_capacity(model.dim());
            let mut norms = Vec::with_capacity(chunk.len());
            for x in chunk {
                let c = encode_codes_unchecked(x, model, &mut residual);
                norms.push(sq_norm(&reconstruct_hard_unchecked(c.indices(), model)));
                codes.extend_from_slice(c.indices());
            }
            (codes, norms)
        })
        .collect();
    let mut codes = Vec::with_capacity(rows.len() * levels);
    let mut recon_sq_norms = Vec::with_capacity(rows.len());
    for (c, n) in chunks {
        codes.extend(c);
        recon_sq_norms.extend(n);
    }
    let labels = (0..features.rows())
        .map(|i| features.label_set(i).map(<[i64]>::to_vec))
        .collect::<Option<Vec<_>>>()
        .filter(|_| features.has_labels());
    let mut db = EncodedDatabase {
        model: model.clone(),
        codes,
        recon_sq_norms,
        level_norms: None,
        ids: (0..features.rows() as u64).collect(),
        labels,
    };
    if cache_level_norms {
        db.cache_level_norms();
    }
    Ok(db)
}

impl EncodedDatabase {
    /// Builds a database from stored codes. Reconstruction norms are
    /// recomputed from the model in 64-bit.
    pub fn from_codes(model: &RqModel, codes: Vec<u32>, ids: Option<Vec<u64>>) -> Result<Self> {
        let levels = model.levels();
        if codes.len() % levels != 0 {
            return domain(format!(
                "{} code entries do not form rows of {levels}",
                codes.len()
            ));
        }
        if let Some(bad) = codes.iter().find(|&&b| b as usize >= model.k()) {
            return domain(format!("code index {bad} out of range for K={}", model.k()));
        }
        let n = codes.len() / levels;
        let ids = ids.unwrap_or_else(|| (0..n as u64).collect());
        if ids.len() != n {
            return domain(format!("{} ids for {n} items", ids.len()));
        }
        let recon_sq_norms = codes
            .par_chunks(levels.max(1))
            .map(|c| sq_norm(&reconstruct_hard_unchecked(c, model)))
            .collect();
        Ok(Self {
            model: model.clone(),
            codes,
            recon_sq_norms,
            level_norms: None,
            ids,
            labels: None,
        })
    }

    pub fn with_ids(mut self, ids: Vec<u64>) -> Result<Self> {
        if ids.len() != self.len() {
            return domain(format!("{} ids for {} items", ids.len(), self.len()));
        }
        self.ids = ids;
        Ok(self)
    }

    /// Attaches label sets (one per item), used for relevance in evaluation.
    pub fn with_labels(mut self, labels: Vec<Vec<i64>>) -> Result<Self> {
        if labels.len() != self.len() {
            return domain(format!("{} label sets for {} items", labels.len(), self.len()));
        }
        self.labels = Some(
            labels
                .into_iter()
                .map(|mut s| {
                    s.sort_unstable();
                    s.dedup();
                    s
                })
                .collect(),
        );
        Ok(self)
    }

    pub fn cache_level_norms(&mut self) {
        let levels = self.levels();
        let model = &self.model;
        let table: Vec<Vec<f64>> = self
            .codes
            .par_chunks(levels)
            .map(|c| {
                (1..=levels)
                    .map(|m| sq_norm(&reconstruct_hard_unchecked(&c[..m], model)))
                    .collect()
            })
            .collect();
        self.level_norms = Some(table.concat());
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn levels(&self) -> usize {
        self.model.levels()
    }

    pub fn model(&self) -> &RqModel {
        &self.model
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> Option<&[Vec<i64>]> {
        self.labels.as_deref()
    }

    pub fn recon_sq_norms(&self) -> &[f64] {
        &self.recon_sq_norms
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub fn item_codes(&self, i: usize) -> &[u32] {
        let m = self.levels();
        &self.codes[i * m..(i + 1) * m]
    }

    pub fn code_sequence(&self, i: usize) -> CodeSequence {
        CodeSequence::new(self.item_codes(i).to_vec())
    }

    /// Squared reconstruction norms using only the first `m` levels.
    pub fn prefix_sq_norms(&self, m: usize) -> Result<Vec<f64>> {
        let levels = self.levels();
        if m == 0 || m > levels {
            return domain(format!("prefix length {m} out of range 1..={levels}"));
        }
        if m == levels {
            return Ok(self.recon_sq_norms.clone());
        }
        if let Some(t) = &self.level_norms {
            return Ok(t.chunks_exact(levels).map(|r| r[m - 1]).collect());
        }
        Ok(self
            .codes
            .par_chunks(levels)
            .map(|c| sq_norm(&reconstruct_hard_unchecked(&c[..m], &self.model)))
            .collect())
    }
}

/// Per-query lookup table: entry `(m, k) = w^(m-1) <q, C_k>`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdcTable {
    pub dot_table: Vec<f64>,
    pub levels: usize,
    pub k: usize,
    pub query_sq_norm: f64,
}

impl AdcTable {
    #[inline]
    pub fn entry(&self, level: usize, k: usize) -> f64 {
        self.dot_table[level * self.k + k]
    }

    /// `-2 sum_m table(m, b_m)` over the given prefix codes, plus `||q||^2`.
    #[inline]
    fn partial_distance(&self, codes: &[u32]) -> f64 {
        let mut acc = 0.0;
        for (level, &b) in codes.iter().enumerate() {
            acc += self.dot_table[level * self.k + b as usize];
        }
        self.query_sq_norm - 2.0 * acc
    }
}

pub fn build_adc_table(query: &[f64], model: &RqModel) -> Result<AdcTable> {
    model.check_input(query)?;
    let k = model.k();
    let base: Vec<f64> = model.codebook().iter().map(|c| dot(query, c)).collect();
    let mut dot_table = Vec::with_capacity(model.levels() * k);
    for s in model.level_scales() {
        dot_table.extend(base.iter().map(|d| s * d));
    }
    Ok(AdcTable {
        dot_table,
        levels: model.levels(),
        k,
        query_sq_norm: sq_norm(query),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SearchHit {
    pub id: u64,
    pub distance: f64,
}

fn resolve_prefix(db: &EncodedDatabase, prefix_m: Option<usize>) -> Result<usize> {
    let m = prefix_m.unwrap_or(db.levels());
    if m == 0 || m > db.levels() {
        return domain(format!(
            "prefix length {m} out of range 1..={}",
            db.levels()
        ));
    }
    Ok(m)
}

fn rank(
    table: &AdcTable,
    db: &EncodedDatabase,
    m: usize,
    norms: &[f64],
    top_k: usize,
) -> Vec<SearchHit> {
    let levels = db.levels();
    let mut hits: Vec<SearchHit> = db
        .codes
        .chunks_exact(levels)
        .zip(norms)
        .zip(&db.ids)
        .map(|((c, n), &id)| SearchHit {
            id,
            distance: table.partial_distance(&c[..m]) + n,
        })
        .collect();
    let cmp = |a: &SearchHit, b: &SearchHit| a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id));
    let k = top_k.min(hits.len());
    if k < hits.len() {
        hits.select_nth_unstable_by(k, cmp);
        hits.truncate(k);
    }
    hits.sort_unstable_by(cmp);
    hits
}

/// Top-`top_k` items by squared distance to their reconstruction using the
/// first `prefix_m` levels (all by default). Ties go to the smaller id.
pub fn search(
    query: &[f64],
    db: &EncodedDatabase,
    top_k: usize,
    prefix_m: Option<usize>,
) -> Result<Vec<SearchHit>> {
    if top_k == 0 {
        return domain("top_k must be at least 1");
    }
    let m = resolve_prefix(db, prefix_m)?;
    let table = build_adc_table(query, &db.model)?;
    if db.is_empty() {
        return Ok(Vec::new());
    }
    let norms = db.prefix_sq_norms(m)?;
    Ok(rank(&table, db, m, &norms, top_k))
}

/// Runs [`search`] for every query row in parallel; prefix norms are
/// computed once.
pub fn search_batch(
    queries: &FeatureMatrix,
    db: &EncodedDatabase,
    top_k: usize,
    prefix_m: Option<usize>,
) -> Result<Vec<Vec<SearchHit>>> {
    if top_k == 0 {
        return domain("top_k must be at least 1");
    }
    let m = resolve_prefix(db, prefix_m)?;
    if queries.dim() != db.model.dim() {
        return domain(format!(
            "queries have dimension {}, model expects {}",
            queries.dim(),
            db.model.dim()
        ));
    }
    if db.is_empty() {
        return Ok(vec![Vec::new(); queries.rows()]);
    }
    let norms = db.prefix_sq_norms(m)?;
    let rows: Vec<&[f64]> = queries.iter_rows().collect();
    rows.par_iter()
        .map(|q| {
            let table = build_adc_table(q, &db.model)?;
            Ok(rank(&table, db, m, &norms, top_k))
        })
        .collect()
}

/// Reorders `hits` by exact squared distance to the original vectors.
///
/// `raw` holds the unquantized database rows in the same order as `db`.
pub fn rerank_exact(
    query: &[f64],
    db: &EncodedDatabase,
    raw: &FeatureMatrix,
    hits: &[SearchHit],
) -> Result<Vec<SearchHit>> {
    if raw.rows() != db.len() || raw.dim() != db.model.dim() {
        return domain("raw vectors do not match the encoded database");
    }
    db.model.check_input(query)?;
    let position: std::collections::HashMap<u64, usize> =
        db.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut out = Vec::with_capacity(hits.len());
    for h in hits {
        let Some(&i) = position.get(&h.id) else {
            return domain(format!("id {} is not in the database", h.id));
        };
        let distance = raw.row(i).iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
        out.push(SearchHit { id: h.id, distance });
    }
    out.sort_unstable_by(|a, b| a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id)));
    Ok(out)
}
