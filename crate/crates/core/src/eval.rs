//! Retrieval quality: mAP@R, precision-recall curve and precision@R.
//!
//! An item is relevant to a query when the two share at least one label.
//! Average precision is truncated at rank `R` and normalized by
//! `min(R, #relevant)`; a query with no relevant items scores 0 and still
//! counts toward the mean.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{sets_intersect, FeatureMatrix};
use crate::error::{config, domain, Result};
use crate::index::{search_batch, EncodedDatabase};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub r_cutoff: usize,
    pub map_at_r: f64,
    /// `(recall, precision)` averaged over queries at sampled ranks.
    pub pr_curve: Vec<(f64, f64)>,
    /// `(R, mean precision in the top R)`.
    pub precision_at_r: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub r_cutoff: usize,
    pub precision_at: Vec<usize>,
    /// Number of rank positions sampled for the PR curve.
    pub pr_points: usize,
    pub prefix_m: Option<usize>,
}

impl EvalOptions {
    pub fn new(r_cutoff: usize) -> Self {
        Self {
            r_cutoff,
            precision_at: Vec::new(),
            pr_points: 100,
            prefix_m: None,
        }
    }
}

/// Average precision of one ranked relevance list truncated at `r_cutoff`.
pub fn average_precision(ranked: &[bool], r_cutoff: usize, total_relevant: usize) -> f64 {
    let denom = r_cutoff.min(total_relevant);
    if denom == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in ranked.iter().take(r_cutoff).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    sum / denom as f64
}

/// Rank positions (1-based) at which the PR curve is sampled.
fn curve_ranks(n: usize, points: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let points = points.clamp(1, n);
    let mut ranks: Vec<usize> = (1..=points).map(|i| (i * n).div_ceil(points)).collect();
    ranks.dedup();
    ranks
}

/// Evaluates label-based retrieval of `queries` against `db`.
pub fn evaluate(queries: &FeatureMatrix, db: &EncodedDatabase, options: &EvalOptions) -> Result<EvalReport> {
    if options.r_cutoff == 0 {
        return domain("mAP cutoff must be at least 1");
    }
    let Some(db_labels) = db.labels() else {
        return config("evaluation needs database labels");
    };
    if !queries.has_labels() {
        return config("evaluation needs query labels");
    }
    if queries.is_empty() {
        return domain("evaluation needs at least one query");
    }
    let n = db.len();
    let rankings = search_batch(queries, db, n.max(1), options.prefix_m)?;
    let ranks = curve_ranks(n, options.pr_points);
    let index_of: std::collections::HashMap<u64, usize> =
        db.ids().iter().enumerate().map(|(i, &id)| (id, i)).collect();

    struct PerQuery {
        ap: f64,
        curve: Vec<(f64, f64)>,
        prec_at: Vec<f64>,
    }

    let per_query: Vec<PerQuery> = rankings
        .par_iter()
        .enumerate()
        .map(|(q, hits)| {
            let qlabels = queries.label_set(q).unwrap_or(&[]);
            let relevance: Vec<bool> = hits
                .iter()
                .map(|h| sets_intersect(qlabels, &db_labels[index_of[&h.id]]))
                .collect();
            let total = relevance.iter().filter(|r| **r).count();
            let mut cumulative = Vec::with_capacity(n);
            let mut c = 0usize;
            for &r in &relevance {
                c += usize::from(r);
                cumulative.push(c);
            }
            let curve = ranks
                .iter()
                .map(|&r| {
                    let hit = cumulative[r - 1] as f64;
                    let recall = if total > 0 { hit / total as f64 } else { 0.0 };
                    (recall, hit / r as f64)
                })
                .collect();
            let prec_at = options
                .precision_at
                .iter()
                .map(|&r| {
                    let r = r.min(n);
                    if r == 0 {
                        0.0
                    } else {
                        cumulative[r - 1] as f64 / r as f64
                    }
                })
                .collect();
            PerQuery {
                ap: average_precision(&relevance, options.r_cutoff, total),
                curve,
                prec_at,
            }
        })
        .collect();

    let nq = per_query.len() as f64;
    let map_at_r = per_query.iter().map(|p| p.ap).sum::<f64>() / nq;
    let mut pr_curve = vec![(0.0, 0.0); ranks.len()];
    let mut prec = vec![0.0; options.precision_at.len()];
    for p in &per_query {
        for (acc, v) in pr_curve.iter_mut().zip(&p.curve) {
            acc.0 += v.0 / nq;
            acc.1 += v.1 / nq;
        }
        for (acc, v) in prec.iter_mut().zip(&p.prec_at) {
            *acc += v / nq;
        }
    }
    // averaging in a different order can wiggle the last bit
    for i in 1..pr_curve.len() {
        if pr_curve[i].0 < pr_curve[i - 1].0 {
            pr_curve[i].0 = pr_curve[i - 1].0;
        }
    }
    Ok(EvalReport {
        r_cutoff: options.r_cutoff,
        map_at_r,
        pr_curve,
        precision_at_r: options.precision_at.iter().copied().zip(prec).collect(),
    })
}

impl EvalReport {
    /// One `name<TAB>value` line per metric.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "map@{}\t{:.6}", self.r_cutoff, self.map_at_r);
        for (r, p) in &self.precision_at_r {
            let _ = writeln!(out, "precision@{r}\t{p:.6}");
        }
        out
    }

    /// `recall<TAB>precision` pairs, one per line.
    pub fn pr_curve_text(&self) -> String {
        let mut out = String::from("# recall\tprecision\n");
        for (r, p) in &self.pr_curve {
            let _ = writeln!(out, "{r:.6}\t{p:.6}");
        }
        out
    }

    /// `R<TAB>precision` pairs, one per line.
    pub fn precision_curve_text(&self) -> String {
        let mut out = String::from("# R\tprecision\n");
        for (r, p) in &self.precision_at_r {
            let _ = writeln!(out, "{r}\t{p:.6}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_ap() {
        let ap = average_precision(&[true, false, true], 3, 2);
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn all_relevant_is_one() {
        assert_eq!(average_precision(&[true; 5], 5, 5), 1.0);
        assert_eq!(average_precision(&[true; 5], 3, 5), 1.0);
    }

    #[test]
    fn no_relevant_is_zero() {
        assert_eq!(average_precision(&[false; 4], 4, 0), 0.0);
    }

    #[test]
    fn ranks_cover_the_end() {
        assert_eq!(curve_ranks(10, 4), vec![3, 5, 8, 10]);
        assert_eq!(curve_ranks(3, 100), vec![1, 2, 3]);
        assert!(curve_ranks(0, 10).is_empty());
    }
}
