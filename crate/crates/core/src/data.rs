//! Row-major feature storage with optional class labels.

use crate::error::{domain, Result};

/// An `N x D` row-major feature set.
///
/// Labels come in two flavors: a single class id per row, or a set of ids
/// per row (multi-label data). When only single labels are present,
/// [`FeatureMatrix::label_set`] views each one as a one-element set.
/// A matrix with zero rows is allowed; it represents an empty database.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    rows: usize,
    dim: usize,
    labels: Option<Vec<i64>>,
    multi_labels: Option<Vec<Vec<i64>>>,
}

impl FeatureMatrix {
    pub fn new(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return domain("feature dimension must be at least 1");
        }
        if data.len() % dim != 0 {
            return domain(format!(
                "data length {} is not a multiple of dimension {dim}",
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return domain(format!(
                "non-finite feature value at row {}, column {}",
                pos / dim,
                pos % dim
            ));
        }
        let rows = data.len() / dim;
        Ok(Self {
            data,
            rows,
            dim,
            labels: None,
            multi_labels: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return domain("cannot infer dimension from zero rows; use FeatureMatrix::empty");
        };
        let dim = first.len();
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return domain(format!(
                "row {bad} has length {}, expected {dim}",
                rows[bad].len()
            ));
        }
        Self::new(rows.concat(), dim)
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(Vec::new(), dim)
    }

    pub fn with_labels(mut self, labels: Vec<i64>) -> Result<Self> {
        if labels.len() != self.rows {
            return domain(format!(
                "{} labels for {} rows",
                labels.len(),
                self.rows
            ));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_multi_labels(mut self, sets: Vec<Vec<i64>>) -> Result<Self> {
        if sets.len() != self.rows {
            return domain(format!(
                "{} label sets for {} rows",
                sets.len(),
                self.rows
            ));
        }
        let mut sets = sets;
        for s in &mut sets {
            s.sort_unstable();
            s.dedup();
        }
        // Single-label data is also exposed through `labels`.
        if sets.iter().all(|s| s.len() == 1) {
            self.labels = Some(sets.iter().map(|s| s[0]).collect());
        }
        self.multi_labels = Some(sets);
        Ok(self)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    pub fn multi_labels(&self) -> Option<&[Vec<i64>]> {
        self.multi_labels.as_deref()
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some() || self.multi_labels.is_some()
    }

    /// Sorted label ids of row `i`, or `None` for unlabeled data.
    pub fn label_set(&self, i: usize) -> Option<&[i64]> {
        if let Some(sets) = &self.multi_labels {
            return Some(&sets[i]);
        }
        self.labels.as_ref().map(|l| std::slice::from_ref(&l[i]))
    }

    /// Whether rows `i` and `j` share at least one label.
    pub fn shares_label(&self, i: usize, j: usize) -> Option<bool> {
        Some(sets_intersect(self.label_set(i)?, self.label_set(j)?))
    }

    /// Copy of the selected rows, labels included.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            data,
            rows: indices.len(),
            dim: self.dim,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            multi_labels: self
                .multi_labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i].clone()).collect()),
        }
    }
}

/// Intersection test on two sorted id lists.
pub fn sets_intersect(a: &[i64], b: &[i64]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return true,
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite() {
        assert!(FeatureMatrix::new(vec![1.0, f64::NAN], 2).is_err());
        assert!(FeatureMatrix::new(vec![1.0, f64::INFINITY], 1).is_err());
    }

    #[test]
    fn rejects_ragged_and_zero_dim() {
        assert!(FeatureMatrix::new(vec![1.0, 2.0, 3.0], 2).is_err());
        assert!(FeatureMatrix::new(vec![], 0).is_err());
        assert!(FeatureMatrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn label_length_must_match() {
        let m = FeatureMatrix::new(vec![0.0; 6], 2).unwrap();
        assert!(m.clone().with_labels(vec![1, 2]).is_err());
        assert!(m.with_labels(vec![1, 2, 3]).is_ok());
    }

    #[test]
    fn single_labels_from_sets() {
        let m = FeatureMatrix::new(vec![0.0; 4], 2)
            .unwrap()
            .with_multi_labels(vec![vec![3], vec![5]])
            .unwrap();
        assert_eq!(m.labels(), Some(&[3, 5][..]));
        assert_eq!(m.shares_label(0, 1), Some(false));
    }

    #[test]
    fn multi_label_sharing() {
        let m = FeatureMatrix::new(vec![0.0; 6], 2)
            .unwrap()
            .with_multi_labels(vec![vec![1, 4], vec![4, 2], vec![7]])
            .unwrap();
        assert!(m.labels().is_none());
        assert_eq!(m.shares_label(0, 1), Some(true));
        assert_eq!(m.shares_label(0, 2), Some(false));
    }

    #[test]
    fn empty_matrix_is_valid() {
        let m = FeatureMatrix::empty(3).unwrap();
        assert_eq!(m.rows(), 0);
        assert_eq!(m.iter_rows().count(), 0);
    }
}
