use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Real,
    Synthetic,
}

/// Feature rows stored column-wise (`dim x len`) with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub features: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub origin: Origin,
    /// Class fractions of `labels`.
    pub prior_estimates: Vec<f64>,
}

impl LabeledDataset {
    pub fn new(features: DMatrix<f64>, labels: Vec<usize>, n_classes: usize, origin: Origin) -> Result<Self> {
        if features.ncols() != labels.len() {
            return Err(Error::Dimension(format!("{} rows with {} labels", features.ncols(), labels.len())));
        }
        if n_classes == 0 {
            return Err(Error::InvalidParameter("zero classes".into()));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::InvalidParameter(format!("label {y} with {n_classes} classes")));
        }
        let prior_estimates = class_fractions(&labels, n_classes);
        Ok(Self { features, labels, n_classes, origin, prior_estimates })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>, n_classes: usize, origin: Origin) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("ragged feature rows".into()));
        }
        let features = DMatrix::from_fn(d, rows.len(), |i, j| rows[j][i]);
        Self::new(features, labels, n_classes, origin)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.nrows()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.features.column(i).iter().copied().collect()
    }

    /// Columns `idx` and their labels.
    pub fn gather(&self, idx: &[usize]) -> (DMatrix<f64>, Vec<usize>) {
        let x = self.features.select_columns(idx);
        let y = idx.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    /// `n` distinct indices drawn uniformly (all of them, shuffled, when
    /// `n >= len`).
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        sample(rng, self.len(), n.min(self.len())).into_vec()
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.features.clone(), labels, self.n_classes, self.origin)
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let (x, y) = self.gather(idx);
        Self::new(x, y, self.n_classes, self.origin)
    }

    /// Rows of `self` followed by rows of `other`; the origin is `self`'s.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() && !self.is_empty() && !other.is_empty() {
            return Err(Error::Dimension(format!("feature dims {} and {}", self.dim(), other.dim())));
        }
        let d = self.dim().max(other.dim());
        let n = self.len() + other.len();
        let x = DMatrix::from_fn(d, n, |i, j| {
            if j < self.len() {
                self.features[(i, j)]
            } else {
                other.features[(i, j - self.len())]
            }
        });
        let mut y = self.labels.clone();
        y.extend_from_slice(&other.labels);
        Self::new(x, y, self.n_classes.max(other.n_classes), self.origin)
    }
}

pub fn class_fractions(labels: &[usize], n_classes: usize) -> Vec<f64> {
    let mut c = vec![0.0; n_classes];
    for &y in labels {
        c[y] += 1.0;
    }
    let n = labels.len().max(1) as f64;
    c.iter().map(|v| v / n).collect()
}
