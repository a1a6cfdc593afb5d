use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, RngCore};

use super::dataset::{LabeledDataset, Origin};
use crate::error::{Error, Result};

/// Draws feature rows of one class.
pub trait ClassSampler {
    fn dim(&self) -> usize;
    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64>;
}

/// `N(mean, L L^T)`.
#[derive(Clone, Debug)]
pub struct GaussianSampler {
    pub mean: DVector<f64>,
    chol_l: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        if cov.shape() != (mean.len(), mean.len()) {
            return Err(Error::Dimension(format!("covariance {:?} for mean of {}", cov.shape(), mean.len())));
        }
        let chol = Cholesky::new(cov.clone()).ok_or_else(|| Error::SingularModel("sampler covariance not positive definite".into()))?;
        Ok(Self { mean, chol_l: chol.l() })
    }

    /// Zero covariance: every draw is `point`.
    pub fn point_mass(point: DVector<f64>) -> Self {
        let d = point.len();
        Self { mean: point, chol_l: DMatrix::zeros(d, d) }
    }
}

impl ClassSampler for GaussianSampler {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        (&self.mean + &self.chol_l * z).iter().copied().collect()
    }
}

/// Smallest `k` whose cumulative prior reaches `r`.
fn pick_class(priors: &[f64], r: f64) -> usize {
    let mut acc = 0.0;
    for (k, p) in priors.iter().enumerate() {
        acc += p;
        if acc >= r {
            return k;
        }
    }
    priors.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// `n_s` rows: class by inverse-CDF draw from `priors`, then one draw from
/// that class's sampler.
pub fn generate_synthetic(samplers: &[&dyn ClassSampler], priors: &[f64], n_s: usize, rng: &mut dyn RngCore) -> Result<LabeledDataset> {
    if samplers.is_empty() || samplers.len() != priors.len() {
        return Err(Error::Dimension(format!("{} samplers for {} priors", samplers.len(), priors.len())));
    }
    if priors.iter().any(|&p| !(p >= 0.0)) || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!("priors {priors:?} are not a distribution")));
    }
    let d = samplers[0].dim();
    if samplers.iter().any(|s| s.dim() != d) {
        return Err(Error::Dimension("samplers of different dimension".into()));
    }
    let mut x = DMatrix::zeros(d, n_s);
    let mut y = Vec::with_capacity(n_s);
    for j in 0..n_s {
        let r = rng.random::<f64>();
        let w = pick_class(priors, r);
        x.column_mut(j).copy_from_slice(&samplers[w].sample(rng));
        y.push(w);
    }
    LabeledDataset::new(x, y, priors.len(), Origin::Synthetic)
}
