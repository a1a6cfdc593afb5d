//! Two-class bivariate Gaussian study with a mean-only model mismatch.

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adversarial::{
    adversarial_train, empirical_a_distance_proxy, train_discriminator, tv_bound_equal_cov, AdversarialSpecs, OptimizerKind,
    TrainingConfig,
};
use super::classify::{accuracy, NetClassifier};
use super::dataset::{LabeledDataset, Origin};
use super::synthetic::{generate_synthetic, ClassSampler, GaussianSampler};
use crate::error::Result;
use crate::nnet::{HiddenActivation, NetworkSpec, OutputActivation};

/// True and estimated class means sharing one covariance; equal priors.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyGaussian {
    pub mu_true: [DVector<f64>; 2],
    pub mu_est: [DVector<f64>; 2],
    pub sigma: DMatrix<f64>,
}

impl Default for ToyGaussian {
    fn default() -> Self {
        let v = |a: f64, b: f64| DVector::from_vec(vec![a, b]);
        Self {
            mu_true: [v(2.9, 4.4), v(5.0, 6.4)],
            mu_est: [v(2.0, 3.0), v(4.0, 5.0)],
            sigma: DMatrix::from_row_slice(2, 2, &[0.15, 0.11, 0.11, 0.15]),
        }
    }
}

impl ToyGaussian {
    pub fn samplers(&self, estimated: bool) -> Result<[GaussianSampler; 2]> {
        let mu = if estimated { &self.mu_est } else { &self.mu_true };
        Ok([GaussianSampler::new(mu[0].clone(), &self.sigma)?, GaussianSampler::new(mu[1].clone(), &self.sigma)?])
    }

    /// `n` labeled rows from the true (or estimated) mixture.
    pub fn sample(&self, estimated: bool, n: usize, rng: &mut dyn RngCore) -> Result<LabeledDataset> {
        let s = self.samplers(estimated)?;
        let refs: [&dyn ClassSampler; 2] = [&s[0], &s[1]];
        let mut d = generate_synthetic(&refs, &[0.5, 0.5], n, rng)?;
        if !estimated {
            d.origin = Origin::Real;
        }
        Ok(d)
    }

    /// Upper bound on the total variation between true and estimated
    /// class-conditional densities, per class.
    pub fn tv_bounds(&self) -> Result<[f64; 2]> {
        Ok([
            tv_bound_equal_cov(&self.mu_true[0], &self.mu_est[0], &self.sigma)?,
            tv_bound_equal_cov(&self.mu_true[1], &self.mu_est[1], &self.sigma)?,
        ])
    }
}

/// Linear bottleneck mapper `2 -> width -> 2` and two-layer linear-softmax
/// heads of the same width.
pub fn toy_specs(width: usize) -> Result<AdversarialSpecs> {
    let lin = |o| NetworkSpec::new(vec![2, width, 2], HiddenActivation::Identity, o);
    Ok(AdversarialSpecs {
        mapper: lin(OutputActivation::Linear)?,
        classifier: lin(OutputActivation::Softmax)?,
        discriminator: lin(OutputActivation::Softmax)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToySettings {
    pub n_real: usize,
    pub n_synthetic: usize,
    pub n_test: usize,
    pub width: usize,
    pub train: TrainingConfig,
}

impl Default for ToySettings {
    fn default() -> Self {
        Self {
            n_real: 40,
            n_synthetic: 2000,
            n_test: 10_000,
            width: 20,
            train: TrainingConfig {
                n_train_steps: 4000,
                batch_size: 32,
                lr_mapper: 1e-3,
                lr_classifier: 1e-3,
                lr_discriminator: 1e-3,
                optimizer: OptimizerKind::Adam,
                seed: 0,
                n_synthetic: 2000,
                z_dim: 2,
                standardize: false,
                domain_weight: 1.0,
            },
        }
    }
}

/// Paired outcome of adversarial and synthetic-only training on one draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyOutcome {
    pub accuracy_hybrid: f64,
    pub accuracy_synthetic_only: f64,
    /// Loss-form proxy of a discriminator trained on the raw features.
    pub proxy_identity: f64,
    /// Loss-form proxy of the co-trained discriminator on the learned
    /// features.
    pub proxy_adversarial: f64,
    pub proxy_identity_accuracy: f64,
    pub proxy_adversarial_accuracy: f64,
}

/// Data and the adversarially trained classifier behind a [`ToyOutcome`].
#[derive(Clone, Debug)]
pub struct ToyArtifacts {
    pub real: LabeledDataset,
    pub synthetic: LabeledDataset,
    pub classifier: NetClassifier,
}

/// Draws real and synthetic sets from `seed`, trains both classifiers and
/// scores them on fresh true-distribution rows.
pub fn run_toy(toy: &ToyGaussian, settings: &ToySettings, seed: u64) -> Result<ToyOutcome> {
    Ok(run_toy_detailed(toy, settings, seed)?.0)
}

/// [`run_toy`] that also hands back the training sets and the hybrid
/// classifier.
pub fn run_toy_detailed(toy: &ToyGaussian, settings: &ToySettings, seed: u64) -> Result<(ToyOutcome, ToyArtifacts)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_r = toy.sample(false, settings.n_real, &mut rng)?;
    let d_s = toy.sample(true, settings.n_synthetic, &mut rng)?;
    let test = toy.sample(false, settings.n_test, &mut rng)?;
    let specs = toy_specs(settings.width)?;

    let cfg = TrainingConfig { seed, ..settings.train };
    let hybrid = adversarial_train(&d_r, &d_s, &specs, &cfg)?;
    let plain = adversarial_train(&d_r, &d_s, &specs, &TrainingConfig { domain_weight: 0.0, ..cfg })?;

    // Identity mapping: the same discriminator and budget on raw features.
    let identity_disc =
        train_discriminator(&d_r.features, &d_s.features, &specs.discriminator, cfg.n_train_steps, cfg.batch_size, cfg.lr_discriminator, seed)?;
    let identity = empirical_a_distance_proxy(&d_r.features, &d_s.features, &identity_disc)?;
    let mapped = empirical_a_distance_proxy(
        &hybrid.classifier.embed(&d_r.features)?,
        &hybrid.classifier.embed(&d_s.features)?,
        &hybrid.discriminator,
    )?;
    let outcome = ToyOutcome {
        accuracy_hybrid: accuracy(&hybrid.classifier, &test.features, &test.labels)?,
        accuracy_synthetic_only: accuracy(&plain.classifier, &test.features, &test.labels)?,
        proxy_identity: identity.proxy_loss,
        proxy_adversarial: mapped.proxy_loss,
        proxy_identity_accuracy: identity.proxy_accuracy,
        proxy_adversarial_accuracy: mapped.proxy_accuracy,
    };
    Ok((outcome, ToyArtifacts { real: d_r, synthetic: d_s, classifier: hybrid.classifier }))
}
