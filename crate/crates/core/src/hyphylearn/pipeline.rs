use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adversarial::{adversarial_train, AdversarialSpecs, StepDiagnostics, TrainingConfig};
use super::classify::{Classifier, ConstantClassifier, NetClassifier};
use super::dataset::{LabeledDataset, Origin};
use super::synthetic::{generate_synthetic, ClassSampler};
use crate::error::{Error, Result};

/// A case study plugged into the four-step pipeline: an imperfect labeler,
/// a parameter estimator and the fitted generative model per class.
pub trait HybridProblem {
    type Estimate;

    fn n_classes(&self) -> usize;

    /// Step 1: labels for the raw rows (`dim x n_r`).
    fn label(&self, raw: &DMatrix<f64>) -> Result<Vec<usize>>;

    /// Step 2: parameters from the labeled real rows.
    fn estimate(&self, labeled: &LabeledDataset) -> Result<Self::Estimate>;

    /// Step 3: one sampler per class built from the estimate.
    fn samplers(&self, estimate: &Self::Estimate) -> Result<Vec<Box<dyn ClassSampler>>>;

    /// Class probabilities for synthetic generation; the labeled fractions
    /// unless the problem knows better.
    fn priors(&self, labeled: &LabeledDataset) -> Vec<f64> {
        labeled.prior_estimates.clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum HybridClassifier {
    Constant(ConstantClassifier),
    Network(NetClassifier),
}

impl Classifier for HybridClassifier {
    fn n_classes(&self) -> usize {
        match self {
            Self::Constant(c) => c.n_classes(),
            Self::Network(c) => c.n_classes(),
        }
    }

    fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<usize>> {
        match self {
            Self::Constant(c) => c.predict(x),
            Self::Network(c) => c.predict(x),
        }
    }
}

pub struct HybridOutcome<E> {
    pub classifier: HybridClassifier,
    pub estimate: E,
    pub labeled: LabeledDataset,
    pub synthetic: LabeledDataset,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Runs labeling, estimation, synthetic generation and adversarial
/// training in order. The synthetic draw uses its own stream of the
/// configured seed.
pub fn run_hyphylearn<P: HybridProblem>(
    problem: &P,
    raw: &DMatrix<f64>,
    specs: &AdversarialSpecs,
    cfg: &TrainingConfig,
) -> Result<HybridOutcome<P::Estimate>> {
    if raw.ncols() == 0 {
        return Err(Error::EmptyInput("no real rows".into()));
    }
    let c = problem.n_classes();
    let labels = problem.label(raw).map_err(|e| e.context("labeling"))?;
    let labeled = LabeledDataset::new(raw.clone(), labels, c, Origin::Real).map_err(|e| e.context("labeling"))?;
    let estimate = problem.estimate(&labeled).map_err(|e| e.context("parameter estimation"))?;
    if c == 1 {
        let synthetic = LabeledDataset::new(DMatrix::zeros(raw.nrows(), 0), vec![], 1, Origin::Synthetic)?;
        return Ok(HybridOutcome {
            classifier: HybridClassifier::Constant(ConstantClassifier { class: 0, n_classes: 1 }),
            estimate,
            labeled,
            synthetic,
            diagnostics: vec![],
        });
    }
    let boxed = problem.samplers(&estimate).map_err(|e| e.context("synthetic generation"))?;
    let samplers: Vec<&dyn ClassSampler> = boxed.iter().map(|b| b.as_ref()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let synthetic = generate_synthetic(&samplers, &problem.priors(&labeled), cfg.n_synthetic, &mut rng)
        .map_err(|e| e.context("synthetic generation"))?;
    let trained = adversarial_train(&labeled, &synthetic, specs, cfg).map_err(|e| e.context("adversarial training"))?;
    Ok(HybridOutcome {
        classifier: HybridClassifier::Network(trained.classifier),
        estimate,
        labeled,
        synthetic,
        diagnostics: trained.diagnostics,
    })
}
