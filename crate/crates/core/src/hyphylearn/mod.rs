//! Hybrid training: imperfect labels, fitted physical models, synthetic
//! data and domain-adversarial networks.

mod adversarial;
mod classify;
mod dataset;
mod gmm;
mod pipeline;
mod synthetic;
pub mod toy;

pub use adversarial::{
    adversarial_train, empirical_a_distance_proxy, fine_tune_baseline, proxy_from_domain_loss, saddle_gradients,
    train_discriminator, tv_bound_equal_cov, write_diagnostics_csv, ADistance, AdversarialOutcome, AdversarialSpecs,
    FineTuneConfig, OptimizerKind, StepDiagnostics, StepGradients, TrainingConfig,
};
pub use classify::{accuracy, Classifier, ConstantClassifier, NetClassifier, Standardizer};
pub use dataset::{class_fractions, LabeledDataset, Origin};
pub use gmm::{cluster_label, gmm_baseline, map_clusters_to_classes, GaussianMixture, GmmClassifier, GmmOptions};
pub use pipeline::{run_hyphylearn, HybridClassifier, HybridOutcome, HybridProblem};
pub use synthetic::{generate_synthetic, ClassSampler, GaussianSampler};
