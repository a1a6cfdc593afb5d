//! Configuration-driven experiment runs that write CSV result tables.

mod cdma_runs;
pub mod config;
mod results;
mod spoofing_runs;
mod toy_run;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::DMatrix;

pub use config::{schema_text, ExperimentConfig, ExperimentId, Kind, KeySpec, SCHEMA};
pub use results::{median, Metric, ResultRow, ResultTable, RESULTS_SCHEMA};

use crate::cdma::{class_to_bits, CdmaScene, MmseDetector};
use crate::error::{Error, Result};
use crate::hyphylearn::{accuracy, Classifier, LabeledDataset};
use crate::nnet::{HiddenActivation, NetworkSpec, OutputActivation};

pub const MANIFEST_FILE: &str = "manifest.cfg";

/// Result table plus any extra named files the experiment produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub table: ResultTable,
    pub extra_files: Vec<(String, String)>,
}

/// 1 minus the empirical error probability on `test`.
pub fn evaluate_accuracy(classifier: &dyn Classifier, test: &LabeledDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyInput("no test rows".into()));
    }
    accuracy(classifier, &test.features, &test.labels)
}

/// Decides the bits of every user in frame `p` of a scene.
pub trait BitDetector {
    fn detect(&self, scene: &CdmaScene, p: usize) -> Result<Vec<i8>>;

    /// Decisions for every decision frame, in order.
    fn detect_all(&self, scene: &CdmaScene) -> Result<Vec<Vec<i8>>> {
        scene.decision_frames().map(|p| self.detect(scene, p)).collect()
    }
}

impl BitDetector for MmseDetector {
    fn detect(&self, scene: &CdmaScene, p: usize) -> Result<Vec<i8>> {
        MmseDetector::detect(self, &scene.window(p)?, p)
    }
}

/// A `2^K`-class window classifier used as a detector.
pub struct ClassifierDetector<'a> {
    pub classifier: &'a dyn Classifier,
    pub k_users: usize,
}

impl BitDetector for ClassifierDetector<'_> {
    fn detect(&self, scene: &CdmaScene, p: usize) -> Result<Vec<i8>> {
        let w = crate::spoofing::complex_to_features(&scene.window(p)?);
        let class = self.classifier.predict(&DMatrix::from_column_slice(w.len(), 1, &w))?[0];
        Ok(class_to_bits(class, self.k_users))
    }

    fn detect_all(&self, scene: &CdmaScene) -> Result<Vec<Vec<i8>>> {
        let (x, _) = scene.window_dataset()?;
        Ok(self.classifier.predict(&x)?.into_iter().map(|c| class_to_bits(c, self.k_users)).collect())
    }
}

/// Bit error fraction over all users and decision frames (cold-start
/// frames excluded).
pub fn evaluate_ber(detector: &dyn BitDetector, scene: &CdmaScene) -> Result<f64> {
    let frames: Vec<usize> = scene.decision_frames().collect();
    if frames.is_empty() || scene.true_bits.is_empty() {
        return Err(Error::EmptyInput("scene has no decision frames".into()));
    }
    let decisions = detector.detect_all(scene)?;
    let mut errors = 0usize;
    let mut total = 0usize;
    for (bits, &p) in decisions.iter().zip(&frames) {
        if bits.len() != scene.true_bits.len() {
            return Err(Error::Dimension(format!("{} decisions for {} users", bits.len(), scene.true_bits.len())));
        }
        for (k, &b) in bits.iter().enumerate() {
            total += 1;
            errors += usize::from(b != scene.true_bits[k][p]);
        }
    }
    Ok(errors as f64 / total as f64)
}

/// Seed for one sweep point of one run; distinct inputs give unrelated
/// streams.
pub(crate) fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `f` once per seed on up to `available_parallelism` threads and
/// returns the outputs in seed order.
pub(crate) fn per_seed<T: Send>(seeds: &[u64], f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len()).max(1);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..seeds.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= seeds.len() {
                    break;
                }
                let r = f(seeds[i]).map_err(|e| e.context(format!("seed {}", seeds[i])));
                slots.lock().expect("result slots poisoned")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.unwrap_or_else(|| Err(Error::Numerical("seed worker did not finish".into()))))
        .collect()
}

/// ReLU network `n_in -> hidden.. -> n_out`.
pub(crate) fn relu_net(n_in: usize, hidden: &[usize], n_out: usize, out: OutputActivation) -> Result<NetworkSpec> {
    let mut sizes = vec![n_in];
    sizes.extend_from_slice(hidden);
    sizes.push(n_out);
    NetworkSpec::new(sizes, HiddenActivation::Relu, out)
}

/// Runs the configured experiment without touching the file system.
pub fn compute_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mut out = match cfg.experiment {
        ExperimentId::ToyGaussian => toy_run::run(cfg)?,
        ExperimentId::SpoofingAccuracy => spoofing_runs::run_accuracy(cfg)?,
        ExperimentId::SpoofingCoherence => spoofing_runs::run_coherence(cfg)?,
        ExperimentId::CdmaBerVsSnr => cdma_runs::run_vs_snr(cfg)?,
        ExperimentId::CdmaBerVsData => cdma_runs::run_vs_data(cfg)?,
    };
    out.table.sort();
    Ok(out)
}

/// Every file of a finished run as `(name, contents)`: one CSV per
/// method, any extra files and the manifest.
pub fn render_outputs(cfg: &ExperimentConfig, out: &RunOutput) -> Result<Vec<(String, String)>> {
    let mut files: Vec<(String, String)> =
        out.table.methods().into_iter().map(|m| (format!("{m}.csv"), out.table.to_csv(Some(&m)))).collect();
    files.extend(out.extra_files.iter().cloned());
    let mut manifest = format!("# Resolved configuration of a {} run. Re-run with `hyphy run` on this file.\n", cfg.experiment);
    manifest.push_str(&format!("# Files: {}\n", files.iter().map(|f| f.0.as_str()).collect::<Vec<_>>().join(" ")));
    manifest.push_str(&cfg.resolved()?);
    files.push((MANIFEST_FILE.to_string(), manifest));
    Ok(files)
}

/// Runs the experiment and writes its files into `cfg`'s output
/// directory. Nothing is written unless the whole run succeeds.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(ResultTable, Vec<PathBuf>)> {
    let out = compute_experiment(cfg)?;
    let files = render_outputs(cfg, &out)?;
    let dir = PathBuf::from(cfg.output_dir()?);
    let written = write_files(&dir, &files)?;
    Ok((out.table, written))
}

fn write_files(dir: &Path, files: &[(String, String)]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::from(e).context(format!("creating {}", dir.display())))?;
    files
        .iter()
        .map(|(name, text)| {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::from(e).context(format!("writing {}", path.display())))?;
            Ok(path)
        })
        .collect()
}
