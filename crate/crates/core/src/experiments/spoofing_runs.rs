use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use super::results::{Metric, ResultTable};
use super::{derive_seed, per_seed, relu_net, RunOutput};
use crate::channel_cfr::{CfrDims, DiffuseNoiseParams, SimilarityParam};
use crate::error::{Error, Result};
use crate::estimator_cfr::EstimatorOptions;
use crate::hyphylearn::{
    accuracy, fine_tune_baseline, generate_synthetic, gmm_baseline, run_hyphylearn, AdversarialSpecs, ClassSampler,
    Classifier, FineTuneConfig, GmmOptions, HybridProblem, LabeledDataset, OptimizerKind, TrainingConfig,
};
use crate::nnet::OutputActivation;
use crate::spoofing::{
    assemble_hypothesis_models, lrt_classify, simulate_scenario, HypothesisModels, PartyModel, ScenarioOutput,
    SnapshotPair, SnapshotScenario, SpoofingFit, SpoofingProblem, SpoofingRows,
};

struct Setup {
    dims: CfrDims,
    alice: PartyModel,
    eve: PartyModel,
    opts: EstimatorOptions,
    specs: AdversarialSpecs,
    ft_spec: crate::nnet::NetworkSpec,
    steps: usize,
    batch: usize,
    lr: f64,
    z_dim: usize,
    ft_synthetic: usize,
    ft_pretrain: usize,
    ft_steps: usize,
}

fn party(cfg: &ExperimentConfig, who: &str) -> Result<PartyModel> {
    let k = |name: &str| format!("spoofing.{who}.{name}");
    Ok(PartyModel {
        diffuse: DiffuseNoiseParams::new(cfg.f64(&k("alpha2"))?, cfg.f64(&k("beta"))?, cfg.usize(&k("l_taps"))?, cfg.f64(&k("sigma2"))?)?,
        similarity: SimilarityParam::new(cfg.f64(&k("similarity"))?)?,
        n_paths: cfg.usize(&k("n_paths"))?,
        k_factor_db: cfg.f64(&k("k_factor_db"))?,
    })
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    let dims = CfrDims::new(cfg.usize("spoofing.n_tx")?, cfg.usize("spoofing.n_rx")?, cfg.usize("spoofing.n_f")?)?;
    let alice = party(cfg, "alice")?;
    let eve = party(cfg, "eve")?;
    let opts = EstimatorOptions { n_paths: alice.n_paths.max(eve.n_paths), ..EstimatorOptions::default() };
    let n_x = 2 * dims.m();
    let z = cfg.usize("spoofing.z_dim")?;
    let specs = AdversarialSpecs {
        mapper: relu_net(n_x, &cfg.usizes("spoofing.mapper_hidden")?, z, OutputActivation::Linear)?,
        classifier: relu_net(z, &cfg.usizes("spoofing.head_hidden")?, 2, OutputActivation::Softmax)?,
        discriminator: relu_net(z, &cfg.usizes("spoofing.disc_hidden")?, 2, OutputActivation::Softmax)?,
    };
    Ok(Setup {
        dims,
        alice,
        eve,
        opts,
        specs,
        ft_spec: relu_net(n_x, &cfg.usizes("spoofing.finetune.hidden")?, 2, OutputActivation::Softmax)?,
        steps: cfg.usize("spoofing.steps")?,
        batch: cfg.usize("spoofing.batch_size")?,
        lr: cfg.f64("spoofing.lr")?,
        z_dim: z,
        ft_synthetic: cfg.usize("spoofing.finetune.n_synthetic")?,
        ft_pretrain: cfg.usize("spoofing.finetune.pretrain_steps")?,
        ft_steps: cfg.usize("spoofing.finetune.steps")?,
    })
}

impl Setup {
    fn training(&self, n_real: usize, n_synthetic: usize, seed: u64) -> TrainingConfig {
        TrainingConfig {
            n_train_steps: self.steps,
            batch_size: self.batch.min(n_real),
            lr_mapper: self.lr,
            lr_classifier: self.lr,
            lr_discriminator: self.lr,
            optimizer: OptimizerKind::Adam,
            seed,
            n_synthetic,
            z_dim: self.z_dim,
            standardize: true,
            domain_weight: 1.0,
        }
    }

    fn fine_tune(&self, synthetic: &LabeledDataset, real: &LabeledDataset, seed: u64) -> Result<impl Classifier> {
        let ft = FineTuneConfig {
            pretrain_steps: self.ft_pretrain,
            finetune_steps: self.ft_steps,
            batch_size: self.batch,
            lr: self.lr,
            finetune_lr: self.lr,
            seed,
            standardize: true,
        };
        fine_tune_baseline(synthetic, real, &self.ft_spec, &ft)
    }
}

/// Accuracy of the true-parameter LRT with equal priors, using each test
/// pair's own coherence time and Eve slot.
fn bayes_accuracy(out: &ScenarioOutput, dims: &CfrDims) -> Result<f64> {
    let mut models: HashMap<(usize, usize), HypothesisModels> = HashMap::new();
    let mut correct = 0usize;
    for p in &out.test {
        let key = (p.coherence, p.slot);
        if !models.contains_key(&key) {
            let t = &out.truth[p.coherence];
            models.insert(key, assemble_hypothesis_models(&t.alice, &t.eve_slots[p.slot], dims)?);
        }
        correct += usize::from(lrt_classify(&p.difference(), &models[&key], 1.0)? == p.label_true);
    }
    Ok(correct as f64 / out.test.len() as f64)
}

fn heuristic_accuracy(test: &[SnapshotPair]) -> f64 {
    test.iter().filter(|p| p.label_heuristic == p.label_true).count() as f64 / test.len() as f64
}

fn gmm_accuracy(train: &SpoofingRows, test: &SpoofingRows, rng: &mut ChaCha8Rng) -> Result<f64> {
    let anchors: Vec<(usize, usize)> = train.label_heuristic.iter().copied().enumerate().collect();
    let gmm = gmm_baseline(&train.features, &anchors, 2, &GmmOptions::default(), rng)?;
    accuracy(&gmm, &test.features, &test.label_true)
}

fn scenario(cfg: &ExperimentConfig, base: SnapshotScenario) -> Result<SnapshotScenario> {
    let n_test = cfg.usize("spoofing.n_test")?;
    if n_test == 0 {
        return Err(crate::error::Error::Config("spoofing.n_test must be positive".into()));
    }
    Ok(SnapshotScenario {
        n_test,
        n_calibration: cfg.usize("spoofing.n_calibration")?,
        labeling_quantile: cfg.f64("spoofing.labeling_quantile")?,
        ..base
    })
}

pub(super) fn run_accuracy(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let s = setup(cfg)?;
    let sweep = cfg.usizes("spoofing.n_train")?;
    let n_synthetic = cfg.usize("spoofing.n_synthetic")?;
    let seeds = cfg.seeds()?;
    let runs = per_seed(&seeds, |seed| {
        let mut rows = Vec::new();
        for &n_train in &sweep {
            let sub = derive_seed(seed, n_train as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(sub);
            let scn = scenario(cfg, SnapshotScenario::single(n_train, 0))?;
            let out = simulate_scenario(&scn, &s.alice, &s.eve, &s.dims, &mut rng)?;
            let train = SpoofingRows::from_pairs(&out.train)?;
            let test = SpoofingRows::from_pairs(&out.test)?;
            let problem = SpoofingProblem { pairs: &out.train, dims: s.dims, opts: s.opts.clone() };
            let res = run_hyphylearn(&problem, &train.features, &s.specs, &s.training(n_train, n_synthetic, sub))
                .map_err(|e| e.context(format!("HyPhyLearn at {n_train} snapshots")))?;
            let acc = |c: &dyn Classifier| accuracy(c, &test.features, &test.label_true);
            let x = n_train as f64;
            rows.push((x, "hyphylearn", acc(&res.classifier)?));
            rows.push((x, "plug-in-lrt", acc(&res.estimate.plug_in()?)?));

            let ft_synth = if s.ft_synthetic == n_synthetic {
                res.synthetic.clone()
            } else {
                let samplers = problem.samplers(&res.estimate)?;
                let refs: Vec<&dyn ClassSampler> = samplers.iter().map(|b| b.as_ref()).collect();
                generate_synthetic(&refs, &problem.priors(&res.labeled), s.ft_synthetic, &mut rng)?
            };
            let ft = s.fine_tune(&ft_synth, &train.dataset(true)?, sub)?;
            rows.push((x, "fine-tuning", acc(&ft)?));
            rows.push((x, "gmm", gmm_accuracy(&train, &test, &mut rng)?));
            rows.push((x, "bayes", bayes_accuracy(&out, &s.dims)?));
            rows.push((x, "heuristic", heuristic_accuracy(&out.test)));
        }
        Ok(rows)
    })?;
    let mut table = ResultTable::new("n_train");
    for (&seed, rows) in seeds.iter().zip(runs) {
        for (x, method, v) in rows {
            table.push(x, method, Metric::Accuracy, seed, v)?;
        }
    }
    Ok(RunOutput { table, extra_files: Vec::new() })
}

/// Draws from one of several per-coherence samplers, chosen uniformly.
struct MixtureSampler {
    parts: Vec<Box<dyn ClassSampler>>,
}

impl ClassSampler for MixtureSampler {
    fn dim(&self) -> usize {
        self.parts[0].dim()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let i = rng.random_range(0..self.parts.len());
        self.parts[i].sample(rng)
    }
}

/// Training pairs spread over several coherence times, with one set of
/// parameters fitted per coherence time.
struct CoherenceProblem<'a> {
    pairs: &'a [SnapshotPair],
    groups: Vec<Vec<SnapshotPair>>,
    dims: CfrDims,
    opts: EstimatorOptions,
}

impl<'a> CoherenceProblem<'a> {
    fn new(pairs: &'a [SnapshotPair], n_c: usize, dims: CfrDims, opts: EstimatorOptions) -> Self {
        let mut groups = vec![Vec::new(); n_c];
        for p in pairs {
            groups[p.coherence].push(p.clone());
        }
        Self { pairs, groups, dims, opts }
    }
}

impl HybridProblem for CoherenceProblem<'_> {
    /// Fit per coherence time; `None` where estimation was impossible
    /// (for instance no pair labeled as Eve).
    type Estimate = Vec<Option<SpoofingFit>>;

    fn n_classes(&self) -> usize {
        2
    }

    fn label(&self, raw: &DMatrix<f64>) -> Result<Vec<usize>> {
        SpoofingProblem { pairs: self.pairs, dims: self.dims, opts: self.opts.clone() }.label(raw)
    }

    fn estimate(&self, _labeled: &LabeledDataset) -> Result<Self::Estimate> {
        let mut fits = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            let labels: Vec<usize> = g.iter().map(|p| p.label_heuristic).collect();
            let problem = SpoofingProblem { pairs: g, dims: self.dims, opts: self.opts.clone() };
            let labeled = crate::hyphylearn::LabeledDataset::new(
                SpoofingRows::from_pairs(g)?.features,
                labels,
                2,
                crate::hyphylearn::Origin::Real,
            )?;
            fits.push(match problem.estimate(&labeled) {
                Ok(f) => Some(f),
                Err(e) if matches!(e.root(), Error::EmptyInput(_) | Error::SingularModel(_) | Error::Numerical(_)) => None,
                Err(e) => return Err(e),
            });
        }
        if fits.iter().all(Option::is_none) {
            return Err(Error::EmptyInput("no coherence time supports estimation".into()));
        }
        Ok(fits)
    }

    fn samplers(&self, fits: &Self::Estimate) -> Result<Vec<Box<dyn ClassSampler>>> {
        let mut per_class: Vec<Vec<Box<dyn ClassSampler>>> = vec![Vec::new(), Vec::new()];
        for fit in fits.iter().flatten() {
            let problem = SpoofingProblem { pairs: self.pairs, dims: self.dims, opts: self.opts.clone() };
            for (c, smp) in problem.samplers(fit)?.into_iter().enumerate() {
                per_class[c].push(smp);
            }
        }
        Ok(per_class.into_iter().map(|parts| Box::new(MixtureSampler { parts }) as Box<dyn ClassSampler>).collect())
    }
}

pub(super) fn run_coherence(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let s = setup(cfg)?;
    let sweep = cfg.usizes("spoofing.coherence.n_c")?;
    let per_class = cfg.usize("spoofing.coherence.synthetic_per_class")?;
    let samples = cfg.usize("spoofing.coherence.samples")?;
    let base = SnapshotScenario {
        n_coherence_alice: 1,
        coherence_ratio: cfg.f64("spoofing.coherence.ratio")?,
        samples_per_coherence: samples,
        eve_activity: cfg.f64("spoofing.coherence.eve_activity")?,
        ..SnapshotScenario::single(samples, 0)
    };
    let seeds = cfg.seeds()?;
    let runs = per_seed(&seeds, |seed| {
        let mut rows = Vec::new();
        for &n_c in &sweep {
            let sub = derive_seed(seed, n_c as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(sub);
            let scn = scenario(cfg, SnapshotScenario { n_coherence_alice: n_c, ..base })?;
            let out = simulate_scenario(&scn, &s.alice, &s.eve, &s.dims, &mut rng)?;
            let train = SpoofingRows::from_pairs(&out.train)?;
            let test = SpoofingRows::from_pairs(&out.test)?;
            let problem = CoherenceProblem::new(&out.train, n_c, s.dims, s.opts.clone());
            let n_fit_guess = 2 * per_class * n_c;
            let res = run_hyphylearn(&problem, &train.features, &s.specs, &s.training(train.len(), n_fit_guess, sub))
                .map_err(|e| e.context(format!("HyPhyLearn over {n_c} coherence times")))?;
            let acc = |c: &dyn Classifier| accuracy(c, &test.features, &test.label_true);
            let x = n_c as f64;
            rows.push((x, "hyphylearn", acc(&res.classifier)?));

            // Each test pair goes to its own coherence time's plug-in rule;
            // without a fit the heuristic label stands.
            let mut correct = 0usize;
            for p in &out.test {
                let guess = match &res.estimate[p.coherence] {
                    Some(fit) => {
                        let lrt = fit.plug_in()?;
                        lrt_classify(&p.difference(), &lrt.models, lrt.threshold)?
                    }
                    None => p.label_heuristic,
                };
                correct += usize::from(guess == p.label_true);
            }
            rows.push((x, "plug-in-lrt", correct as f64 / out.test.len() as f64));

            let ft = s.fine_tune(&res.synthetic, &train.dataset(true)?, sub)?;
            rows.push((x, "fine-tuning", acc(&ft)?));
            rows.push((x, "gmm", gmm_accuracy(&train, &test, &mut rng)?));
            rows.push((x, "bayes", bayes_accuracy(&out, &s.dims)?));
            rows.push((x, "heuristic", heuristic_accuracy(&out.test)));
        }
        Ok(rows)
    })?;
    let mut table = ResultTable::new("n_coherence");
    for (&seed, rows) in seeds.iter().zip(runs) {
        for (x, method, v) in rows {
            table.push(x, method, Metric::Accuracy, seed, v)?;
        }
    }
    Ok(RunOutput { table, extra_files: Vec::new() })
}
