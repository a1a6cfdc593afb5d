use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use super::results::{Metric, ResultTable};
use super::{derive_seed, evaluate_ber, per_seed, relu_net, ClassifierDetector, RunOutput};
use crate::cdma::{
    corrupt_codes, ls_channel_estimate, random_bits, random_channels, synthesize_scene, CdmaConfig, CdmaProblem,
    MmseDetector, PulseModel, SpreadingCodes, UserChannel,
};
use crate::error::{Error, Result};
use crate::hyphylearn::{run_hyphylearn, AdversarialSpecs, OptimizerKind, TrainingConfig};
use crate::nnet::OutputActivation;

struct Setup {
    base: CdmaConfig,
    gold: bool,
    hyphylearn: bool,
    pulse_model: PulseModel,
    n_test: usize,
    n_synthetic: usize,
    specs: AdversarialSpecs,
    steps: usize,
    batch: usize,
    lr: f64,
    z_dim: usize,
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    let base = CdmaConfig {
        k_users: cfg.usize("cdma.k_users")?,
        n_gain: cfg.usize("cdma.n_gain")?,
        l_paths: cfg.usize("cdma.l_paths")?,
        nfr_db: cfg.f64("cdma.nfr_db")?,
        rolloff: cfg.f64("cdma.rolloff")?,
        max_delay_spread_chips: cfg.f64("cdma.max_delay_spread_chips")?,
        rho_mismatch: cfg.f64("cdma.rho")?,
        ..CdmaConfig::default()
    };
    base.validate().map_err(|e| Error::Config(e.to_string()))?;
    let n_x = 4 * base.frame_len();
    let z = cfg.usize("cdma.z_dim")?;
    Ok(Setup {
        gold: cfg.text("cdma.codes")? == "gold",
        hyphylearn: cfg.text("cdma.hyphylearn")? == "true",
        pulse_model: if cfg.text("cdma.pulse_model")? == "ls" { PulseModel::LeastSquares } else { PulseModel::Paths },
        n_test: cfg.usize("cdma.n_test")?,
        n_synthetic: cfg.usize("cdma.n_synthetic")?,
        specs: AdversarialSpecs {
            mapper: relu_net(n_x, &cfg.usizes("cdma.mapper_hidden")?, z, OutputActivation::Linear)?,
            classifier: relu_net(z, &cfg.usizes("cdma.head_hidden")?, base.n_classes(), OutputActivation::Softmax)?,
            discriminator: relu_net(z, &cfg.usizes("cdma.disc_hidden")?, 2, OutputActivation::Softmax)?,
        },
        steps: cfg.usize("cdma.steps")?,
        batch: cfg.usize("cdma.batch_size")?,
        lr: cfg.f64("cdma.lr")?,
        z_dim: z,
        base,
    })
}

/// What one seed keeps fixed across its sweep: codes, channels and bits.
struct Draw {
    codes: SpreadingCodes,
    codes_bs: SpreadingCodes,
    channels: Vec<UserChannel>,
    train_bits: Vec<Vec<i8>>,
    test_bits: Vec<Vec<i8>>,
}

fn draw(s: &Setup, seed: u64, max_train: usize) -> Result<Draw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = s.base.k_users;
    let codes = if s.gold {
        SpreadingCodes::gold(k, s.base.n_gain)?
    } else {
        SpreadingCodes::random_short(k, s.base.n_gain, &mut rng)?
    };
    let channels = random_channels(&s.base, &mut rng)?;
    let codes_bs = corrupt_codes(&codes, s.base.rho_mismatch, &mut rng)?;
    let train_bits = random_bits(k, max_train, &mut rng);
    let test_bits = random_bits(k, s.n_test, &mut rng);
    Ok(Draw { codes, codes_bs, channels, train_bits, test_bits })
}

/// BER of every detector at one operating point.
fn point(s: &Setup, d: &Draw, snr_db: f64, n_train: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let cfg = CdmaConfig { snr_db, ..s.base.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bits: Vec<Vec<i8>> = d.train_bits.iter().map(|b| b[..n_train].to_vec()).collect();
    let train = synthesize_scene(&cfg, &d.codes, &d.channels, &bits, &mut rng)?;
    let test = synthesize_scene(&cfg, &d.codes, &d.channels, &d.test_bits, &mut rng)?;

    let perfect = MmseDetector::new(&d.codes, &test.g_true, test.noise_var, &cfg)?;
    let mut out = vec![("perfect-mmse", evaluate_ber(&perfect, &test)?)];
    let ls = ls_channel_estimate(&train.frames, &d.codes_bs, &train.true_bits, n_train, &cfg)?;
    let mmse = MmseDetector::new(&d.codes_bs, &ls.g, ls.noise_var, &cfg)?;
    out.push(("mmse", evaluate_ber(&mmse, &test)?));

    if s.hyphylearn {
        let problem = CdmaProblem { cfg: cfg.clone(), codes_assumed: d.codes_bs.clone(), training: train, pulse_model: s.pulse_model };
        let (raw, _) = problem.training.window_dataset()?;
        let tc = TrainingConfig {
            n_train_steps: s.steps,
            batch_size: s.batch.min(raw.ncols()),
            lr_mapper: s.lr,
            lr_classifier: s.lr,
            lr_discriminator: s.lr,
            optimizer: OptimizerKind::Adam,
            seed,
            n_synthetic: s.n_synthetic,
            z_dim: s.z_dim,
            standardize: true,
            domain_weight: 1.0,
        };
        let res = run_hyphylearn(&problem, &raw, &s.specs, &tc)?;
        let det = ClassifierDetector { classifier: &res.classifier, k_users: cfg.k_users };
        out.push(("hyphylearn", evaluate_ber(&det, &test)?));
    }
    Ok(out)
}

fn collect(seeds: &[u64], sweep_name: &str, runs: Vec<Vec<(f64, &'static str, f64)>>) -> Result<RunOutput> {
    let mut table = ResultTable::new(sweep_name);
    for (&seed, rows) in seeds.iter().zip(runs) {
        for (x, method, v) in rows {
            table.push(x, method, Metric::Ber, seed, v)?;
        }
    }
    Ok(RunOutput { table, extra_files: Vec::new() })
}

fn check_train(s: &Setup, n_train: usize) -> Result<()> {
    if n_train < 4 {
        return Err(Error::Config(format!("{n_train} training frames leave no decision window")));
    }
    let unknowns = s.base.k_users * s.base.g_len();
    if n_train * s.base.frame_len() < unknowns {
        return Err(Error::Config(format!("{n_train} training frames cannot determine {unknowns} pulse samples")));
    }
    Ok(())
}

pub(super) fn run_vs_snr(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let s = setup(cfg)?;
    let sweep = cfg.f64s("cdma.snr_db")?;
    let n_train = cfg.usize("cdma.n_train")?;
    check_train(&s, n_train)?;
    let seeds = cfg.seeds()?;
    let runs = per_seed(&seeds, |seed| {
        let d = draw(&s, seed, n_train)?;
        let mut rows = Vec::new();
        // One noise stream for every point: the frames at different SNRs
        // differ only in the noise scale.
        let stream = derive_seed(seed, 1);
        for &snr in &sweep {
            for (m, v) in point(&s, &d, snr, n_train, stream)? {
                rows.push((snr, m, v));
            }
        }
        Ok(rows)
    })?;
    collect(&seeds, "snr_db", runs)
}

pub(super) fn run_vs_data(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let s = setup(cfg)?;
    let sweep = cfg.usizes("cdma.n_train_sweep")?;
    for &n in &sweep {
        check_train(&s, n)?;
    }
    let snr = cfg.f64("cdma.snr_fixed_db")?;
    let max_train = sweep.iter().copied().max().unwrap_or(0);
    let seeds = cfg.seeds()?;
    let runs = per_seed(&seeds, |seed| {
        let d = draw(&s, seed, max_train)?;
        let mut rows = Vec::new();
        for &n in &sweep {
            for (m, v) in point(&s, &d, snr, n, derive_seed(seed, n as u64))? {
                rows.push((n as f64, m, v));
            }
        }
        Ok(rows)
    })?;
    collect(&seeds, "n_train", runs)
}
