use std::f64::consts::LN_2;
use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::classify::{NetClassifier, Standardizer};
use super::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::nnet::{argmax_columns, cross_entropy, softmax_ce_logit_grad, AdamState, Gradients, NetworkParams, NetworkSpec, OutputActivation};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Schedule of the saddle-point training loop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingConfig {
    pub n_train_steps: usize,
    pub batch_size: usize,
    /// Rates for the mapper, the label head and the domain discriminator.
    pub lr_mapper: f64,
    pub lr_classifier: f64,
    pub lr_discriminator: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub n_synthetic: usize,
    pub z_dim: usize,
    /// Fit a per-feature standardiser on the union of real and synthetic
    /// rows before training.
    pub standardize: bool,
    /// Weight of the domain term in the mapper update; 0 trains `h(M(.))`
    /// on synthetic rows alone.
    pub domain_weight: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            n_train_steps: 20_000,
            batch_size: 128,
            lr_mapper: 1e-4,
            lr_classifier: 1e-4,
            lr_discriminator: 1e-4,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            n_synthetic: 400_000,
            z_dim: 64,
            standardize: true,
            domain_weight: 1.0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.domain_weight.is_finite() {
            return Err(Error::InvalidParameter(format!("domain weight {}", self.domain_weight)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be positive".into()));
        }
        let rates = [self.lr_mapper, self.lr_classifier, self.lr_discriminator];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::InvalidParameter(format!("learning rates {rates:?}")));
        }
        Ok(())
    }
}

/// Architectures of the mapper `M`, label head `h` and discriminator `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialSpecs {
    pub mapper: NetworkSpec,
    pub classifier: NetworkSpec,
    pub discriminator: NetworkSpec,
}

impl AdversarialSpecs {
    pub fn validate(&self, n_x: usize, n_classes: usize) -> Result<()> {
        self.mapper.validate()?;
        self.classifier.validate()?;
        self.discriminator.validate()?;
        let z = self.mapper.n_out();
        if self.mapper.n_in() != n_x || self.classifier.n_in() != z || self.discriminator.n_in() != z {
            return Err(Error::Dimension(format!(
                "mapper {}->{z}, heads take {} and {}, data has {n_x} features",
                self.mapper.n_in(),
                self.classifier.n_in(),
                self.discriminator.n_in()
            )));
        }
        if self.mapper.output_activation != OutputActivation::Linear {
            return Err(Error::InvalidParameter("the mapper needs a linear output".into()));
        }
        if self.classifier.output_activation != OutputActivation::Softmax || self.classifier.n_out() != n_classes {
            return Err(Error::InvalidParameter(format!("label head must be a {n_classes}-way softmax")));
        }
        if self.discriminator.output_activation != OutputActivation::Softmax || self.discriminator.n_out() != 2 {
            return Err(Error::InvalidParameter("discriminator must be a 2-way softmax".into()));
        }
        Ok(())
    }
}

/// Per-step losses. `L_c` is the sum of the two domain cross-entropies
/// (real rows labeled 0, synthetic rows labeled 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDiagnostics {
    pub step: usize,
    pub loss_s: f64,
    pub loss_c: f64,
    pub d_hat_proxy: f64,
}

/// `2 (1 - L_c / (2 ln 2))`: 0 at a chance-level discriminator, 2 at a
/// perfect one.
pub fn proxy_from_domain_loss(loss_c: f64) -> f64 {
    2.0 * (1.0 - loss_c / (2.0 * LN_2))
}

pub fn write_diagnostics_csv<W: Write>(diag: &[StepDiagnostics], mut out: W) -> Result<()> {
    writeln!(out, "step,L_s,L_c,d_hat_proxy")?;
    for d in diag {
        writeln!(out, "{},{:?},{:?},{:?}", d.step, d.loss_s, d.loss_c, d.d_hat_proxy)?;
    }
    Ok(())
}

enum Opt {
    Sgd(f64),
    Adam(AdamState),
}

impl Opt {
    fn new(kind: OptimizerKind, params: &NetworkParams, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Opt::Sgd(lr),
            OptimizerKind::Adam => Opt::Adam(AdamState::new(params, lr)),
        }
    }

    fn step(&mut self, params: &mut NetworkParams, grads: &Gradients) -> Result<()> {
        match self {
            Opt::Sgd(lr) => {
                params.axpy(-*lr, grads);
                Ok(())
            }
            Opt::Adam(st) => st.step(params, grads),
        }
    }
}

/// Gradient of `L_c` w.r.t. the discriminator logits for a batch whose
/// first `nr` columns are real. Each domain term is its own mean.
fn domain_logit_grad(p: &DMatrix<f64>, nr: usize) -> DMatrix<f64> {
    let ns = p.ncols() - nr;
    let mut d = p.clone();
    for j in 0..p.ncols() {
        let (y, n) = if j < nr { (0, nr) } else { (1, ns) };
        d[(y, j)] -= 1.0;
        for i in 0..2 {
            d[(i, j)] /= n as f64;
        }
    }
    d
}

/// Gradients of one saddle-point step.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub loss_s: f64,
    pub loss_c: f64,
    /// `G_{s,psi} - lambda G_{c,psi}`.
    pub mapper: Gradients,
    pub classifier: Gradients,
    pub discriminator: Gradients,
}

/// Losses and gradients on a real batch `xr` and a labeled synthetic batch
/// `(xs, ys)`, with domain weight `lambda` in the mapper gradient.
pub fn saddle_gradients(
    mapper: &NetworkParams,
    classifier: &NetworkParams,
    discriminator: &NetworkParams,
    xr: &DMatrix<f64>,
    xs: &DMatrix<f64>,
    ys: &[usize],
    lambda: f64,
) -> Result<StepGradients> {
    let (nr, ns) = (xr.ncols(), xs.ncols());
    if nr == 0 || ns == 0 {
        return Err(Error::EmptyInput("empty real or synthetic batch".into()));
    }
    let cache_s = mapper.forward_cached(xs)?;
    let cache_r = mapper.forward_cached(xr)?;

    let head = classifier.forward_cached(&cache_s.output)?;
    let loss_s = cross_entropy(&head.output, ys)?;
    let (g_cls, dz_s_cls) = classifier.backward(&head, &softmax_ce_logit_grad(&head.output, ys)?)?;

    let mut z = DMatrix::zeros(cache_r.output.nrows(), nr + ns);
    z.columns_mut(0, nr).copy_from(&cache_r.output);
    z.columns_mut(nr, ns).copy_from(&cache_s.output);
    let disc = discriminator.forward_cached(&z)?;
    let p = &disc.output;
    let yr = vec![0usize; nr];
    let yd = vec![1usize; ns];
    let loss_c = cross_entropy(&p.columns(0, nr).into_owned(), &yr)? + cross_entropy(&p.columns(nr, ns).into_owned(), &yd)?;
    let (g_disc, dz_c) = discriminator.backward(&disc, &domain_logit_grad(p, nr))?;

    let dz_r = dz_c.columns(0, nr) * -lambda;
    let dz_s = dz_s_cls - dz_c.columns(nr, ns) * lambda;
    let (mut g_map, _) = mapper.backward(&cache_s, &dz_s)?;
    let (g_map_r, _) = mapper.backward(&cache_r, &dz_r)?;
    g_map.axpy(1.0, &g_map_r);
    Ok(StepGradients { loss_s, loss_c, mapper: g_map, classifier: g_cls, discriminator: g_disc })
}

/// Output of [`adversarial_train`].
#[derive(Clone, Debug)]
pub struct AdversarialOutcome {
    pub classifier: NetClassifier,
    pub discriminator: NetworkParams,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Saddle-point training. Each step draws `batch_size` rows from each
/// dataset, then updates the mapper along `G_s - G_c`, the head along
/// `G_s` and the discriminator along `G_c`.
pub fn adversarial_train(
    d_r: &LabeledDataset,
    d_s: &LabeledDataset,
    specs: &AdversarialSpecs,
    cfg: &TrainingConfig,
) -> Result<AdversarialOutcome> {
    cfg.validate()?;
    if d_r.is_empty() || d_s.is_empty() {
        return Err(Error::EmptyInput("adversarial training needs real and synthetic rows".into()));
    }
    if d_r.dim() != d_s.dim() {
        return Err(Error::Dimension(format!("real rows have {} features, synthetic {}", d_r.dim(), d_s.dim())));
    }
    specs.validate(d_r.dim(), d_s.n_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scaler = if cfg.standardize {
        Standardizer::fit(&d_r.concat(d_s)?.features)?
    } else {
        Standardizer::identity(d_r.dim())
    };
    let xr_all = scaler.apply(&d_r.features)?;
    let xs_all = scaler.apply(&d_s.features)?;

    let mut mapper = NetworkParams::init(&specs.mapper, &mut rng)?;
    let mut head = NetworkParams::init(&specs.classifier, &mut rng)?;
    let mut disc = NetworkParams::init(&specs.discriminator, &mut rng)?;
    let mut opt_m = Opt::new(cfg.optimizer, &mapper, cfg.lr_mapper);
    let mut opt_h = Opt::new(cfg.optimizer, &head, cfg.lr_classifier);
    let mut opt_d = Opt::new(cfg.optimizer, &disc, cfg.lr_discriminator);

    let mut diagnostics = Vec::with_capacity(cfg.n_train_steps);
    for step in 0..cfg.n_train_steps {
        let ir = d_r.sample_indices(cfg.batch_size, &mut rng);
        let is = d_s.sample_indices(cfg.batch_size, &mut rng);
        let xr = xr_all.select_columns(&ir);
        let xs = xs_all.select_columns(&is);
        let ys: Vec<usize> = is.iter().map(|&i| d_s.labels[i]).collect();
        let g = saddle_gradients(&mapper, &head, &disc, &xr, &xs, &ys, cfg.domain_weight)?;
        if !(g.loss_s.is_finite() && g.loss_c.is_finite()) {
            return Err(Error::Numerical(format!("non-finite loss at training step {step}")));
        }
        diagnostics.push(StepDiagnostics {
            step,
            loss_s: g.loss_s,
            loss_c: g.loss_c,
            d_hat_proxy: proxy_from_domain_loss(g.loss_c),
        });
        opt_m.step(&mut mapper, &g.mapper)?;
        opt_h.step(&mut head, &g.classifier)?;
        opt_d.step(&mut disc, &g.discriminator)?;
    }
    Ok(AdversarialOutcome {
        classifier: NetClassifier { scaler, mapper: Some(mapper), head },
        discriminator: disc,
        diagnostics,
    })
}

/// Both empirical A-distance forms for one discriminator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ADistance {
    /// `2 (1 - L_c / (2 ln 2))` on the full sets.
    pub proxy_loss: f64,
    /// `2 (1 - min(e, 2 - e))` with `e` the summed per-domain error rates.
    pub proxy_accuracy: f64,
}

/// Evaluates `disc` on mapped real rows `z_r` and synthetic rows `z_s`
/// (`dim x n` each).
pub fn empirical_a_distance_proxy(z_r: &DMatrix<f64>, z_s: &DMatrix<f64>, disc: &NetworkParams) -> Result<ADistance> {
    if z_r.ncols() == 0 || z_s.ncols() == 0 {
        return Err(Error::EmptyInput("A-distance needs both sets".into()));
    }
    let pr = disc.forward_batch(z_r)?;
    let ps = disc.forward_batch(z_s)?;
    let loss_c = cross_entropy(&pr, &vec![0; z_r.ncols()])? + cross_entropy(&ps, &vec![1; z_s.ncols()])?;
    let err_r = argmax_columns(&pr).iter().filter(|&&y| y != 0).count() as f64 / z_r.ncols() as f64;
    let err_s = argmax_columns(&ps).iter().filter(|&&y| y != 1).count() as f64 / z_s.ncols() as f64;
    let e = err_r + err_s;
    Ok(ADistance { proxy_loss: proxy_from_domain_loss(loss_c), proxy_accuracy: 2.0 * (1.0 - e.min(2.0 - e)) })
}

/// Trains a fresh discriminator with balanced batches to separate `z_r`
/// (domain 0) from `z_s` (domain 1).
pub fn train_discriminator(
    z_r: &DMatrix<f64>,
    z_s: &DMatrix<f64>,
    spec: &NetworkSpec,
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<NetworkParams> {
    if z_r.ncols() == 0 || z_s.ncols() == 0 {
        return Err(Error::EmptyInput("discriminator needs both sets".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut disc = NetworkParams::init(spec, &mut rng)?;
    let mut opt = AdamState::new(&disc, lr);
    let nb_r = batch_size.min(z_r.ncols());
    let nb_s = batch_size.min(z_s.ncols());
    for _ in 0..steps {
        let ir = rand::seq::index::sample(&mut rng, z_r.ncols(), nb_r).into_vec();
        let is = rand::seq::index::sample(&mut rng, z_s.ncols(), nb_s).into_vec();
        let mut z = DMatrix::zeros(z_r.nrows(), nb_r + nb_s);
        z.columns_mut(0, nb_r).copy_from(&z_r.select_columns(&ir));
        z.columns_mut(nb_r, nb_s).copy_from(&z_s.select_columns(&is));
        let cache = disc.forward_cached(&z)?;
        let (g, _) = disc.backward(&cache, &domain_logit_grad(&cache.output, nb_r))?;
        opt.step(&mut disc, &g)?;
    }
    Ok(disc)
}

/// `(9/2) min(1, v'v / sqrt(v' S v))` with `v = mu - mu_hat`.
pub fn tv_bound_equal_cov(mu: &DVector<f64>, mu_hat: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    let d = mu.len();
    if mu_hat.len() != d || sigma.shape() != (d, d) {
        return Err(Error::Dimension(format!("means of {} and {}, covariance {:?}", d, mu_hat.len(), sigma.shape())));
    }
    if Cholesky::new(sigma.clone()).is_none() {
        return Err(Error::SingularModel("covariance is not positive definite".into()));
    }
    let v = mu - mu_hat;
    let vv = v.norm_squared();
    if vv == 0.0 {
        return Ok(0.0);
    }
    let vsv = (v.transpose() * sigma * &v)[(0, 0)];
    Ok(4.5 * (vv / vsv.sqrt()).min(1.0))
}

/// Phase-two settings of the fine-tuning baseline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FineTuneConfig {
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub finetune_lr: f64,
    pub seed: u64,
    pub standardize: bool,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self { pretrain_steps: 20_000, finetune_steps: 2_000, batch_size: 128, lr: 1e-4, finetune_lr: 1e-4, seed: 0, standardize: true }
    }
}

fn supervised_steps(
    net: &mut NetworkParams,
    opt: &mut AdamState,
    x: &DMatrix<f64>,
    y: &[usize],
    steps: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for step in 0..steps {
        let idx = rand::seq::index::sample(rng, x.ncols(), batch.min(x.ncols())).into_vec();
        let xb = x.select_columns(&idx);
        let yb: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        let cache = net.forward_cached(&xb)?;
        let loss = cross_entropy(&cache.output, &yb)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at supervised step {step}")));
        }
        let (g, _) = net.backward(&cache, &softmax_ce_logit_grad(&cache.output, &yb)?)?;
        opt.step(net, &g)?;
    }
    Ok(())
}

/// Trains `spec` on synthetic rows, then keeps training (fresh optimizer
/// state) on the real rows and their labels.
pub fn fine_tune_baseline(d_s: &LabeledDataset, d_r: &LabeledDataset, spec: &NetworkSpec, cfg: &FineTuneConfig) -> Result<NetClassifier> {
    if d_s.is_empty() {
        return Err(Error::EmptyInput("no synthetic rows".into()));
    }
    if !d_r.is_empty() && d_r.dim() != d_s.dim() {
        return Err(Error::Dimension(format!("real rows have {} features, synthetic {}", d_r.dim(), d_s.dim())));
    }
    if spec.n_in() != d_s.dim() || spec.n_out() != d_s.n_classes || spec.output_activation != OutputActivation::Softmax {
        return Err(Error::Dimension("network does not fit the synthetic data".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scaler = if cfg.standardize { Standardizer::fit(&d_s.features)? } else { Standardizer::identity(d_s.dim()) };
    let mut net = NetworkParams::init(spec, &mut rng)?;
    let mut opt = AdamState::new(&net, cfg.lr);
    supervised_steps(&mut net, &mut opt, &scaler.apply(&d_s.features)?, &d_s.labels, cfg.pretrain_steps, cfg.batch_size, &mut rng)?;
    if cfg.finetune_steps > 0 && !d_r.is_empty() {
        let mut opt = AdamState::new(&net, cfg.finetune_lr);
        supervised_steps(&mut net, &mut opt, &scaler.apply(&d_r.features)?, &d_r.labels, cfg.finetune_steps, cfg.batch_size, &mut rng)?;
    }
    Ok(NetClassifier { scaler, mapper: None, head: net })
}
