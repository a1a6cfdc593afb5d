//! Small dense feed-forward networks with hand-written backprop and Adam.
//!
//! Batches are stored column-wise (`features x batch`) so every layer is a
//! single GEMM.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &str = "# hyphy-nnet v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HiddenActivation {
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    Softmax,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
}

impl NetworkSpec {
    pub fn new(layer_sizes: Vec<usize>, hidden_activation: HiddenActivation, output_activation: OutputActivation) -> Result<Self> {
        let spec = Self { layer_sizes, hidden_activation, output_activation };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(Error::InvalidParameter(format!("layer sizes {:?}", self.layer_sizes)));
        }
        Ok(())
    }

    pub fn n_in(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_out(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `n_out x n_in`.
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Layer {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self { w: DMatrix::zeros(n_out, n_in), b: DVector::zeros(n_out) }
    }
}

/// Weights and biases of every layer. Gradients share the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub spec: NetworkSpec,
    pub layers: Vec<Layer>,
}

pub type Gradients = NetworkParams;

/// Intermediate values of a batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input to every layer; `inputs[0]` is the batch itself.
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activation of every layer.
    pre: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

impl ForwardCache {
    pub fn logits(&self) -> &DMatrix<f64> {
        self.pre.last().expect("at least one layer")
    }
}

impl NetworkParams {
    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layer_sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Ok(Self { spec: spec.clone(), layers })
    }

    /// Uniform He initialization, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`,
    /// with zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(spec)?;
        for layer in &mut p.layers {
            let lim = (6.0 / layer.w.ncols() as f64).sqrt();
            layer.w.iter_mut().for_each(|v| *v = rng.random_range(-lim..lim));
        }
        Ok(p)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn check_input(&self, rows: usize) -> Result<()> {
        if rows != self.spec.n_in() {
            return Err(Error::Dimension(format!("input of {rows} features for a network taking {}", self.spec.n_in())));
        }
        Ok(())
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> Result<ForwardCache> {
        self.check_input(x.nrows())?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut a = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.w * &a;
            for mut col in z.column_iter_mut() {
                col += &layer.b;
            }
            inputs.push(a);
            a = if i + 1 < n {
                match self.spec.hidden_activation {
                    HiddenActivation::Relu => z.map(|v| v.max(0.0)),
                    HiddenActivation::Identity => z.clone(),
                }
            } else {
                match self.spec.output_activation {
                    OutputActivation::Softmax => softmax_columns(&z),
                    OutputActivation::Linear => z.clone(),
                }
            };
            pre.push(z);
        }
        Ok(ForwardCache { inputs, pre, output: a })
    }

    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward_cached(x)?.output)
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let out = self.forward_batch(&DMatrix::from_column_slice(x.len(), 1, x.as_slice()))?;
        Ok(out.column(0).into_owned())
    }

    /// Backpropagates `d_logits` (gradient w.r.t. the last layer's
    /// pre-activation) and returns the parameter gradients and the gradient
    /// w.r.t. the input batch.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &DMatrix<f64>) -> Result<(Gradients, DMatrix<f64>)> {
        if d_logits.shape() != cache.logits().shape() {
            return Err(Error::Dimension(format!(
                "output gradient {:?} for logits {:?}",
                d_logits.shape(),
                cache.logits().shape()
            )));
        }
        let mut grads = Self::zeros(&self.spec)?;
        let mut delta = d_logits.clone();
        for i in (0..self.layers.len()).rev() {
            grads.layers[i].w = &delta * cache.inputs[i].transpose();
            grads.layers[i].b = delta.column_sum();
            let mut back = self.layers[i].w.transpose() * &delta;
            if i > 0 && self.spec.hidden_activation == HiddenActivation::Relu {
                back.zip_apply(&cache.pre[i - 1], |g, z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            delta = back;
        }
        Ok((grads, delta))
    }

    /// Elementwise `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Self) {
        for (l, o) in self.layers.iter_mut().zip(&other.layers) {
            l.w.zip_apply(&o.w, |a, b| *a += s * b);
            l.b.zip_apply(&o.b, |a, b| *a += s * b);
        }
    }

    pub fn scaled(mut self, s: f64) -> Self {
        for l in &mut self.layers {
            l.w *= s;
            l.b *= s;
        }
        self
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()).copied()).collect()
    }

    pub fn set_flat(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.n_params() {
            return Err(Error::Dimension(format!("{} values for {} parameters", v.len(), self.n_params())));
        }
        let mut it = v.iter().copied();
        for l in &mut self.layers {
            l.w.iter_mut().chain(l.b.iter_mut()).for_each(|x| *x = it.next().expect("length checked"));
        }
        Ok(())
    }

    /// Writes the text checkpoint: a magic line, the spec, then one tagged
    /// line per weight matrix (column-major) and bias vector.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        let mut s = String::new();
        writeln!(s, "{CHECKPOINT_MAGIC}").ok();
        let sizes: Vec<String> = self.spec.layer_sizes.iter().map(|n| n.to_string()).collect();
        writeln!(s, "layers={}", sizes.join(",")).ok();
        writeln!(s, "hidden={}", match self.spec.hidden_activation {
            HiddenActivation::Relu => "relu",
            HiddenActivation::Identity => "identity",
        })
        .ok();
        writeln!(s, "output={}", match self.spec.output_activation {
            OutputActivation::Softmax => "softmax",
            OutputActivation::Linear => "linear",
        })
        .ok();
        for (i, l) in self.layers.iter().enumerate() {
            let w: Vec<String> = l.w.iter().map(|v| format!("{v:?}")).collect();
            writeln!(s, "W{i},{},{},{}", l.w.nrows(), l.w.ncols(), w.join(",")).ok();
            let b: Vec<String> = l.b.iter().map(|v| format!("{v:?}")).collect();
            writeln!(s, "b{i},{},{}", l.b.len(), b.join(",")).ok();
        }
        out.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Self> {
        let bad = |what: &str| Error::Config(format!("checkpoint: {what}"));
        let mut lines = input.lines();
        let mut next = || -> Result<String> { lines.next().ok_or_else(|| bad("truncated"))?.map_err(Error::from) };
        if next()? != CHECKPOINT_MAGIC {
            return Err(bad("missing version header"));
        }
        let field = |line: String, key: &str| -> Result<String> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .map(str::to_owned)
                .ok_or_else(|| bad(&format!("expected `{key}=`")))
        };
        let sizes = field(next()?, "layers")?
            .split(',')
            .map(|t| t.parse::<usize>().map_err(|_| bad("layer size")))
            .collect::<Result<Vec<_>>>()?;
        let hidden = match field(next()?, "hidden")?.as_str() {
            "relu" => HiddenActivation::Relu,
            "identity" => HiddenActivation::Identity,
            other => return Err(bad(&format!("hidden activation `{other}`"))),
        };
        let output = match field(next()?, "output")?.as_str() {
            "softmax" => OutputActivation::Softmax,
            "linear" => OutputActivation::Linear,
            other => return Err(bad(&format!("output activation `{other}`"))),
        };
        let spec = NetworkSpec::new(sizes, hidden, output)?;
        let mut p = Self::zeros(&spec)?;
        let parse = |t: &str| t.parse::<f64>().map_err(|_| bad(&format!("number `{t}`")));
        for i in 0..p.layers.len() {
            let line = next()?;
            let mut it = line.split(',');
            if it.next() != Some(&format!("W{i}")) {
                return Err(bad(&format!("expected W{i}")));
            }
            let (r, c) = (it.next().map(str::parse::<usize>), it.next().map(str::parse::<usize>));
            if r != Some(Ok(p.layers[i].w.nrows())) || c != Some(Ok(p.layers[i].w.ncols())) {
                return Err(bad(&format!("shape of W{i}")));
            }
            let vals = it.map(parse).collect::<Result<Vec<_>>>()?;
            if vals.len() != p.layers[i].w.len() {
                return Err(bad(&format!("value count of W{i}")));
            }
            p.layers[i].w.copy_from_slice(&vals);
            let line = next()?;
            let mut it = line.split(',');
            if it.next() != Some(&format!("b{i}")) || it.next().map(str::parse::<usize>) != Some(Ok(p.layers[i].b.len())) {
                return Err(bad(&format!("header of b{i}")));
            }
            let vals = it.map(parse).collect::<Result<Vec<_>>>()?;
            if vals.len() != p.layers[i].b.len() {
                return Err(bad(&format!("value count of b{i}")));
            }
            p.layers[i].b.copy_from_slice(&vals);
        }
        Ok(p)
    }
}

/// Column-wise softmax with max subtraction.
pub fn softmax_columns(z: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = z.clone();
    for mut col in out.column_iter_mut() {
        let m = col.max();
        col.apply(|v| *v = (*v - m).exp());
        let s = col.sum();
        col /= s;
    }
    out
}

/// Mean cross-entropy of softmax outputs, probabilities clamped at 1e-12.
pub fn cross_entropy(probs: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let n = labels.len() as f64;
    // `f64::max` would swallow a NaN probability.
    let clamp = |p: f64| if p.is_nan() { p } else { p.max(1e-12) };
    Ok(labels.iter().enumerate().map(|(j, &y)| -clamp(probs[(y, j)]).ln()).sum::<f64>() / n)
}

fn check_labels(probs: &DMatrix<f64>, labels: &[usize]) -> Result<()> {
    if labels.is_empty() || labels.len() != probs.ncols() {
        return Err(Error::Dimension(format!("{} labels for a batch of {}", labels.len(), probs.ncols())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= probs.nrows()) {
        return Err(Error::Dimension(format!("label {y} for {} classes", probs.nrows())));
    }
    Ok(())
}

/// Gradient of the mean softmax cross-entropy w.r.t. the logits,
/// `(p - onehot) / batch`.
pub fn softmax_ce_logit_grad(probs: &DMatrix<f64>, labels: &[usize]) -> Result<DMatrix<f64>> {
    check_labels(probs, labels)?;
    let n = labels.len() as f64;
    let mut g = probs.clone();
    for (j, &y) in labels.iter().enumerate() {
        g[(y, j)] -= 1.0;
    }
    Ok(g / n)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    /// Mean softmax cross-entropy.
    CrossEntropy,
    /// Mean squared error over outputs and batch, halved.
    HalfMse,
}

/// Loss on a batch of targets: class labels for cross-entropy, or the
/// regression target matrix for squared error.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    Labels(&'a [usize]),
    Values(&'a DMatrix<f64>),
}

/// Loss value and parameter gradients on one batch (`x` is
/// `features x batch`).
pub fn loss_and_grad(params: &NetworkParams, x: &DMatrix<f64>, targets: Targets<'_>, kind: LossKind) -> Result<(f64, Gradients)> {
    if x.ncols() == 0 {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    let cache = params.forward_cached(x)?;
    let (loss, d) = match (kind, targets) {
        (LossKind::CrossEntropy, Targets::Labels(y)) => {
            if params.spec.output_activation != OutputActivation::Softmax {
                return Err(Error::InvalidParameter("cross-entropy needs a softmax output".into()));
            }
            (cross_entropy(&cache.output, y)?, softmax_ce_logit_grad(&cache.output, y)?)
        }
        (LossKind::HalfMse, Targets::Values(t)) => {
            if params.spec.output_activation != OutputActivation::Linear || t.shape() != cache.output.shape() {
                return Err(Error::Dimension("squared error needs a linear output of the target's shape".into()));
            }
            let n = x.ncols() as f64;
            let r = &cache.output - t;
            (0.5 * r.norm_squared() / n, r / n)
        }
        _ => return Err(Error::InvalidParameter(format!("targets do not fit loss {kind:?}"))),
    };
    let (g, _) = params.backward(&cache, &d)?;
    Ok((loss, g))
}

/// Column-wise argmax.
pub fn argmax_columns(m: &DMatrix<f64>) -> Vec<usize> {
    m.column_iter().map(|c| c.argmax().0).collect()
}

/// Adam with bias correction (`beta1 = 0.9`, `beta2 = 0.999`,
/// `eps = 1e-8`).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(params: &NetworkParams, lr: f64) -> Self {
        let n = params.n_params();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// One descent step along `grads`.
    pub fn step(&mut self, params: &mut NetworkParams, grads: &Gradients) -> Result<()> {
        if grads.n_params() != self.m.len() || params.n_params() != self.m.len() {
            return Err(Error::Dimension("optimizer state does not match the network".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let g = grads.flat();
        let mut p = params.flat();
        for i in 0..p.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        params.set_flat(&p)
    }
}
