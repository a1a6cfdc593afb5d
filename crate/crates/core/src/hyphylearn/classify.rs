use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::nnet::{argmax_columns, NetworkParams};

/// Anything that labels a batch of feature columns.
pub trait Classifier {
    fn n_classes(&self) -> usize;

    /// One label per column of `x` (`dim x n`).
    fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<usize>>;
}

/// Per-feature affine normalisation `(x - mean) / scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: DVector<f64>,
    pub scale: DVector<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: DVector::zeros(dim), scale: DVector::from_element(dim, 1.0) }
    }

    /// Column mean and standard deviation; constant features keep scale 1.
    pub fn fit(x: &DMatrix<f64>) -> Result<Self> {
        if x.ncols() == 0 {
            return Err(Error::EmptyInput("no rows to standardise".into()));
        }
        let n = x.ncols() as f64;
        let mean = x.column_mean();
        let scale = DVector::from_fn(x.nrows(), |i, _| {
            let v = x.row(i).iter().map(|a| (a - mean[i]).powi(2)).sum::<f64>() / n;
            if v > 0.0 { v.sqrt() } else { 1.0 }
        });
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.mean.len() {
            return Err(Error::Dimension(format!("{} features for a scaler over {}", x.nrows(), self.mean.len())));
        }
        let mut out = x.clone();
        for mut col in out.column_iter_mut() {
            col -= &self.mean;
            col.component_div_assign(&self.scale);
        }
        Ok(out)
    }
}

/// `argmax h(M(scale(x)))`. The fine-tuning baseline is a single network
/// and leaves `mapper` empty.
#[derive(Clone, Debug, PartialEq)]
pub struct NetClassifier {
    pub scaler: Standardizer,
    pub mapper: Option<NetworkParams>,
    pub head: NetworkParams,
}

impl NetClassifier {
    /// Feature-space representation `M(scale(x))`.
    pub fn embed(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let xs = self.scaler.apply(x)?;
        match &self.mapper {
            Some(m) => m.forward_batch(&xs),
            None => Ok(xs),
        }
    }

    /// Softmax outputs, one column per input column.
    pub fn probabilities(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.head.forward_batch(&self.embed(x)?)
    }

    /// Scaler and networks in one text stream; each network uses the
    /// `nnet` checkpoint format.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        let vals = |v: &DVector<f64>| v.iter().map(|a| format!("{a:?}")).collect::<Vec<_>>().join(",");
        writeln!(out, "# hyphy-classifier v1")?;
        writeln!(out, "scaler_mean,{}", vals(&self.scaler.mean))?;
        writeln!(out, "scaler_scale,{}", vals(&self.scaler.scale))?;
        writeln!(out, "networks={}", if self.mapper.is_some() { 2 } else { 1 })?;
        if let Some(m) = &self.mapper {
            m.write_checkpoint(&mut out)?;
        }
        self.head.write_checkpoint(&mut out)?;
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Self> {
        let bad = |m: &str| Error::Config(format!("classifier checkpoint: {m}"));
        let lines: Vec<String> = input.lines().collect::<std::io::Result<_>>()?;
        if lines.first().map(String::as_str) != Some("# hyphy-classifier v1") {
            return Err(bad("missing header"));
        }
        let parse = |line: Option<&String>, key: &str| -> Result<DVector<f64>> {
            let line = line.ok_or_else(|| bad("truncated"))?;
            let rest = line.strip_prefix(key).and_then(|r| r.strip_prefix(',')).ok_or_else(|| bad(key))?;
            let v: std::result::Result<Vec<f64>, _> = rest.split(',').map(str::parse).collect();
            Ok(DVector::from_vec(v.map_err(|_| bad(key))?))
        };
        let mean = parse(lines.get(1), "scaler_mean")?;
        let scale = parse(lines.get(2), "scaler_scale")?;
        let n_nets: usize = lines
            .get(3)
            .and_then(|l| l.strip_prefix("networks="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("network count"))?;
        let starts: Vec<usize> = (4..lines.len()).filter(|&i| lines[i].starts_with("# hyphy-nnet")).collect();
        if starts.len() != n_nets || !(1..=2).contains(&n_nets) {
            return Err(bad("network sections"));
        }
        let section = |k: usize| {
            let end = starts.get(k + 1).copied().unwrap_or(lines.len());
            lines[starts[k]..end].join("\n")
        };
        let mut nets = (0..n_nets).map(|k| NetworkParams::read_checkpoint(section(k).as_bytes())).collect::<Result<Vec<_>>>()?;
        let head = nets.pop().expect("at least one network");
        Ok(Self { scaler: Standardizer { mean, scale }, mapper: nets.pop(), head })
    }
}

impl Classifier for NetClassifier {
    fn n_classes(&self) -> usize {
        self.head.spec.n_out()
    }

    fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<usize>> {
        Ok(argmax_columns(&self.probabilities(x)?))
    }
}

/// Always answers the same class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantClassifier {
    pub class: usize,
    pub n_classes: usize,
}

impl Classifier for ConstantClassifier {
    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<usize>> {
        Ok(vec![self.class; x.ncols()])
    }
}

/// Fraction of columns whose prediction matches `labels`.
pub fn accuracy(classifier: &dyn Classifier, x: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || labels.len() != x.ncols() {
        return Err(Error::Dimension(format!("{} labels for {} rows", labels.len(), x.ncols())));
    }
    let pred = classifier.predict(x)?;
    Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
}
