use std::fmt;

use crate::error::{Error, Result};

/// Header line tag of every result CSV. Bump when the columns change.
pub const RESULTS_SCHEMA: &str = "hyphy-results/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Accuracy,
    Ber,
    DHat,
    TvBound,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Ber => "ber",
            Metric::DHat => "d_hat",
            Metric::TvBound => "tv_bound",
        }
    }

    /// Closed range every value of this metric must lie in.
    pub fn range(self) -> (f64, f64) {
        match self {
            Metric::Accuracy | Metric::Ber => (0.0, 1.0),
            // The loss-form proxy is 2 at perfect separation and unbounded
            // below when the discriminator does worse than chance.
            Metric::DHat => (f64::NEG_INFINITY, 2.0),
            Metric::TvBound => (0.0, f64::INFINITY),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub sweep: f64,
    pub method: String,
    pub metric: Metric,
    pub seed: u64,
    pub value: f64,
}

/// All rows of one run, with the name of the swept quantity.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultTable {
    pub sweep_name: String,
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn new(sweep_name: &str) -> Self {
        Self { sweep_name: sweep_name.to_string(), rows: Vec::new() }
    }

    pub fn push(&mut self, sweep: f64, method: &str, metric: Metric, seed: u64, value: f64) -> Result<()> {
        let (lo, hi) = metric.range();
        if !(value >= lo && value <= hi) {
            return Err(Error::Numerical(format!("{method} {metric} = {value} outside [{lo}, {hi}]")));
        }
        self.rows.push(ResultRow { sweep, method: method.to_string(), metric, seed, value });
        Ok(())
    }

    /// Orders rows by method, sweep value, metric and seed so the output
    /// does not depend on the order seeds finished in.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            a.method
                .cmp(&b.method)
                .then(a.sweep.total_cmp(&b.sweep))
                .then(a.metric.cmp(&b.metric))
                .then(a.seed.cmp(&b.seed))
        });
    }

    pub fn methods(&self) -> Vec<String> {
        let mut m: Vec<String> = self.rows.iter().map(|r| r.method.clone()).collect();
        m.sort();
        m.dedup();
        m
    }

    pub fn values(&self, method: &str, metric: Metric, sweep: f64) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.method == method && r.metric == metric && r.sweep == sweep)
            .map(|r| r.value)
            .collect()
    }

    /// Median over seeds, `None` without rows.
    pub fn median(&self, method: &str, metric: Metric, sweep: f64) -> Option<f64> {
        median(&self.values(method, metric, sweep))
    }

    /// CSV of the rows of `method` (all of them when `None`), sorted.
    pub fn to_csv(&self, method: Option<&str>) -> String {
        let mut t = self.clone();
        t.sort();
        let mut out = format!("#schema={RESULTS_SCHEMA} sweep={}\nsweep,method,metric,seed,value\n", self.sweep_name);
        for r in t.rows.iter().filter(|r| method.is_none_or(|m| r.method == m)) {
            out.push_str(&format!("{},{},{},{},{}\n", r.sweep, r.method, r.metric, r.seed, r.value));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let head = lines.next().unwrap_or("");
        let rest = head
            .strip_prefix(&format!("#schema={RESULTS_SCHEMA} sweep="))
            .ok_or_else(|| Error::Config(format!("not a {RESULTS_SCHEMA} file")))?;
        if lines.next() != Some("sweep,method,metric,seed,value") {
            return Err(Error::Config("missing column header".into()));
        }
        let mut t = Self::new(rest);
        for (i, l) in lines.enumerate() {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Config(format!("row {}: '{l}'", i + 1));
            if f.len() != 5 {
                return Err(bad());
            }
            let metric = match f[2] {
                "accuracy" => Metric::Accuracy,
                "ber" => Metric::Ber,
                "d_hat" => Metric::DHat,
                "tv_bound" => Metric::TvBound,
                _ => return Err(bad()),
            };
            t.push(
                f[0].parse().map_err(|_| bad())?,
                f[1],
                metric,
                f[3].parse().map_err(|_| bad())?,
                f[4].parse().map_err(|_| bad())?,
            )?;
        }
        Ok(t)
    }
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}
