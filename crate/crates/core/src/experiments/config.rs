//! Line-oriented `key = value` experiment configuration.
//!
//! Every key is declared in [`SCHEMA`] with a type, a desk-scale default
//! and optionally a larger published-scale default. Unknown keys, repeated
//! keys and values that do not parse are errors.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ExperimentId {
    ToyGaussian,
    SpoofingAccuracy,
    SpoofingCoherence,
    CdmaBerVsSnr,
    CdmaBerVsData,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 5] =
        [Self::ToyGaussian, Self::SpoofingAccuracy, Self::SpoofingCoherence, Self::CdmaBerVsSnr, Self::CdmaBerVsData];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ToyGaussian => "toy-gaussian",
            Self::SpoofingAccuracy => "spoofing-accuracy",
            Self::SpoofingCoherence => "spoofing-coherence",
            Self::CdmaBerVsSnr => "cdma-ber-vs-snr",
            Self::CdmaBerVsData => "cdma-ber-vs-data",
        }
    }

    /// Key prefix of the section this experiment reads.
    pub fn section(self) -> &'static str {
        match self {
            Self::ToyGaussian => "toy.",
            Self::SpoofingAccuracy | Self::SpoofingCoherence => "spoofing.",
            Self::CdmaBerVsSnr | Self::CdmaBerVsData => "cdma.",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Bool,
    Choice(&'static [&'static str]),
    IntList,
    FloatList,
    Path,
}

impl Kind {
    fn name(self) -> String {
        match self {
            Kind::Int => "int".into(),
            Kind::Float => "float".into(),
            Kind::Bool => "bool".into(),
            Kind::Choice(opts) => opts.join("|"),
            Kind::IntList => "int list".into(),
            Kind::FloatList => "float list".into(),
            Kind::Path => "path".into(),
        }
    }

    /// Checks a raw value against this kind, with a message on failure.
    pub fn check(self, v: &str) -> std::result::Result<(), String> {
        let ints = |s: &str| s.split(',').map(|t| t.trim().parse::<u64>().map(|_| ())).collect::<std::result::Result<Vec<_>, _>>();
        let floats = |s: &str| {
            s.split(',')
                .map(|t| match t.trim().parse::<f64>() {
                    Ok(x) if x.is_nan() => Err(()),
                    Ok(_) => Ok(()),
                    Err(_) => Err(()),
                })
                .collect::<std::result::Result<Vec<_>, _>>()
        };
        let ok = match self {
            Kind::Int => v.parse::<u64>().is_ok(),
            Kind::Float => floats(v).map(|l| l.len() == 1).unwrap_or(false),
            Kind::Bool => v == "true" || v == "false",
            Kind::Choice(opts) => opts.contains(&v),
            Kind::IntList => ints(v).is_ok(),
            Kind::FloatList => floats(v).is_ok(),
            Kind::Path => !v.is_empty(),
        };
        if ok {
            Ok(())
        } else {
            Err(format!("expected {}, got '{v}'", self.name()))
        }
    }
}

pub struct KeySpec {
    pub key: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    /// Default under `paper_scale = true`, when it differs.
    pub paper: Option<&'static str>,
    pub doc: &'static str,
}

const fn key(key: &'static str, kind: Kind, default: &'static str, doc: &'static str) -> KeySpec {
    KeySpec { key, kind, default, paper: None, doc }
}

const fn scaled(key: &'static str, kind: Kind, default: &'static str, paper: &'static str, doc: &'static str) -> KeySpec {
    KeySpec { key, kind, default, paper: Some(paper), doc }
}

const EXPERIMENTS: &[&str] = &["toy-gaussian", "spoofing-accuracy", "spoofing-coherence", "cdma-ber-vs-snr", "cdma-ber-vs-data"];

use Kind::*;

pub static SCHEMA: &[KeySpec] = &[
    key("experiment", Choice(EXPERIMENTS), "", "experiment to run (required)"),
    key("seeds", IntList, "1,2,3,4,5", "one full run per seed"),
    key("output_dir", Path, "results", "directory for CSVs and the manifest"),
    key("paper_scale", Bool, "false", "use the published sample counts and network sizes for unset keys"),
    // Two-class Gaussian toy.
    key("toy.mu0", FloatList, "2.9,4.4", "true mean of class 0"),
    key("toy.mu1", FloatList, "5,6.4", "true mean of class 1"),
    key("toy.mu0_hat", FloatList, "2,3", "estimated mean of class 0"),
    key("toy.mu1_hat", FloatList, "4,5", "estimated mean of class 1"),
    key("toy.sigma", FloatList, "0.15,0.11,0.11,0.15", "shared covariance, row-major 2x2"),
    key("toy.n_real", Int, "40", "real training rows"),
    key("toy.n_synthetic", Int, "2000", "synthetic rows"),
    key("toy.n_test", Int, "10000", "fresh true-distribution test rows"),
    key("toy.n_plot", Int, "500", "rows per domain written to the mapped-sample CSV"),
    key("toy.width", Int, "20", "hidden width of the linear networks"),
    key("toy.steps", Int, "4000", "adversarial training steps"),
    key("toy.batch_size", Int, "32", "mini-batch size per domain"),
    key("toy.lr", Float, "0.001", "Adam learning rate of all three networks"),
    // Spoofing detection.
    key("spoofing.n_tx", Int, "2", "transmit antennas"),
    key("spoofing.n_rx", Int, "2", "receive antennas"),
    key("spoofing.n_f", Int, "20", "subcarriers"),
    key("spoofing.alice.alpha2", Float, "200", "Alice diffuse power"),
    key("spoofing.alice.beta", Float, "0.02", "Alice normalized coherence bandwidth"),
    key("spoofing.alice.l_taps", Int, "20", "Alice diffuse taps"),
    key("spoofing.alice.sigma2", Float, "20", "Alice noise variance"),
    key("spoofing.alice.similarity", Float, "0.85", "Alice AR-1 coefficient"),
    key("spoofing.alice.n_paths", Int, "4", "Alice specular paths"),
    key("spoofing.alice.k_factor_db", Float, "-10", "Alice specular-to-diffuse power, dB"),
    key("spoofing.eve.alpha2", Float, "250", "Eve diffuse power"),
    key("spoofing.eve.beta", Float, "0.08", "Eve normalized coherence bandwidth"),
    key("spoofing.eve.l_taps", Int, "16", "Eve diffuse taps"),
    key("spoofing.eve.sigma2", Float, "26", "Eve noise variance"),
    key("spoofing.eve.similarity", Float, "0.65", "Eve AR-1 coefficient"),
    key("spoofing.eve.n_paths", Int, "4", "Eve specular paths"),
    key("spoofing.eve.k_factor_db", Float, "-10", "Eve specular-to-diffuse power, dB"),
    key("spoofing.n_train", IntList, "4000", "training snapshots (spoofing-accuracy sweep)"),
    scaled("spoofing.n_test", Int, "4000", "200000", "balanced test pairs per run"),
    key("spoofing.n_calibration", Int, "1000", "known-Alice pairs per coherence time for the labeling threshold"),
    key("spoofing.labeling_quantile", Float, "0.95", "quantile of calibration distances used as threshold"),
    scaled("spoofing.n_synthetic", Int, "40000", "400000", "synthetic rows for HyPhyLearn (spoofing-accuracy)"),
    scaled("spoofing.finetune.n_synthetic", Int, "40000", "500000", "synthetic rows for the fine-tuning baseline"),
    scaled("spoofing.steps", Int, "3000", "20000", "adversarial training steps"),
    key("spoofing.batch_size", Int, "128", "mini-batch size per domain (capped at the real row count)"),
    scaled("spoofing.lr", Float, "0.001", "0.0001", "Adam learning rate"),
    key("spoofing.z_dim", Int, "64", "feature-space dimension"),
    scaled("spoofing.mapper_hidden", IntList, "128", "400,400,400", "mapper hidden widths"),
    scaled("spoofing.head_hidden", IntList, "64", "400,400,400", "classifier hidden widths"),
    key("spoofing.disc_hidden", IntList, "40", "discriminator hidden widths"),
    scaled("spoofing.finetune.hidden", IntList, "128,64", "400,400,400", "fine-tuning network hidden widths"),
    scaled("spoofing.finetune.pretrain_steps", Int, "3000", "20000", "fine-tuning pre-training steps on synthetic rows"),
    scaled("spoofing.finetune.steps", Int, "300", "2000", "fine-tuning steps on the heuristic-labeled rows"),
    key("spoofing.coherence.n_c", IntList, "2,4,8", "Alice coherence times in training (spoofing-coherence sweep)"),
    key("spoofing.coherence.samples", Int, "100", "training snapshots per Alice coherence time"),
    key("spoofing.coherence.ratio", Float, "4", "Alice coherence time over Eve's"),
    key("spoofing.coherence.eve_activity", Float, "0.5", "probability Eve transmits in one of her coherence times"),
    scaled("spoofing.coherence.synthetic_per_class", Int, "2000", "20000", "synthetic rows per class and coherence time"),
    // Multi-user detection.
    key("cdma.k_users", Int, "3", "users"),
    key("cdma.n_gain", Int, "32", "chips per bit"),
    key("cdma.l_paths", Int, "3", "multipath components per user"),
    key("cdma.nfr_db", Float, "10", "near-far ratio: total amplitude spread, dB"),
    key("cdma.rolloff", Float, "0.22", "raised-cosine roll-off"),
    key("cdma.max_delay_spread_chips", Float, "6", "largest path delay after the first, chips"),
    key("cdma.codes", Choice(&["gold", "random"]), "gold", "spreading code family"),
    key("cdma.rho", Float, "0.2", "probability that a chip known to the receiver is flipped"),
    key("cdma.hyphylearn", Bool, "true", "train HyPhyLearn (false runs the MMSE detectors only)"),
    key("cdma.pulse_model", Choice(&["paths", "ls"]), "paths", "pulses behind the synthetic windows"),
    key("cdma.snr_db", FloatList, "0,2,4,6,8,10,12", "SNR points (cdma-ber-vs-snr sweep)"),
    key("cdma.snr_fixed_db", Float, "8", "SNR of the cdma-ber-vs-data sweep"),
    key("cdma.n_train", Int, "40", "training frames with known bits (cdma-ber-vs-snr)"),
    key("cdma.n_train_sweep", IntList, "20,40,80,160", "training frames (cdma-ber-vs-data sweep)"),
    scaled("cdma.n_test", Int, "3500", "20000", "test frames per point"),
    scaled("cdma.n_synthetic", Int, "20000", "1000000", "synthetic windows"),
    scaled("cdma.steps", Int, "3000", "20000", "adversarial training steps"),
    key("cdma.batch_size", Int, "32", "mini-batch size per domain (capped at the real row count)"),
    scaled("cdma.lr", Float, "0.001", "0.0001", "Adam learning rate"),
    key("cdma.z_dim", Int, "64", "feature-space dimension"),
    scaled("cdma.mapper_hidden", IntList, "128,128", "300,300,300,300", "mapper hidden widths"),
    scaled("cdma.head_hidden", IntList, "128", "300,300,300,300", "classifier hidden widths"),
    key("cdma.disc_hidden", IntList, "40", "discriminator hidden widths"),
];

fn spec(key: &str) -> Option<&'static KeySpec> {
    SCHEMA.iter().find(|s| s.key == key)
}

/// Parsed configuration: the explicit assignments plus the scale flag;
/// defaults fill everything else on access.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    explicit: BTreeMap<&'static str, String>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut explicit = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| Error::Config(format!("line {}: {m}", no + 1));
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected 'key = value', got '{line}'")))?;
            let (k, v) = (k.trim(), v.trim());
            let s = spec(k).ok_or_else(|| err(format!("unknown key '{k}'")))?;
            s.kind.check(v).map_err(|m| err(format!("{k}: {m}")))?;
            if explicit.insert(s.key, v.to_string()).is_some() {
                return Err(err(format!("key '{k}' given twice")));
            }
        }
        let id = explicit.get("experiment").ok_or_else(|| Error::Config("missing key 'experiment'".into()))?;
        let cfg = Self { experiment: id.parse()?, explicit };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.explicit.insert("seeds", seed.to_string());
        self
    }

    pub fn with_output_dir(mut self, dir: &str) -> Self {
        self.explicit.insert("output_dir", dir.to_string());
        self
    }

    pub fn with_paper_scale(mut self) -> Self {
        self.explicit.insert("paper_scale", "true".into());
        self
    }

    /// Overrides one key, checking it against the schema.
    pub fn set(&mut self, k: &str, v: &str) -> Result<()> {
        let s = spec(k).ok_or_else(|| Error::Config(format!("unknown key '{k}'")))?;
        s.kind.check(v).map_err(|m| Error::Config(format!("{k}: {m}")))?;
        if k == "experiment" {
            self.experiment = v.parse()?;
        }
        self.explicit.insert(s.key, v.to_string());
        Ok(())
    }

    fn raw(&self, k: &str) -> Result<&str> {
        let s = spec(k).ok_or_else(|| Error::Config(format!("unknown key '{k}'")))?;
        if let Some(v) = self.explicit.get(s.key) {
            return Ok(v);
        }
        let paper = s.key != "paper_scale" && self.paper_scale();
        Ok(match (paper, s.paper) {
            (true, Some(p)) => p,
            _ => s.default,
        })
    }

    pub fn paper_scale(&self) -> bool {
        self.explicit.get("paper_scale").is_some_and(|v| v == "true")
    }

    pub fn text(&self, k: &str) -> Result<String> {
        self.raw(k).map(str::to_string)
    }

    pub fn usize(&self, k: &str) -> Result<usize> {
        self.raw(k)?.parse().map_err(|_| Error::Config(format!("{k} is not an integer")))
    }

    pub fn f64(&self, k: &str) -> Result<f64> {
        self.raw(k)?.parse().map_err(|_| Error::Config(format!("{k} is not a number")))
    }

    pub fn usizes(&self, k: &str) -> Result<Vec<usize>> {
        self.raw(k)?
            .split(',')
            .map(|t| t.trim().parse().map_err(|_| Error::Config(format!("{k} is not an integer list"))))
            .collect()
    }

    pub fn f64s(&self, k: &str) -> Result<Vec<f64>> {
        self.raw(k)?
            .split(',')
            .map(|t| t.trim().parse().map_err(|_| Error::Config(format!("{k} is not a number list"))))
            .collect()
    }

    pub fn seeds(&self) -> Result<Vec<u64>> {
        let seeds: Vec<u64> = self
            .raw("seeds")?
            .split(',')
            .map(|t| t.trim().parse().map_err(|_| Error::Config("seeds is not an integer list".into())))
            .collect::<Result<_>>()?;
        let mut uniq = seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != seeds.len() {
            return Err(Error::Config("seeds repeat".into()));
        }
        Ok(seeds)
    }

    pub fn output_dir(&self) -> Result<String> {
        self.text("output_dir")
    }

    /// Checks the cross-key constraints of the selected experiment.
    pub fn validate(&self) -> Result<()> {
        if self.seeds()?.is_empty() {
            return Err(Error::Config("no seeds".into()));
        }
        let section = self.experiment.section();
        for (k, _) in self.explicit.iter() {
            let foreign = ["toy.", "spoofing.", "cdma."].iter().any(|p| k.starts_with(p) && *p != section);
            if foreign {
                return Err(Error::Config(format!("key '{k}' does not apply to {}", self.experiment)));
            }
        }
        let positive = |k: &str| -> Result<()> {
            if self.usize(k)? == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
            Ok(())
        };
        let positive_list = |k: &str| -> Result<()> {
            if self.usizes(k)?.contains(&0) {
                return Err(Error::Config(format!("{k} entries must be positive")));
            }
            Ok(())
        };
        match self.experiment {
            ExperimentId::ToyGaussian => {
                for k in ["toy.n_real", "toy.n_synthetic", "toy.n_test", "toy.width", "toy.steps", "toy.batch_size"] {
                    positive(k)?;
                }
                for k in ["toy.mu0", "toy.mu1", "toy.mu0_hat", "toy.mu1_hat"] {
                    if self.f64s(k)?.len() != 2 {
                        return Err(Error::Config(format!("{k} needs two entries")));
                    }
                }
                if self.f64s("toy.sigma")?.len() != 4 {
                    return Err(Error::Config("toy.sigma needs four entries".into()));
                }
            }
            ExperimentId::SpoofingAccuracy | ExperimentId::SpoofingCoherence => {
                for k in [
                    "spoofing.n_tx",
                    "spoofing.n_rx",
                    "spoofing.n_f",
                    "spoofing.n_test",
                    "spoofing.n_calibration",
                    "spoofing.n_synthetic",
                    "spoofing.finetune.n_synthetic",
                    "spoofing.steps",
                    "spoofing.batch_size",
                    "spoofing.z_dim",
                    "spoofing.finetune.pretrain_steps",
                    "spoofing.coherence.samples",
                    "spoofing.coherence.synthetic_per_class",
                ] {
                    positive(k)?;
                }
                for k in ["spoofing.n_train", "spoofing.coherence.n_c", "spoofing.mapper_hidden", "spoofing.head_hidden", "spoofing.disc_hidden", "spoofing.finetune.hidden"] {
                    positive_list(k)?;
                }
                let q = self.f64("spoofing.labeling_quantile")?;
                if !(q > 0.0 && q < 1.0) {
                    return Err(Error::Config(format!("spoofing.labeling_quantile {q} outside (0, 1)")));
                }
                for p in ["alice", "eve"] {
                    let a = self.f64(&format!("spoofing.{p}.similarity"))?;
                    if !(0.0..=1.0).contains(&a) {
                        return Err(Error::Config(format!("spoofing.{p}.similarity {a} outside [0, 1]")));
                    }
                }
                let act = self.f64("spoofing.coherence.eve_activity")?;
                if !(0.0..=1.0).contains(&act) {
                    return Err(Error::Config(format!("spoofing.coherence.eve_activity {act} outside [0, 1]")));
                }
                if self.f64("spoofing.coherence.ratio")? < 1.0 {
                    return Err(Error::Config("spoofing.coherence.ratio below 1".into()));
                }
            }
            ExperimentId::CdmaBerVsSnr | ExperimentId::CdmaBerVsData => {
                for k in ["cdma.k_users", "cdma.n_gain", "cdma.l_paths", "cdma.n_train", "cdma.n_test", "cdma.n_synthetic", "cdma.steps", "cdma.batch_size", "cdma.z_dim"] {
                    positive(k)?;
                }
                for k in ["cdma.n_train_sweep", "cdma.mapper_hidden", "cdma.head_hidden", "cdma.disc_hidden"] {
                    positive_list(k)?;
                }
                if self.usize("cdma.k_users")? > 10 {
                    return Err(Error::Config("cdma.k_users above 10 gives too many classes".into()));
                }
                let rho = self.f64("cdma.rho")?;
                if !(0.0..=1.0).contains(&rho) {
                    return Err(Error::Config(format!("cdma.rho {rho} outside [0, 1]")));
                }
                if self.usize("cdma.n_test")? < 4 {
                    return Err(Error::Config("cdma.n_test needs at least 4 frames".into()));
                }
            }
        }
        Ok(())
    }

    /// Every key the experiment reads, resolved, in schema order. Parsing
    /// the result gives back an equivalent configuration.
    pub fn resolved(&self) -> Result<String> {
        let section = self.experiment.section();
        let mut out = String::new();
        for s in SCHEMA {
            let common = !s.key.contains('.');
            if common || s.key.starts_with(section) {
                out.push_str(&format!("{} = {}\n", s.key, self.text(s.key)?));
            }
        }
        Ok(out)
    }
}

/// Human-readable listing of every key.
pub fn schema_text() -> String {
    let mut out = String::new();
    for s in SCHEMA {
        let kind = s.kind.name();
        let def = if s.default.is_empty() { "(required)".to_string() } else { s.default.to_string() };
        out.push_str(&format!("{} : {} = {}", s.key, kind, def));
        if let Some(p) = s.paper {
            out.push_str(&format!(" [paper scale: {p}]"));
        }
        out.push_str(&format!("\n    {}\n", s.doc));
    }
    out
}
