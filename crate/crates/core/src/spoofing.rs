//! Physical-layer spoofing detection from consecutive CFR differences.
//!
//! Bob holds a reference CFR from Alice and receives a new one. The
//! difference is zero-mean under the null (Alice again) and carries the
//! specular offset between the two transmitters under the alternative.

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};

use crate::channel_cfr::{
    diff_cov_h0, diff_cov_h1, kron_expand, noise_vector, specular_mean, CfrDims, CfrSample, DiffuseNoiseParams,
    SimilarityParam, SpecularParams, TapState, TapTransform,
};
use crate::error::{Error, Result};
use crate::estimator_cfr::{alternating_estimate, EstimationReport, EstimatorOptions, Hypothesis, SimilarityTask};
use crate::hyphylearn::{ClassSampler, Classifier, HybridProblem, LabeledDataset, Origin};
use crate::linalg::{complex_normal, sample_covariance, FactoredCov, C64};

/// Statistical description of one transmitter's link to Bob. Specular
/// paths are redrawn at every coherence boundary from this prior.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartyModel {
    pub diffuse: DiffuseNoiseParams,
    pub similarity: SimilarityParam,
    pub n_paths: usize,
    /// Ratio of specular to diffuse power, in dB.
    pub k_factor_db: f64,
}

impl PartyModel {
    pub fn alice() -> Self {
        Self {
            diffuse: DiffuseNoiseParams { alpha2: 200.0, beta: 0.02, l_taps: 20, sigma2: 20.0 },
            similarity: SimilarityParam(0.85),
            n_paths: 4,
            k_factor_db: -10.0,
        }
    }

    pub fn eve() -> Self {
        Self {
            diffuse: DiffuseNoiseParams { alpha2: 250.0, beta: 0.08, l_taps: 16, sigma2: 26.0 },
            similarity: SimilarityParam(0.65),
            n_paths: 4,
            k_factor_db: -10.0,
        }
    }

    /// Angles and delays uniform on `[-pi, pi)`; gains
    /// `CN(0, P)` with `K P / (n_tx n_rx) = 10^{k/10} alpha2` so the mean
    /// CFR carries the stated fraction of diffuse power per entry.
    pub fn draw_specular<R: Rng + ?Sized>(&self, dims: &CfrDims, rng: &mut R) -> Result<SpecularParams> {
        if self.n_paths == 0 {
            return Err(Error::InvalidParameter("party needs at least one specular path".into()));
        }
        let k = self.n_paths;
        let power = 10f64.powf(self.k_factor_db / 10.0) * self.diffuse.alpha2 * (dims.n_tx * dims.n_rx) as f64 / k as f64;
        let mut u = || rng.random_range(-PI..PI);
        let psi_t = (0..k).map(|_| u()).collect();
        let psi_r = (0..k).map(|_| u()).collect();
        let tau = (0..k).map(|_| u()).collect();
        let rho = (0..k).map(|_| complex_normal(rng) * power.sqrt()).collect();
        SpecularParams::new(psi_t, psi_r, tau, rho)
    }

    pub fn with_specular(&self, specular: SpecularParams) -> ChannelParams {
        ChannelParams { specular, diffuse: self.diffuse, similarity: self.similarity }
    }
}

/// Full parameter set of one link within a coherence time.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelParams {
    pub specular: SpecularParams,
    pub diffuse: DiffuseNoiseParams,
    pub similarity: SimilarityParam,
}

/// Gaussian likelihoods of the CFR difference under both hypotheses.
#[derive(Clone, Debug)]
pub struct HypothesisModels {
    pub mean_h0: DVector<C64>,
    pub cov_h0: DMatrix<C64>,
    pub mean_h1: DVector<C64>,
    pub cov_h1: DMatrix<C64>,
    fact_h0: FactoredCov,
    fact_h1: FactoredCov,
}

impl HypothesisModels {
    pub fn new(mean_h0: DVector<C64>, cov_h0: DMatrix<C64>, mean_h1: DVector<C64>, cov_h1: DMatrix<C64>) -> Result<Self> {
        let m = mean_h0.len();
        if mean_h1.len() != m || cov_h0.shape() != (m, m) || cov_h1.shape() != (m, m) {
            return Err(Error::Dimension(format!("hypothesis models of mixed sizes around m = {m}")));
        }
        let fact_h0 = FactoredCov::from_dense(&cov_h0).map_err(|e| e.context("null covariance"))?;
        let fact_h1 = FactoredCov::from_dense(&cov_h1).map_err(|e| e.context("alternative covariance"))?;
        Ok(Self { mean_h0, cov_h0, mean_h1, cov_h1, fact_h0, fact_h1 })
    }

    pub fn dim(&self) -> usize {
        self.mean_h0.len()
    }

    /// `log p(d | H1) - log p(d | H0)`; the `-m ln pi` terms cancel.
    pub fn log_ratio(&self, d: &DVector<C64>) -> Result<f64> {
        if d.len() != self.dim() {
            return Err(Error::Dimension(format!("difference of length {} for m = {}", d.len(), self.dim())));
        }
        let q1 = self.fact_h1.quad_form(&(d - &self.mean_h1))?;
        let q0 = self.fact_h0.quad_form(&(d - &self.mean_h0))?;
        Ok(-(self.fact_h1.logdet() + q1) + (self.fact_h0.logdet() + q0))
    }

    /// One draw of the CFR difference under hypothesis `class`.
    pub fn sample<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> DVector<C64> {
        if class == 0 {
            &self.mean_h0 + self.fact_h0.sample(rng)
        } else {
            &self.mean_h1 + self.fact_h1.sample(rng)
        }
    }
}

/// 0 (Alice) iff `||h - h_ref||^2 < eta`; ties go to 1.
pub fn heuristic_label(h: &DVector<C64>, h_ref: &DVector<C64>, eta: f64) -> Result<usize> {
    if h.len() != h_ref.len() {
        return Err(Error::Dimension(format!("CFRs of lengths {} and {}", h.len(), h_ref.len())));
    }
    Ok(usize::from((h - h_ref).norm_squared() >= eta))
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn choose_threshold(distances: &[f64], quantile: f64) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::EmptyInput("no reference distances".into()));
    }
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::InvalidParameter(format!("quantile {quantile} outside (0, 1)")));
    }
    let mut d = distances.to_vec();
    d.sort_by(f64::total_cmp);
    let pos = quantile * (d.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(d[lo] + (pos - lo as f64) * (d[hi] - d[lo]))
}

/// Null: `CN(0, I (x) R_{q,H0} + 2 sigma_A^2 I)`; alternative:
/// `CN(hbar_E - hbar_A, I (x) R_{q,H1} + (sigma_A^2 + sigma_E^2) I)`.
pub fn assemble_hypothesis_models(pa: &ChannelParams, pe: &ChannelParams, dims: &CfrDims) -> Result<HypothesisModels> {
    let n_f = dims.n_f;
    let c0 = diff_cov_h0(&pa.diffuse, pa.similarity, n_f).with_diagonal(2.0 * pa.diffuse.sigma2);
    let c1 = diff_cov_h1(&pa.diffuse, &pe.diffuse, pe.similarity, n_f).with_diagonal(pa.diffuse.sigma2 + pe.diffuse.sigma2);
    let mean_h1 = specular_mean(&pe.specular, dims)? - specular_mean(&pa.specular, dims)?;
    HypothesisModels::new(DVector::zeros(dims.m()), kron_expand(&c0, dims)?, mean_h1, kron_expand(&c1, dims)?)
}

/// Log-ratio margins this close to the threshold count as ties. Identical
/// models assembled through different covariance formulas differ by
/// rounding only.
pub const LRT_TIE_TOLERANCE: f64 = 1e-9;

/// Decides 1 iff the log-likelihood ratio exceeds `ln threshold`; ties go
/// to 0.
pub fn lrt_classify(h_diff: &DVector<C64>, models: &HypothesisModels, threshold: f64) -> Result<usize> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidParameter(format!("LRT threshold {threshold} must be positive")));
    }
    Ok(usize::from(models.log_ratio(h_diff)? - threshold.ln() > LRT_TIE_TOLERANCE))
}

/// `(1 - alpha) C + alpha (tr C / m) I`.
pub fn shrink_cov(cov_hat: &DMatrix<C64>, alpha: f64) -> Result<DMatrix<C64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!("shrinkage {alpha} outside [0, 1]")));
    }
    if !cov_hat.is_square() || cov_hat.nrows() == 0 {
        return Err(Error::Dimension(format!("covariance of shape {:?}", cov_hat.shape())));
    }
    let m = cov_hat.nrows();
    let target = cov_hat.trace() / C64::new(m as f64, 0.0);
    let mut out = cov_hat * C64::new(1.0 - alpha, 0.0);
    for i in 0..m {
        out[(i, i)] += target * alpha;
    }
    Ok(out)
}

/// Data-only models: zero mean and shrunk sample covariance for the null,
/// sample mean and shrunk sample covariance for the alternative.
pub fn sample_models(diffs_h0: &[DVector<C64>], diffs_h1: &[DVector<C64>], alpha: f64) -> Result<HypothesisModels> {
    if diffs_h0.is_empty() || diffs_h1.is_empty() {
        return Err(Error::EmptyInput("each hypothesis needs at least one difference".into()));
    }
    let m = diffs_h0[0].len();
    let zero = DVector::zeros(m);
    let scatter0 = sample_covariance(diffs_h0)?;
    let mean1 = diffs_h1.iter().fold(DVector::zeros(m), |a, d| a + d) / C64::new(diffs_h1.len() as f64, 0.0);
    let centred: Vec<_> = diffs_h1.iter().map(|d| d - &mean1).collect();
    let scatter1 = sample_covariance(&centred)?;
    HypothesisModels::new(zero, shrink_cov(&scatter0, alpha)?, mean1, shrink_cov(&scatter1, alpha)?)
}

/// Training-stage layout: `n_coherence_alice` Alice coherence times, each
/// split into `coherence_ratio` Eve slots, with `samples_per_coherence`
/// snapshot pairs per Alice coherence time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnapshotScenario {
    pub n_coherence_alice: usize,
    pub coherence_ratio: f64,
    pub samples_per_coherence: usize,
    /// Probability that Eve transmits in a given Eve slot. While active,
    /// each incoming message in the slot is Eve's with probability 1/2.
    pub eve_activity: f64,
    /// Test pairs, split evenly over coherence times, classes balanced.
    pub n_test: usize,
    /// Known-Alice pairs per coherence time used to set the labeling
    /// threshold.
    pub n_calibration: usize,
    pub labeling_quantile: f64,
}

impl SnapshotScenario {
    /// One long coherence time with Eve always around.
    pub fn single(samples: usize, n_test: usize) -> Self {
        Self {
            n_coherence_alice: 1,
            coherence_ratio: 1.0,
            samples_per_coherence: samples,
            eve_activity: 1.0,
            n_test,
            n_calibration: 1000,
            labeling_quantile: 0.95,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_coherence_alice == 0 || self.samples_per_coherence == 0 || self.n_calibration == 0 {
            return Err(Error::InvalidParameter(format!("scenario counts must be positive: {self:?}")));
        }
        if !(self.coherence_ratio >= 1.0) {
            return Err(Error::InvalidParameter(format!("coherence ratio {} below 1", self.coherence_ratio)));
        }
        if !(0.0..=1.0).contains(&self.eve_activity) {
            return Err(Error::InvalidParameter(format!("Eve activity {} outside [0, 1]", self.eve_activity)));
        }
        if !(self.labeling_quantile > 0.0 && self.labeling_quantile < 1.0) {
            return Err(Error::InvalidParameter(format!("labeling quantile {}", self.labeling_quantile)));
        }
        Ok(())
    }

    pub fn eve_slots(&self) -> usize {
        self.coherence_ratio.round().max(1.0) as usize
    }
}

/// A reference CFR from Alice and the next incoming CFR.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotPair {
    pub reference: DVector<C64>,
    pub incoming: DVector<C64>,
    pub label_true: usize,
    pub label_heuristic: usize,
    pub snapshot_index: usize,
    pub coherence: usize,
    /// Eve slot within the coherence time.
    pub slot: usize,
}

impl SnapshotPair {
    pub fn difference(&self) -> DVector<C64> {
        &self.incoming - &self.reference
    }
}

/// Parameters in force during one Alice coherence time.
#[derive(Clone, Debug, PartialEq)]
pub struct CoherenceTruth {
    pub alice: ChannelParams,
    pub eve_slots: Vec<ChannelParams>,
    pub eve_active: Vec<bool>,
    pub threshold: f64,
}

#[derive(Clone, Debug)]
pub struct ScenarioOutput {
    pub train: Vec<SnapshotPair>,
    pub test: Vec<SnapshotPair>,
    pub truth: Vec<CoherenceTruth>,
}

/// Draws one snapshot pair. The reference comes from a fresh stationary
/// Alice state; the incoming CFR is Alice's next AR-1 step or Eve's
/// correlated draw.
fn draw_pair<R: Rng + ?Sized>(
    alice: &ChannelParams,
    eve: &ChannelParams,
    from_eve: bool,
    dims: &CfrDims,
    tt: &TapTransform,
    means: (&DVector<C64>, &DVector<C64>),
    rng: &mut R,
) -> (DVector<C64>, DVector<C64>) {
    let m = dims.m();
    let s0 = TapState::stationary(&alice.diffuse, dims.n_blocks(), rng);
    let reference = means.0 + tt.apply(&s0) + noise_vector(m, alice.diffuse.sigma2, rng);
    let incoming = if from_eve {
        let s1 = s0.cross_evolve(&alice.diffuse, &eve.diffuse, eve.similarity, rng);
        means.1 + tt.apply(&s1) + noise_vector(m, eve.diffuse.sigma2, rng)
    } else {
        let s1 = s0.evolve(&alice.diffuse, alice.similarity, rng);
        means.0 + tt.apply(&s1) + noise_vector(m, alice.diffuse.sigma2, rng)
    };
    (reference, incoming)
}

/// Simulates the training stream and a held-out test set.
///
/// Each Alice coherence time draws fresh specular paths for Alice and for
/// every Eve slot, calibrates the labeling threshold on known Alice pairs,
/// then emits `samples_per_coherence` heuristically labeled pairs. Test
/// pairs reuse the same coherence times with balanced true classes.
pub fn simulate_scenario<R: Rng + ?Sized>(
    scn: &SnapshotScenario,
    alice: &PartyModel,
    eve: &PartyModel,
    dims: &CfrDims,
    rng: &mut R,
) -> Result<ScenarioOutput> {
    scn.validate()?;
    alice.diffuse.validate()?;
    eve.diffuse.validate()?;
    let tt = TapTransform::new(dims.n_f, alice.diffuse.l_taps.max(eve.diffuse.l_taps));
    let n_slots = scn.eve_slots();
    let mut truth = Vec::with_capacity(scn.n_coherence_alice);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..scn.n_coherence_alice {
        let pa = alice.with_specular(alice.draw_specular(dims, rng)?);
        let slots: Vec<ChannelParams> = (0..n_slots)
            .map(|_| Ok(eve.with_specular(eve.draw_specular(dims, rng)?)))
            .collect::<Result<_>>()?;
        let active: Vec<bool> = (0..n_slots).map(|_| rng.random::<f64>() < scn.eve_activity).collect();
        let mean_a = specular_mean(&pa.specular, dims)?;
        let means_e: Vec<DVector<C64>> = slots.iter().map(|p| specular_mean(&p.specular, dims)).collect::<Result<_>>()?;

        let calib: Vec<f64> = (0..scn.n_calibration)
            .map(|_| {
                let (r, i) = draw_pair(&pa, &slots[0], false, dims, &tt, (&mean_a, &means_e[0]), rng);
                (i - r).norm_squared()
            })
            .collect();
        let threshold = choose_threshold(&calib, scn.labeling_quantile)?;

        for u in 0..scn.samples_per_coherence {
            let slot = u * n_slots / scn.samples_per_coherence;
            let from_eve = active[slot] && rng.random::<bool>();
            let (reference, incoming) = draw_pair(&pa, &slots[slot], from_eve, dims, &tt, (&mean_a, &means_e[slot]), rng);
            let label_heuristic = heuristic_label(&incoming, &reference, threshold)?;
            train.push(SnapshotPair {
                reference,
                incoming,
                label_true: usize::from(from_eve),
                label_heuristic,
                snapshot_index: train.len(),
                coherence: c,
                slot,
            });
        }

        let n_test_c = scn.n_test / scn.n_coherence_alice + usize::from(c < scn.n_test % scn.n_coherence_alice);
        for j in 0..n_test_c {
            let from_eve = j % 2 == 1;
            let slot = rng.random_range(0..n_slots);
            let (reference, incoming) = draw_pair(&pa, &slots[slot], from_eve, dims, &tt, (&mean_a, &means_e[slot]), rng);
            let label_heuristic = heuristic_label(&incoming, &reference, threshold)?;
            test.push(SnapshotPair {
                reference,
                incoming,
                label_true: usize::from(from_eve),
                label_heuristic,
                snapshot_index: test.len(),
                coherence: c,
                slot,
            });
        }
        truth.push(CoherenceTruth { alice: pa, eve_slots: slots, eve_active: active, threshold });
    }
    Ok(ScenarioOutput { train, test, truth })
}

/// `[Re d; Im d]`.
pub fn complex_to_features(d: &DVector<C64>) -> Vec<f64> {
    d.iter().map(|z| z.re).chain(d.iter().map(|z| z.im)).collect()
}

/// Inverse of [`complex_to_features`].
pub fn features_to_complex(f: &[f64]) -> Result<DVector<C64>> {
    if f.len() % 2 != 0 {
        return Err(Error::Dimension(format!("odd feature length {}", f.len())));
    }
    let m = f.len() / 2;
    Ok(DVector::from_fn(m, |i, _| C64::new(f[i], f[m + i])))
}

/// Flat table of difference features with both label columns.
#[derive(Clone, Debug, PartialEq)]
pub struct SpoofingRows {
    pub label_true: Vec<usize>,
    pub label_heuristic: Vec<usize>,
    pub snapshot_index: Vec<usize>,
    /// `2m x n`, one difference per column.
    pub features: DMatrix<f64>,
}

impl SpoofingRows {
    pub fn from_pairs(pairs: &[SnapshotPair]) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| Error::EmptyInput("no snapshot pairs".into()))?;
        let d = 2 * first.reference.len();
        let mut features = DMatrix::zeros(d, pairs.len());
        for (j, p) in pairs.iter().enumerate() {
            let f = complex_to_features(&p.difference());
            if f.len() != d {
                return Err(Error::Dimension("snapshot pairs of mixed length".into()));
            }
            features.column_mut(j).copy_from_slice(&f);
        }
        Ok(Self {
            label_true: pairs.iter().map(|p| p.label_true).collect(),
            label_heuristic: pairs.iter().map(|p| p.label_heuristic).collect(),
            snapshot_index: pairs.iter().map(|p| p.snapshot_index).collect(),
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.label_true.len()
    }

    pub fn is_empty(&self) -> bool {
        self.label_true.is_empty()
    }

    /// Real-origin dataset labeled with either the heuristic or the true
    /// labels.
    pub fn dataset(&self, heuristic: bool) -> Result<LabeledDataset> {
        let labels = if heuristic { self.label_heuristic.clone() } else { self.label_true.clone() };
        LabeledDataset::new(self.features.clone(), labels, 2, Origin::Real)
    }

    /// `label_true,label_heuristic,snapshot_index,f_0,...` with shortest
    /// round-trip decimal formatting.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.features.nrows();
        let mut header = String::from("label_true,label_heuristic,snapshot_index");
        for i in 0..d {
            header.push_str(&format!(",f_{i}"));
        }
        writeln!(out, "{header}")?;
        for j in 0..self.len() {
            let mut line = format!("{},{},{}", self.label_true[j], self.label_heuristic[j], self.snapshot_index[j]);
            for v in self.features.column(j).iter() {
                line.push_str(&format!(",{v:?}"));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let bad = |msg: String| Error::Config(format!("spoofing CSV: {msg}"));
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| bad("missing header".into()))??;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[..3] != ["label_true", "label_heuristic", "snapshot_index"] {
            return Err(bad(format!("unexpected header `{header}`")));
        }
        let d = cols.len() - 3;
        let (mut lt, mut lh, mut si, mut vals) = (vec![], vec![], vec![], vec![]);
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != d + 3 {
                return Err(bad(format!("row {} has {} fields, expected {}", n + 1, f.len(), d + 3)));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("row {}: `{s}` is not an index", n + 1)));
            lt.push(int(f[0])?);
            lh.push(int(f[1])?);
            si.push(int(f[2])?);
            for s in &f[3..] {
                vals.push(s.parse::<f64>().map_err(|_| bad(format!("row {}: `{s}` is not a number", n + 1)))?);
            }
        }
        let n = lt.len();
        Ok(Self { label_true: lt, label_heuristic: lh, snapshot_index: si, features: DMatrix::from_vec(d, n, vals) })
    }
}

/// Parameters fitted from labeled training pairs.
#[derive(Clone, Debug)]
pub struct SpoofingEstimate {
    pub alice: ChannelParams,
    pub eve: ChannelParams,
    pub priors: [f64; 2],
    pub alice_report: EstimationReport,
    pub eve_report: EstimationReport,
}

/// Fits both links from pairs labeled by `labels` (usually heuristic).
///
/// Alice's parameters come from every reference CFR plus incoming CFRs
/// labeled 0, with `a^A` from the label-0 differences; Eve's from incoming
/// CFRs labeled 1, with `a^E` from the label-1 differences scored against
/// Alice's fitted diffuse model.
pub fn estimate_parameters(
    pairs: &[SnapshotPair],
    labels: &[usize],
    dims: &CfrDims,
    opts: &EstimatorOptions,
) -> Result<SpoofingEstimate> {
    if pairs.len() != labels.len() {
        return Err(Error::Dimension(format!("{} pairs with {} labels", pairs.len(), labels.len())));
    }
    let mut alice_cfrs = Vec::new();
    let mut eve_cfrs = Vec::new();
    let mut d0 = Vec::new();
    let mut d1 = Vec::new();
    for (p, &y) in pairs.iter().zip(labels) {
        alice_cfrs.push(CfrSample { h: p.reference.clone(), label: Some(0), snapshot_index: p.snapshot_index });
        if y == 0 {
            alice_cfrs.push(CfrSample { h: p.incoming.clone(), label: Some(0), snapshot_index: p.snapshot_index });
            d0.push(p.difference());
        } else {
            eve_cfrs.push(CfrSample { h: p.incoming.clone(), label: Some(1), snapshot_index: p.snapshot_index });
            d1.push(p.difference());
        }
    }
    if d0.is_empty() || d1.is_empty() {
        return Err(Error::EmptyInput("estimation needs pairs labeled under both hypotheses".into()));
    }
    let alice_report = alternating_estimate(
        &alice_cfrs,
        Some(SimilarityTask { diffs: &d0, hypothesis: Hypothesis::Null, reference: None }),
        dims,
        opts,
    )
    .map_err(|e| e.context("Alice parameters"))?;
    let eve_report = alternating_estimate(
        &eve_cfrs,
        Some(SimilarityTask { diffs: &d1, hypothesis: Hypothesis::Alternative, reference: Some(&alice_report.theta_vn_hat) }),
        dims,
        opts,
    )
    .map_err(|e| e.context("Eve parameters"))?;
    let n = labels.len() as f64;
    let p1 = d1.len() as f64 / n;
    Ok(SpoofingEstimate {
        alice: ChannelParams {
            specular: alice_report.theta_sp_hat.clone(),
            diffuse: alice_report.theta_vn_hat,
            similarity: alice_report.a_hat,
        },
        eve: ChannelParams {
            specular: eve_report.theta_sp_hat.clone(),
            diffuse: eve_report.theta_vn_hat,
            similarity: eve_report.a_hat,
        },
        priors: [1.0 - p1, p1],
        alice_report,
        eve_report,
    })
}

/// Fraction of pairs the LRT classifies correctly against true labels.
pub fn lrt_accuracy(pairs: &[SnapshotPair], models: &HypothesisModels, threshold: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no test pairs".into()));
    }
    let mut correct = 0usize;
    for p in pairs {
        if lrt_classify(&p.difference(), models, threshold)? == p.label_true {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

/// Plug-in Bayes rule: LRT with fitted models and threshold `pi_0 / pi_1`.
#[derive(Clone, Debug)]
pub struct LrtClassifier {
    pub models: HypothesisModels,
    pub threshold: f64,
}

impl Classifier for LrtClassifier {
    fn n_classes(&self) -> usize {
        2
    }

    fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<usize>> {
        x.column_iter()
            .map(|c| lrt_classify(&features_to_complex(c.as_slice())?, &self.models, self.threshold))
            .collect()
    }
}

/// Fitted parameters and the Gaussian difference models built from them.
#[derive(Clone, Debug)]
pub struct SpoofingFit {
    pub estimate: SpoofingEstimate,
    pub models: HypothesisModels,
}

impl SpoofingFit {
    pub fn plug_in(&self) -> Result<LrtClassifier> {
        let [p0, p1] = self.estimate.priors;
        if p0 <= 0.0 || p1 <= 0.0 {
            return Err(Error::InvalidParameter(format!("degenerate priors [{p0}, {p1}]")));
        }
        Ok(LrtClassifier { models: self.models.clone(), threshold: p0 / p1 })
    }
}

struct DifferenceSampler {
    models: Arc<HypothesisModels>,
    class: usize,
}

impl ClassSampler for DifferenceSampler {
    fn dim(&self) -> usize {
        2 * self.models.dim()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        complex_to_features(&self.models.sample(self.class, rng))
    }
}

/// Spoofing detection as a two-class problem over CFR differences. The
/// labeler is the energy threshold already applied to `pairs`; estimation
/// fits both links from the labeled pairs.
pub struct SpoofingProblem<'a> {
    pub pairs: &'a [SnapshotPair],
    pub dims: CfrDims,
    pub opts: EstimatorOptions,
}

impl HybridProblem for SpoofingProblem<'_> {
    type Estimate = SpoofingFit;

    fn n_classes(&self) -> usize {
        2
    }

    fn label(&self, raw: &DMatrix<f64>) -> Result<Vec<usize>> {
        if raw.ncols() != self.pairs.len() || raw.nrows() != 2 * self.dims.m() {
            return Err(Error::Dimension(format!(
                "{:?} raw rows for {} pairs of length {}",
                raw.shape(),
                self.pairs.len(),
                self.dims.m()
            )));
        }
        Ok(self.pairs.iter().map(|p| p.label_heuristic).collect())
    }

    fn estimate(&self, labeled: &LabeledDataset) -> Result<SpoofingFit> {
        let estimate = estimate_parameters(self.pairs, &labeled.labels, &self.dims, &self.opts)?;
        let models = assemble_hypothesis_models(&estimate.alice, &estimate.eve, &self.dims)?;
        Ok(SpoofingFit { estimate, models })
    }

    fn samplers(&self, fit: &SpoofingFit) -> Result<Vec<Box<dyn ClassSampler>>> {
        let models = Arc::new(fit.models.clone());
        Ok((0..2).map(|class| Box::new(DifferenceSampler { models: models.clone(), class }) as Box<dyn ClassSampler>).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_examples() {
        assert_eq!(choose_threshold(&[4.0, 4.0, 4.0], 0.3).unwrap(), 4.0);
        assert_eq!(choose_threshold(&[3.0, 1.0, 2.0], 0.5).unwrap(), 2.0);
        assert!(choose_threshold(&[], 0.5).is_err());
        assert!(choose_threshold(&[1.0], 1.0).is_err());
    }

    #[test]
    fn labeling_examples() {
        let h = DVector::from_element(3, C64::new(1.0, 2.0));
        assert_eq!(heuristic_label(&h, &h, 0.5).unwrap(), 0);
        let g = DVector::from_element(3, C64::new(1.0, 2.5));
        assert_eq!(heuristic_label(&g, &h, 0.0).unwrap(), 1);
        // Exactly on the threshold.
        assert_eq!(heuristic_label(&g, &h, 0.75).unwrap(), 1);
    }

    #[test]
    fn features_round_trip() {
        let d = DVector::from_vec(vec![C64::new(1.0, -1.0), C64::new(0.5, 2.0)]);
        let f = complex_to_features(&d);
        assert_eq!(f, vec![1.0, 0.5, -1.0, 2.0]);
        assert_eq!(features_to_complex(&f).unwrap(), d);
    }
}
