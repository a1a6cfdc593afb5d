//! Generative model for measured MIMO-OFDM channel frequency responses.
//!
//! A CFR is the sum of a deterministic specular part (a few dominant paths
//! described by departure/arrival phase slopes, a delay and a complex gain),
//! a diffuse part drawn from an exponentially decaying tapped delay line,
//! and white measurement noise. Diffuse taps evolve in time through an AR-1
//! recursion whose coefficient is the similarity parameter.
//!
//! Vectors are stacked antenna-pair major with the subcarrier index running
//! fastest: entry `(t * n_rx + r) * n_f + n` holds transmit antenna `t`,
//! receive antenna `r`, subcarrier `n`. With that ordering every covariance
//! in this module is `I_{n_rx} ⊗ I_{n_tx} ⊗ T` for a Hermitian Toeplitz `T`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{complex_normal, toeplitz_hermitian, FactoredCov, C64};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CfrDims {
    pub n_tx: usize,
    pub n_rx: usize,
    pub n_f: usize,
}

impl CfrDims {
    pub fn new(n_tx: usize, n_rx: usize, n_f: usize) -> Result<Self> {
        if n_tx == 0 || n_rx == 0 || n_f == 0 {
            return Err(Error::InvalidParameter(format!(
                "CFR dimensions must be positive, got {n_tx}x{n_rx}x{n_f}"
            )));
        }
        Ok(Self { n_tx, n_rx, n_f })
    }

    /// Total CFR length `n_tx * n_rx * n_f`.
    pub fn m(&self) -> usize {
        self.n_tx * self.n_rx * self.n_f
    }

    /// Number of antenna pairs, i.e. Toeplitz blocks.
    pub fn n_blocks(&self) -> usize {
        self.n_tx * self.n_rx
    }

    pub fn index(&self, t: usize, r: usize, n: usize) -> usize {
        (t * self.n_rx + r) * self.n_f + n
    }
}

/// Specular path parameters. `tau` is the phase advance per subcarrier.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecularParams {
    pub psi_t: Vec<f64>,
    pub psi_r: Vec<f64>,
    pub tau: Vec<f64>,
    pub rho: Vec<C64>,
}

impl SpecularParams {
    pub fn new(psi_t: Vec<f64>, psi_r: Vec<f64>, tau: Vec<f64>, rho: Vec<C64>) -> Result<Self> {
        let sp = Self { psi_t, psi_r, tau, rho };
        sp.validate()?;
        Ok(sp)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.psi_t.len();
        if k == 0 || self.psi_r.len() != k || self.tau.len() != k || self.rho.len() != k {
            return Err(Error::Dimension(format!(
                "specular arrays must share a length >= 1, got {}/{}/{}/{}",
                self.psi_t.len(),
                self.psi_r.len(),
                self.tau.len(),
                self.rho.len()
            )));
        }
        let finite = self
            .psi_t
            .iter()
            .chain(&self.psi_r)
            .chain(&self.tau)
            .all(|v| v.is_finite())
            && self.rho.iter().all(|z| z.re.is_finite() && z.im.is_finite());
        if !finite {
            return Err(Error::InvalidParameter("non-finite specular parameter".into()));
        }
        Ok(())
    }

    pub fn n_paths(&self) -> usize {
        self.psi_t.len()
    }

    /// Real parameter vector `[psi_t | psi_r | tau | Re rho | Im rho]`.
    pub fn to_vector(&self) -> DVector<f64> {
        let k = self.n_paths();
        let mut v = DVector::zeros(5 * k);
        for i in 0..k {
            v[i] = self.psi_t[i];
            v[k + i] = self.psi_r[i];
            v[2 * k + i] = self.tau[i];
            v[3 * k + i] = self.rho[i].re;
            v[4 * k + i] = self.rho[i].im;
        }
        v
    }

    pub fn from_vector(v: &DVector<f64>) -> Result<Self> {
        if v.is_empty() || v.len() % 5 != 0 {
            return Err(Error::Dimension(format!(
                "specular parameter vector length {} is not a positive multiple of 5",
                v.len()
            )));
        }
        let k = v.len() / 5;
        Self::new(
            (0..k).map(|i| v[i]).collect(),
            (0..k).map(|i| v[k + i]).collect(),
            (0..k).map(|i| v[2 * k + i]).collect(),
            (0..k).map(|i| C64::new(v[3 * k + i], v[4 * k + i])).collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffuseNoiseParams {
    /// Average diffuse power.
    pub alpha2: f64,
    /// Normalized coherence bandwidth.
    pub beta: f64,
    /// Number of diffuse taps.
    pub l_taps: usize,
    /// Measurement noise variance.
    pub sigma2: f64,
}

impl DiffuseNoiseParams {
    pub fn new(alpha2: f64, beta: f64, l_taps: usize, sigma2: f64) -> Result<Self> {
        let p = Self { alpha2, beta, l_taps, sigma2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha2 >= 0.0 && self.alpha2.is_finite()) {
            return Err(Error::InvalidParameter(format!("alpha2 = {}", self.alpha2)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidParameter(format!("beta = {}", self.beta)));
        }
        if self.l_taps == 0 {
            return Err(Error::InvalidParameter("l_taps must be >= 1".into()));
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma2 = {}", self.sigma2)));
        }
        Ok(())
    }

    /// Per-tap variances `alpha2 (1 - e^{-2 pi beta}) e^{-2 pi beta l}`.
    pub fn tap_variances(&self) -> Vec<f64> {
        let c = self.alpha2 * (1.0 - (-2.0 * PI * self.beta).exp());
        (0..self.l_taps)
            .map(|l| c * (-2.0 * PI * self.beta * l as f64).exp())
            .collect()
    }
}

/// AR-1 coefficient linking consecutive tap gains.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct SimilarityParam(pub(crate) f64);

impl SimilarityParam {
    pub fn new(a: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::InvalidParameter(format!("similarity {a} outside [0, 1]")));
        }
        Ok(Self(a))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// First column of a Hermitian Toeplitz covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct ToeplitzCov {
    pub nu: Vec<C64>,
}

impl ToeplitzCov {
    pub fn new(nu: Vec<C64>) -> Result<Self> {
        if nu.is_empty() {
            return Err(Error::EmptyInput("Toeplitz first column".into()));
        }
        Ok(Self { nu })
    }

    pub fn len(&self) -> usize {
        self.nu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nu.is_empty()
    }

    pub fn to_matrix(&self) -> DMatrix<C64> {
        toeplitz_hermitian(&self.nu)
    }

    /// Adds `s` to the zero-lag term, i.e. `s * I` to the matrix.
    pub fn with_diagonal(mut self, s: f64) -> Self {
        self.nu[0] += s;
        self
    }

    pub fn scaled(mut self, s: f64) -> Self {
        for z in &mut self.nu {
            *z *= s;
        }
        self
    }

    /// Factor `I_{n_rx} ⊗ I_{n_tx} ⊗ toep(nu)`.
    pub fn factor(&self, dims: &CfrDims) -> Result<FactoredCov> {
        self.check(dims)?;
        FactoredCov::block_diagonal(&self.to_matrix(), dims.n_blocks())
    }

    fn check(&self, dims: &CfrDims) -> Result<()> {
        if self.len() != dims.n_f {
            return Err(Error::Dimension(format!(
                "Toeplitz block of length {} for {} subcarriers",
                self.len(),
                dims.n_f
            )));
        }
        Ok(())
    }
}

/// ULA response `(1/n) exp(i (j - (n-1)/2) psi)`, `j = 0..n`.
pub fn steering_vector(psi: f64, n_ant: usize) -> DVector<C64> {
    let c = (n_ant as f64 - 1.0) / 2.0;
    DVector::from_fn(n_ant, |j, _| C64::from_polar(1.0 / n_ant as f64, (j as f64 - c) * psi))
}

/// Unit-gain contribution of one specular path to the stacked CFR.
pub(crate) fn path_atom(psi_t: f64, psi_r: f64, tau: f64, dims: &CfrDims) -> DVector<C64> {
    let ct = (dims.n_tx as f64 - 1.0) / 2.0;
    let cr = (dims.n_rx as f64 - 1.0) / 2.0;
    let cf = (dims.n_f as f64 - 1.0) / 2.0;
    let amp = 1.0 / ((dims.n_tx * dims.n_rx) as f64).sqrt();
    let mut out = DVector::zeros(dims.m());
    for t in 0..dims.n_tx {
        for r in 0..dims.n_rx {
            let ang = -(t as f64 - ct) * psi_t + (r as f64 - cr) * psi_r;
            for n in 0..dims.n_f {
                let phase = ang - (n as f64 - cf) * tau;
                out[dims.index(t, r, n)] = C64::from_polar(amp, phase);
            }
        }
    }
    out
}

/// Mean CFR generated by the specular paths.
///
/// Per subcarrier this is `vec(A_R Γ A_T^H)` with `Γ = sqrt(n_rx n_tx)
/// diag(rho_k e^{-i (n - (n_f-1)/2) tau_k})`.
pub fn specular_mean(sp: &SpecularParams, dims: &CfrDims) -> Result<DVector<C64>> {
    sp.validate()?;
    let mut h = DVector::zeros(dims.m());
    for k in 0..sp.n_paths() {
        h.axpy(sp.rho[k], &path_atom(sp.psi_t[k], sp.psi_r[k], sp.tau[k], dims), C64::new(1.0, 0.0));
    }
    Ok(h)
}

/// Frequency correlation of the diffuse part at normalized lag `m_frac`:
/// `alpha2 (1 - e^{-2 pi beta}) (1 - f^L) / (1 - f)` with
/// `f = e^{-2 pi (beta - i m_frac)}`.
pub fn kappa(dn: &DiffuseNoiseParams, m_frac: f64) -> C64 {
    if dn.alpha2 == 0.0 {
        return C64::new(0.0, 0.0);
    }
    let f = C64::from_polar((-2.0 * PI * dn.beta).exp(), 2.0 * PI * m_frac);
    let num = C64::new(1.0, 0.0) - f.powu(dn.l_taps as u32);
    let den = C64::new(1.0, 0.0) - f;
    num / den * (dn.alpha2 * (1.0 - (-2.0 * PI * dn.beta).exp()))
}

fn kappa_column(dn: &DiffuseNoiseParams, n_f: usize) -> Vec<C64> {
    (0..n_f).map(|k| kappa(dn, k as f64 / n_f as f64)).collect()
}

/// Diffuse-only Toeplitz covariance of one antenna-pair block.
pub fn diffuse_cov(dn: &DiffuseNoiseParams, n_f: usize) -> ToeplitzCov {
    ToeplitzCov { nu: kappa_column(dn, n_f) }
}

/// Diffuse plus noise covariance of one antenna-pair block.
pub fn diffuse_noise_cov(dn: &DiffuseNoiseParams, n_f: usize) -> ToeplitzCov {
    diffuse_cov(dn, n_f).with_diagonal(dn.sigma2)
}

/// Dense `I_{n_rx} ⊗ I_{n_tx} ⊗ toep(nu)`.
pub fn kron_expand(cov: &ToeplitzCov, dims: &CfrDims) -> Result<DMatrix<C64>> {
    cov.check(dims)?;
    let block = cov.to_matrix();
    let m = dims.m();
    let nf = dims.n_f;
    let mut out = DMatrix::zeros(m, m);
    for b in 0..dims.n_blocks() {
        out.view_mut((b * nf, b * nf), (nf, nf)).copy_from(&block);
    }
    Ok(out)
}

/// Diffuse covariance of `q_{u+1} - q_u` for one transmitter:
/// `2 (1 - a) kappa(k / n_f)`.
pub fn diff_cov_h0(dn_a: &DiffuseNoiseParams, a: SimilarityParam, n_f: usize) -> ToeplitzCov {
    diffuse_cov(dn_a, n_f).scaled(2.0 * (1.0 - a.value()))
}

/// Diffuse covariance of `q^E_{u+1} - q^A_u`:
/// `kappa_E - 2 a_E kappa_A + kappa_A`.
pub fn diff_cov_h1(
    dn_a: &DiffuseNoiseParams,
    dn_e: &DiffuseNoiseParams,
    a_e: SimilarityParam,
    n_f: usize,
) -> ToeplitzCov {
    let ka = kappa_column(dn_a, n_f);
    let ke = kappa_column(dn_e, n_f);
    let a = a_e.value();
    ToeplitzCov {
        nu: ke.iter().zip(&ka).map(|(e, x)| e - x * (2.0 * a) + x).collect(),
    }
}

/// Complex Gaussian log-density `-m ln pi - ln det R - (h-mu)^H R^{-1} (h-mu)`.
pub fn gaussian_log_likelihood(h: &DVector<C64>, mean: &DVector<C64>, cov: &FactoredCov) -> Result<f64> {
    if h.len() != mean.len() {
        return Err(Error::Dimension(format!("h has {} entries, mean {}", h.len(), mean.len())));
    }
    let d = h - mean;
    Ok(-(h.len() as f64) * PI.ln() - cov.logdet() - cov.quad_form(&d)?)
}

/// Same as [`gaussian_log_likelihood`] for a dense Hermitian covariance.
pub fn gaussian_log_likelihood_dense(h: &DVector<C64>, mean: &DVector<C64>, cov: &DMatrix<C64>) -> Result<f64> {
    gaussian_log_likelihood(h, mean, &FactoredCov::from_dense(cov)?)
}

/// Diffuse tap gains for every antenna-pair block.
#[derive(Clone, Debug, PartialEq)]
pub struct TapState {
    pub taps: Vec<Vec<C64>>,
}

impl TapState {
    /// Independent draws `A_l ~ CN(0, Var_l)` per block.
    pub fn stationary<R: Rng + ?Sized>(dn: &DiffuseNoiseParams, n_blocks: usize, rng: &mut R) -> Self {
        let var = dn.tap_variances();
        let taps = (0..n_blocks)
            .map(|_| var.iter().map(|v| complex_normal(rng) * v.sqrt()).collect())
            .collect();
        Self { taps }
    }

    /// One AR-1 step with unchanged statistics:
    /// `A' = a A + sqrt((1 - a^2) Var_l) w`.
    pub fn evolve<R: Rng + ?Sized>(&self, dn: &DiffuseNoiseParams, a: SimilarityParam, rng: &mut R) -> Self {
        let a = a.value();
        let var = dn.tap_variances();
        let s = (1.0 - a * a).max(0.0);
        let taps = self
            .taps
            .iter()
            .map(|blk| {
                var.iter()
                    .enumerate()
                    .map(|(l, v)| {
                        let prev = blk.get(l).copied().unwrap_or_default();
                        prev * a + complex_normal(rng) * (s * v).sqrt()
                    })
                    .collect()
            })
            .collect();
        Self { taps }
    }

    /// Step to a different transmitter whose taps correlate with the
    /// current ones through `a`: `A' = a A + sqrt(max(0, Var'_l - a^2 Var_l)) w`.
    ///
    /// Marginal tap variances equal `Var'_l` wherever `Var'_l >= a^2 Var_l`;
    /// elsewhere the innovation is clamped at zero.
    pub fn cross_evolve<R: Rng + ?Sized>(
        &self,
        from: &DiffuseNoiseParams,
        to: &DiffuseNoiseParams,
        a: SimilarityParam,
        rng: &mut R,
    ) -> Self {
        let a = a.value();
        let v_from = from.tap_variances();
        let v_to = to.tap_variances();
        let n_taps = v_from.len().max(v_to.len());
        let taps = self
            .taps
            .iter()
            .map(|blk| {
                (0..n_taps)
                    .map(|l| {
                        let vf = v_from.get(l).copied().unwrap_or(0.0);
                        let vt = v_to.get(l).copied().unwrap_or(0.0);
                        let prev = blk.get(l).copied().unwrap_or_default();
                        let innov = (vt - a * a * vf).max(0.0).sqrt();
                        prev * a + complex_normal(rng) * innov
                    })
                    .collect()
            })
            .collect();
        Self { taps }
    }
}

/// Maps tap gains to the stacked diffuse CFR, `q[n] = sum_l A_l e^{i 2 pi n l / n_f}`.
#[derive(Clone, Debug)]
pub struct TapTransform {
    n_f: usize,
    twiddle: Vec<C64>,
    n_taps: usize,
}

impl TapTransform {
    pub fn new(n_f: usize, n_taps: usize) -> Self {
        let twiddle = (0..n_f)
            .flat_map(|n| {
                (0..n_taps).map(move |l| C64::from_polar(1.0, 2.0 * PI * (n * l) as f64 / n_f as f64))
            })
            .collect();
        Self { n_f, twiddle, n_taps }
    }

    pub fn apply(&self, state: &TapState) -> DVector<C64> {
        let nf = self.n_f;
        let mut out = DVector::zeros(nf * state.taps.len());
        for (b, blk) in state.taps.iter().enumerate() {
            assert!(blk.len() <= self.n_taps, "tap transform built for fewer taps");
            for n in 0..nf {
                let row = &self.twiddle[n * self.n_taps..n * self.n_taps + blk.len()];
                out[b * nf + n] = row.iter().zip(blk).map(|(w, a)| w * a).sum();
            }
        }
        out
    }
}

/// A measured CFR with optional class label.
#[derive(Clone, Debug, PartialEq)]
pub struct CfrSample {
    pub h: DVector<C64>,
    pub label: Option<usize>,
    pub snapshot_index: usize,
}

/// White CN(0, sigma2 I) measurement noise of length `m`.
pub fn noise_vector<R: Rng + ?Sized>(m: usize, sigma2: f64, rng: &mut R) -> DVector<C64> {
    let s = sigma2.sqrt();
    DVector::from_fn(m, |_, _| complex_normal(rng) * s)
}

/// `n_steps` consecutive CFRs from one transmitter within a coherence time.
pub fn sample_cfr_sequence<R: Rng + ?Sized>(
    sp: &SpecularParams,
    dn: &DiffuseNoiseParams,
    sim: SimilarityParam,
    dims: &CfrDims,
    n_steps: usize,
    rng: &mut R,
) -> Result<Vec<CfrSample>> {
    dn.validate()?;
    let mean = specular_mean(sp, dims)?;
    let tt = TapTransform::new(dims.n_f, dn.l_taps);
    let mut state = TapState::stationary(dn, dims.n_blocks(), rng);
    let mut out = Vec::with_capacity(n_steps);
    for u in 0..n_steps {
        if u > 0 {
            state = state.evolve(dn, sim, rng);
        }
        let mut h = &mean + tt.apply(&state);
        if dn.sigma2 > 0.0 {
            h += noise_vector(dims.m(), dn.sigma2, rng);
        }
        out.push(CfrSample { h, label: None, snapshot_index: u });
    }
    Ok(out)
}
