//! Alternating maximum-likelihood estimation of CFR model parameters.
//!
//! The joint likelihood is split into three sub-problems solved in turn:
//! specular path parameters by Gauss-Newton on the mean, diffuse/noise
//! parameters by Gauss-Newton on the covariance of the specular-free
//! residuals (after an eigenvalue-ratio choice of the tap count), and the
//! AR-1 similarity coefficient from consecutive differences.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::channel_cfr::{
    diffuse_cov, gaussian_log_likelihood, kappa, path_atom, specular_mean, CfrDims, CfrSample,
    DiffuseNoiseParams, SimilarityParam, SpecularParams, ToeplitzCov,
};
use crate::error::{Error, Result};
use crate::linalg::{solve_spd_damped, FactoredCov, C64};

const I: C64 = C64::new(0.0, 1.0);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussNewtonOptions {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub step_init: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
}

impl Default for GaussNewtonOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            rel_tol: 1e-4,
            step_init: 1.0,
            backtrack_factor: 0.5,
            max_backtracks: 20,
        }
    }
}

impl GaussNewtonOptions {
    fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.rel_tol > 0.0) || !(self.step_init > 0.0) {
            return Err(Error::InvalidParameter(format!("Gauss-Newton options {self:?}")));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "backtrack factor {} outside (0, 1)",
                self.backtrack_factor
            )));
        }
        Ok(())
    }
}

/// Result of one Gauss-Newton run.
#[derive(Clone, Debug)]
pub struct GnOutcome<T> {
    pub estimate: T,
    /// Objective value at the start and after every accepted step.
    pub log_likelihood_trace: Vec<f64>,
    pub converged: bool,
    /// True when the information matrix needed Levenberg damping.
    pub damped: bool,
    pub iterations: usize,
}

/// Generic ascent loop: `theta += zeta F^{-1} g` with step halving until the
/// objective strictly increases.
fn gauss_newton<F, G>(theta0: DVector<f64>, objective: F, grad_fim: G, opts: &GaussNewtonOptions) -> Result<GnOutcome<DVector<f64>>>
where
    F: Fn(&DVector<f64>) -> Option<f64>,
    G: Fn(&DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>,
{
    opts.validate()?;
    let mut theta = theta0;
    let mut ll = objective(&theta)
        .ok_or_else(|| Error::Numerical("objective undefined at the initial point".into()))?;
    let mut trace = vec![ll];
    let mut damped_any = false;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..opts.max_iters {
        iterations += 1;
        let (g, f) = grad_fim(&theta)?;
        let (dir, damped) = solve_spd_damped(&f, &g)?;
        damped_any |= damped;
        let mut step = opts.step_init;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let cand = &theta + &dir * step;
            if let Some(v) = objective(&cand) {
                if v > ll {
                    accepted = Some((cand, v));
                    break;
                }
            }
            step *= opts.backtrack_factor;
        }
        match accepted {
            Some((cand, v)) => {
                let change = (&cand - &theta).norm() / theta.norm().max(1e-12);
                theta = cand;
                ll = v;
                trace.push(v);
                if change < opts.rel_tol {
                    converged = true;
                    break;
                }
            }
            None => {
                // No ascent direction left: stationary up to line-search resolution.
                converged = true;
                break;
            }
        }
    }
    Ok(GnOutcome { estimate: theta, log_likelihood_trace: trace, converged, damped: damped_any, iterations })
}

/// `U[j, k] = exp(-i (j - (n-1)/2) v[k])`.
pub fn exp_basis(v: &[f64], n: usize) -> DMatrix<C64> {
    let c = (n as f64 - 1.0) / 2.0;
    DMatrix::from_fn(n, v.len(), |j, k| C64::from_polar(1.0, -(j as f64 - c) * v[k]))
}

/// Elementwise derivative of [`exp_basis`] in `v[k]` (column `k`):
/// `-i Xi U` with `Xi = diag(-(n-1)/2 .. (n-1)/2)`.
pub fn exp_basis_derivative(v: &[f64], n: usize) -> DMatrix<C64> {
    let c = (n as f64 - 1.0) / 2.0;
    let u = exp_basis(v, n);
    DMatrix::from_fn(n, v.len(), |j, k| -I * (j as f64 - c) * u[(j, k)])
}

/// Jacobian of the specular mean with columns
/// `[d psi_t | d psi_r | d tau | d Re rho | d Im rho]`, `K` columns each.
pub fn specular_jacobian(sp: &SpecularParams, dims: &CfrDims) -> Result<DMatrix<C64>> {
    sp.validate()?;
    let k = sp.n_paths();
    let m = dims.m();
    let ct = (dims.n_tx as f64 - 1.0) / 2.0;
    let cr = (dims.n_rx as f64 - 1.0) / 2.0;
    let cf = (dims.n_f as f64 - 1.0) / 2.0;
    let mut j = DMatrix::zeros(m, 5 * k);
    for p in 0..k {
        let atom = path_atom(sp.psi_t[p], sp.psi_r[p], sp.tau[p], dims);
        let rho = sp.rho[p];
        for t in 0..dims.n_tx {
            for r in 0..dims.n_rx {
                for n in 0..dims.n_f {
                    let idx = dims.index(t, r, n);
                    let a = atom[idx];
                    j[(idx, p)] = -I * (t as f64 - ct) * rho * a;
                    j[(idx, k + p)] = I * (r as f64 - cr) * rho * a;
                    j[(idx, 2 * k + p)] = -I * (n as f64 - cf) * rho * a;
                    j[(idx, 3 * k + p)] = a;
                    j[(idx, 4 * k + p)] = I * a;
                }
            }
        }
    }
    Ok(j)
}

/// Gradient of the log-likelihood in the specular parameters,
/// `2 Re{J^H R^{-1} (h - hbar)}`.
pub fn specular_score(h: &DVector<C64>, sp: &SpecularParams, cov: &FactoredCov, dims: &CfrDims) -> Result<DVector<f64>> {
    let j = specular_jacobian(sp, dims)?;
    let resid = h - specular_mean(sp, dims)?;
    let w = cov.solve(&resid)?;
    Ok((j.adjoint() * w).map(|z| 2.0 * z.re))
}

/// Fisher information `2 Re{J^H R^{-1} J}`.
pub fn specular_fim(sp: &SpecularParams, cov: &FactoredCov, dims: &CfrDims) -> Result<DMatrix<f64>> {
    let j = specular_jacobian(sp, dims)?;
    let rj = cov.solve_matrix(&j)?;
    Ok((j.adjoint() * rj).map(|z| 2.0 * z.re))
}

/// Gauss-Newton refinement of the specular parameters for a fixed covariance.
pub fn gauss_newton_specular(
    h: &DVector<C64>,
    sp_init: &SpecularParams,
    cov: &FactoredCov,
    dims: &CfrDims,
    opts: &GaussNewtonOptions,
) -> Result<GnOutcome<SpecularParams>> {
    sp_init.validate()?;
    if h.len() != dims.m() {
        return Err(Error::Dimension(format!("CFR of length {} for m = {}", h.len(), dims.m())));
    }
    let objective = |theta: &DVector<f64>| -> Option<f64> {
        let sp = SpecularParams::from_vector(theta).ok()?;
        let mean = specular_mean(&sp, dims).ok()?;
        gaussian_log_likelihood(h, &mean, cov).ok()
    };
    let grad_fim = |theta: &DVector<f64>| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let sp = SpecularParams::from_vector(theta)?;
        let j = specular_jacobian(&sp, dims)?;
        let resid = h - specular_mean(&sp, dims)?;
        let rj = cov.solve_matrix(&j)?;
        let jh = j.adjoint();
        let g = (rj.adjoint() * resid).map(|z| 2.0 * z.re);
        let f = (jh * rj).map(|z| 2.0 * z.re);
        Ok((g, f))
    };
    let out = gauss_newton(sp_init.to_vector(), objective, grad_fim, opts)?;
    Ok(GnOutcome {
        estimate: SpecularParams::from_vector(&out.estimate)?,
        log_likelihood_trace: out.log_likelihood_trace,
        converged: out.converged,
        damped: out.damped,
        iterations: out.iterations,
    })
}

/// Greedy matched-correlation initialization. For each path in turn the
/// unit-gain atom best correlated with the residual is picked on a grid of
/// `(psi_t, psi_r, tau)`, its least-squares gain is fitted and removed. The
/// grid is shifted by `offset` (a fraction of one grid step) so that several
/// distinct starts can be produced.
pub fn specular_matched_init(h: &DVector<C64>, n_paths: usize, dims: &CfrDims, offset: f64) -> Result<SpecularParams> {
    if h.len() != dims.m() {
        return Err(Error::Dimension(format!("CFR of length {} for m = {}", h.len(), dims.m())));
    }
    if n_paths == 0 {
        return Err(Error::InvalidParameter("at least one specular path".into()));
    }
    let n_psi_t = (4 * dims.n_tx).max(8);
    let n_psi_r = (4 * dims.n_rx).max(8);
    let n_tau = 4 * dims.n_f;
    let grid = |n: usize, i: usize| -PI + 2.0 * PI * (i as f64 + offset) / n as f64;
    let cf = (dims.n_f as f64 - 1.0) / 2.0;
    let ct = (dims.n_tx as f64 - 1.0) / 2.0;
    let cr = (dims.n_rx as f64 - 1.0) / 2.0;
    let atom_norm2 = dims.n_f as f64;
    let scale = 1.0 / ((dims.n_tx * dims.n_rx) as f64).sqrt();
    let mut resid = h.clone();
    let (mut pt, mut pr, mut tau, mut rho) = (vec![], vec![], vec![], vec![]);
    for _ in 0..n_paths {
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0, 0.0, C64::new(0.0, 0.0));
        for it in 0..n_tau {
            let tv = grid(n_tau, it);
            // Per antenna pair: sum_n conj(e^{-i (n - cf) tau}) r[t, r, n].
            let mut pair = vec![C64::new(0.0, 0.0); dims.n_blocks()];
            for t in 0..dims.n_tx {
                for r in 0..dims.n_rx {
                    let mut s = C64::new(0.0, 0.0);
                    for n in 0..dims.n_f {
                        s += C64::from_polar(1.0, (n as f64 - cf) * tv) * resid[dims.index(t, r, n)];
                    }
                    pair[t * dims.n_rx + r] = s;
                }
            }
            for ia in 0..n_psi_t {
                let a = grid(n_psi_t, ia);
                for ib in 0..n_psi_r {
                    let b = grid(n_psi_r, ib);
                    let mut corr = C64::new(0.0, 0.0);
                    for t in 0..dims.n_tx {
                        for r in 0..dims.n_rx {
                            let ang = -(t as f64 - ct) * a + (r as f64 - cr) * b;
                            corr += C64::from_polar(scale, -ang) * pair[t * dims.n_rx + r];
                        }
                    }
                    let score = corr.norm_sqr();
                    if score > best.0 {
                        best = (score, a, b, tv, corr / atom_norm2);
                    }
                }
            }
        }
        let (_, a, b, tv, g) = best;
        resid.axpy(-g, &path_atom(a, b, tv, dims), C64::new(1.0, 0.0));
        pt.push(a);
        pr.push(b);
        tau.push(tv);
        rho.push(g);
    }
    SpecularParams::new(pt, pr, tau, rho)
}

/// Multi-start specular fit: every start is a shifted-grid matched
/// initialization refined by Gauss-Newton; the best likelihood wins.
pub fn fit_specular(
    h: &DVector<C64>,
    n_paths: usize,
    cov: &FactoredCov,
    dims: &CfrDims,
    opts: &GaussNewtonOptions,
    n_starts: usize,
) -> Result<GnOutcome<SpecularParams>> {
    let mut best: Option<GnOutcome<SpecularParams>> = None;
    for s in 0..n_starts.max(1) {
        let init = specular_matched_init(h, n_paths, dims, s as f64 / n_starts.max(1) as f64)?;
        let out = gauss_newton_specular(h, &init, cov, dims, opts)?;
        let better = match &best {
            None => true,
            Some(b) => out.log_likelihood_trace.last() > b.log_likelihood_trace.last(),
        };
        if better {
            best = Some(out);
        }
    }
    Ok(best.expect("at least one start"))
}

/// Eigenvalue-ratio model order: smallest `L` whose leading eigenvalues of
/// the sample covariance carry at least a fraction `eta` of the total.
/// Rows of `residuals` are dimensions, columns observations.
pub fn estimate_num_taps(residuals: &DMatrix<C64>, eta: f64) -> Result<usize> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::InvalidParameter(format!("eta = {eta} outside (0, 1)")));
    }
    if residuals.ncols() < 2 {
        return Err(Error::EmptyInput("need at least two observations".into()));
    }
    let c = residuals * residuals.adjoint() / C64::new(residuals.ncols() as f64, 0.0);
    let mut ev: Vec<f64> = SymmetricEigen::new(c).eigenvalues.iter().map(|e| e.max(0.0)).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = ev.iter().sum();
    if !(total > 0.0) {
        return Err(Error::EmptyInput("residual matrix has rank zero".into()));
    }
    let mut acc = 0.0;
    for (i, e) in ev.iter().enumerate() {
        acc += e;
        if acc >= eta * total {
            return Ok(i + 1);
        }
    }
    Ok(ev.len())
}

/// Rearranges an `m x N` CFR residual matrix into `n_f x (N * n_blocks)`, one
/// column per antenna-pair segment.
pub fn block_columns(residuals: &DMatrix<C64>, dims: &CfrDims) -> Result<DMatrix<C64>> {
    if residuals.nrows() != dims.m() {
        return Err(Error::Dimension(format!("residual rows {} for m = {}", residuals.nrows(), dims.m())));
    }
    let nf = dims.n_f;
    let nb = dims.n_blocks();
    Ok(DMatrix::from_fn(nf, residuals.ncols() * nb, |i, c| residuals[((c % nb) * nf + i, c / nb)]))
}

fn dkappa_dalpha2(dn: &DiffuseNoiseParams, m_frac: f64) -> C64 {
    let unit = DiffuseNoiseParams { alpha2: 1.0, ..*dn };
    kappa(&unit, m_frac)
}

fn dkappa_dbeta(dn: &DiffuseNoiseParams, m_frac: f64) -> C64 {
    let one = C64::new(1.0, 0.0);
    let e = (-2.0 * PI * dn.beta).exp();
    let f = C64::from_polar(e, 2.0 * PI * m_frac);
    let l = dn.l_taps as f64;
    let fl = f.powu(dn.l_taps as u32);
    let first = (one - fl) / (one - f) * (2.0 * PI * e);
    let second = fl / (one - f) * (2.0 * PI * l * (1.0 - e));
    let third = f * (one - fl) / ((one - f) * (one - f)) * (2.0 * PI * (1.0 - e));
    (first + second - third) * dn.alpha2
}

/// Derivatives of the diffuse-plus-noise Toeplitz column in
/// `(sigma2, alpha2, beta)`, with `L` held fixed.
pub fn vn_cov_derivs(dn: &DiffuseNoiseParams, n_f: usize) -> [ToeplitzCov; 3] {
    let mut ds = vec![C64::new(0.0, 0.0); n_f];
    ds[0] = C64::new(1.0, 0.0);
    let lag = |k: usize| k as f64 / n_f as f64;
    [
        ToeplitzCov { nu: ds },
        ToeplitzCov { nu: (0..n_f).map(|k| dkappa_dalpha2(dn, lag(k))).collect() },
        ToeplitzCov { nu: (0..n_f).map(|k| dkappa_dbeta(dn, lag(k))).collect() },
    ]
}

/// Block sufficient statistic: average outer product of the `n_f`-long
/// antenna-pair segments and the number of segments averaged.
#[derive(Clone, Debug)]
pub struct BlockStats {
    pub scatter: DMatrix<C64>,
    pub n_eff: usize,
}

impl BlockStats {
    pub fn from_residuals(residuals: &DMatrix<C64>, dims: &CfrDims) -> Result<Self> {
        let cols = block_columns(residuals, dims)?;
        if cols.ncols() == 0 {
            return Err(Error::EmptyInput("no residual columns".into()));
        }
        let n = cols.ncols();
        Ok(Self { scatter: &cols * cols.adjoint() / C64::new(n as f64, 0.0), n_eff: n })
    }

    pub fn from_vectors(vs: &[DVector<C64>], dims: &CfrDims) -> Result<Self> {
        if vs.is_empty() {
            return Err(Error::EmptyInput("no vectors".into()));
        }
        let mat = DMatrix::from_columns(vs);
        Self::from_residuals(&mat, dims)
    }

    /// Zero-mean Gaussian log-likelihood of all segments under block
    /// covariance `t`.
    pub fn log_likelihood(&self, t: &DMatrix<C64>) -> Result<f64> {
        let f = FactoredCov::from_dense(t)?;
        let tr: f64 = f.solve_matrix(&self.scatter)?.trace().re;
        let d = t.nrows() as f64;
        Ok(-(self.n_eff as f64) * (d * PI.ln() + f.logdet() + tr))
    }

    /// Gradient `N Tr(T^{-1} dT_i T^{-1} (S - T))` and information
    /// `N Tr(T^{-1} dT_i T^{-1} dT_j)`.
    pub fn grad_fim(&self, t: &DMatrix<C64>, dts: &[DMatrix<C64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let f = FactoredCov::from_dense(t)?;
        let n = self.n_eff as f64;
        let w = f.solve_matrix(&(&self.scatter - t))?;
        let a: Vec<DMatrix<C64>> = dts.iter().map(|d| f.solve_matrix(d)).collect::<Result<_>>()?;
        let p = dts.len();
        let mut g = DVector::zeros(p);
        let mut fim = DMatrix::zeros(p, p);
        for i in 0..p {
            g[i] = n * (&a[i] * &w).trace().re;
            for j in 0..=i {
                let v = n * (&a[i] * &a[j]).trace().re;
                fim[(i, j)] = v;
                fim[(j, i)] = v;
            }
        }
        Ok((g, fim))
    }
}

/// Zero-mean log-likelihood of an `m x N` residual matrix under `dn`.
pub fn vn_log_likelihood(residuals: &DMatrix<C64>, dn: &DiffuseNoiseParams, dims: &CfrDims) -> Result<f64> {
    let stats = BlockStats::from_residuals(residuals, dims)?;
    stats.log_likelihood(&crate::channel_cfr::diffuse_noise_cov(dn, dims.n_f).to_matrix())
}

/// Gradient of [`vn_log_likelihood`] in `(sigma2, alpha2, beta)`.
pub fn vn_score(residuals: &DMatrix<C64>, dn: &DiffuseNoiseParams, dims: &CfrDims) -> Result<DVector<f64>> {
    let stats = BlockStats::from_residuals(residuals, dims)?;
    let t = crate::channel_cfr::diffuse_noise_cov(dn, dims.n_f).to_matrix();
    let d: Vec<_> = vn_cov_derivs(dn, dims.n_f).iter().map(|c| c.to_matrix()).collect();
    Ok(stats.grad_fim(&t, &d)?.0)
}

/// Gauss-Newton for `(sigma2, alpha2, beta)` on log scale with the tap count
/// fixed at `dn_init.l_taps`.
pub fn gauss_newton_vn(
    residuals: &DMatrix<C64>,
    dn_init: &DiffuseNoiseParams,
    dims: &CfrDims,
    opts: &GaussNewtonOptions,
) -> Result<GnOutcome<DiffuseNoiseParams>> {
    dn_init.validate()?;
    if !(dn_init.alpha2 > 0.0 && dn_init.sigma2 > 0.0) {
        return Err(Error::InvalidParameter("log-scale fit needs alpha2 > 0 and sigma2 > 0".into()));
    }
    let stats = BlockStats::from_residuals(residuals, dims)?;
    gauss_newton_vn_stats(&stats, dn_init, dims.n_f, opts)
}

fn params_from_log(theta: &DVector<f64>, l_taps: usize) -> DiffuseNoiseParams {
    DiffuseNoiseParams { sigma2: theta[0].exp(), alpha2: theta[1].exp(), beta: theta[2].exp(), l_taps }
}

pub(crate) fn gauss_newton_vn_stats(
    stats: &BlockStats,
    dn_init: &DiffuseNoiseParams,
    n_f: usize,
    opts: &GaussNewtonOptions,
) -> Result<GnOutcome<DiffuseNoiseParams>> {
    let l = dn_init.l_taps;
    let theta0 = DVector::from_vec(vec![dn_init.sigma2.ln(), dn_init.alpha2.ln(), dn_init.beta.ln()]);
    let objective = |theta: &DVector<f64>| -> Option<f64> {
        let dn = params_from_log(theta, l);
        let t = crate::channel_cfr::diffuse_noise_cov(&dn, n_f).to_matrix();
        stats.log_likelihood(&t).ok().filter(|v| v.is_finite())
    };
    let grad_fim = |theta: &DVector<f64>| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let dn = params_from_log(theta, l);
        let t = crate::channel_cfr::diffuse_noise_cov(&dn, n_f).to_matrix();
        let d: Vec<_> = vn_cov_derivs(&dn, n_f).iter().map(|c| c.to_matrix()).collect();
        let (g, f) = stats.grad_fim(&t, &d)?;
        let p = DVector::from_vec(vec![dn.sigma2, dn.alpha2, dn.beta]);
        let gl = g.component_mul(&p);
        let fl = DMatrix::from_fn(3, 3, |i, j| f[(i, j)] * p[i] * p[j]);
        Ok((gl, fl))
    };
    let out = gauss_newton(theta0, objective, grad_fim, opts)?;
    Ok(GnOutcome {
        estimate: params_from_log(&out.estimate, l),
        log_likelihood_trace: out.log_likelihood_trace,
        converged: out.converged,
        damped: out.damped,
        iterations: out.iterations,
    })
}

/// Which difference model the similarity coefficient belongs to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Hypothesis {
    /// Consecutive CFRs from the same transmitter.
    Null,
    /// New CFR from a second transmitter whose taps correlate with the
    /// reference transmitter's.
    Alternative,
}

/// Block covariance of consecutive differences and its derivative in `a`.
fn similarity_model(
    a: f64,
    dn_ref: &DiffuseNoiseParams,
    dn_other: Option<&DiffuseNoiseParams>,
    hypothesis: Hypothesis,
    n_f: usize,
) -> Result<(DMatrix<C64>, DMatrix<C64>)> {
    let ka = diffuse_cov(dn_ref, n_f);
    let d = ka.clone().scaled(-2.0).to_matrix();
    let t = match hypothesis {
        Hypothesis::Null => ka.scaled(2.0 * (1.0 - a)).with_diagonal(2.0 * dn_ref.sigma2),
        Hypothesis::Alternative => {
            let de = dn_other.ok_or_else(|| {
                Error::InvalidParameter("alternative hypothesis needs the second transmitter's parameters".into())
            })?;
            let a = SimilarityParam::new(a)?;
            crate::channel_cfr::diff_cov_h1(dn_ref, de, a, n_f).with_diagonal(dn_ref.sigma2 + de.sigma2)
        }
    };
    Ok((t.to_matrix(), d))
}

/// Derivative of the null-hypothesis difference column in `a`: `-2 kappa`.
pub fn diff_cov_h0_deriv(dn_a: &DiffuseNoiseParams, n_f: usize) -> ToeplitzCov {
    diffuse_cov(dn_a, n_f).scaled(-2.0)
}

/// Log-likelihood of difference vectors (`m x N`) as a function of `a`.
pub fn similarity_log_likelihood(
    diffs: &DMatrix<C64>,
    a: f64,
    dn_ref: &DiffuseNoiseParams,
    dn_other: Option<&DiffuseNoiseParams>,
    hypothesis: Hypothesis,
    dims: &CfrDims,
) -> Result<f64> {
    let stats = BlockStats::from_residuals(diffs, dims)?;
    let (t, _) = similarity_model(a, dn_ref, dn_other, hypothesis, dims.n_f)?;
    stats.log_likelihood(&t)
}

fn logistic(s: f64) -> f64 {
    1.0 / (1.0 + (-s).exp())
}

/// Gauss-Newton for the similarity coefficient through `a = 1 / (1 + e^{-s})`.
pub fn estimate_similarity(
    diffs: &DMatrix<C64>,
    dn_ref: &DiffuseNoiseParams,
    a_init: SimilarityParam,
    hypothesis: Hypothesis,
    dn_other: Option<&DiffuseNoiseParams>,
    dims: &CfrDims,
    opts: &GaussNewtonOptions,
) -> Result<GnOutcome<SimilarityParam>> {
    let stats = BlockStats::from_residuals(diffs, dims)?;
    estimate_similarity_stats(&stats, dn_ref, a_init, hypothesis, dn_other, dims.n_f, opts)
}

pub(crate) fn estimate_similarity_stats(
    stats: &BlockStats,
    dn_ref: &DiffuseNoiseParams,
    a_init: SimilarityParam,
    hypothesis: Hypothesis,
    dn_other: Option<&DiffuseNoiseParams>,
    n_f: usize,
    opts: &GaussNewtonOptions,
) -> Result<GnOutcome<SimilarityParam>> {
    let a0 = a_init.value().clamp(1e-6, 1.0 - 1e-6);
    let s0 = (a0 / (1.0 - a0)).ln();
    let objective = |theta: &DVector<f64>| -> Option<f64> {
        let (t, _) = similarity_model(logistic(theta[0]), dn_ref, dn_other, hypothesis, n_f).ok()?;
        stats.log_likelihood(&t).ok().filter(|v| v.is_finite())
    };
    let grad_fim = |theta: &DVector<f64>| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let a = logistic(theta[0]);
        let (t, d) = similarity_model(a, dn_ref, dn_other, hypothesis, n_f)?;
        let (g, f) = stats.grad_fim(&t, std::slice::from_ref(&d))?;
        let ds = a * (1.0 - a);
        Ok((g * ds, f * (ds * ds)))
    };
    if objective(&DVector::from_element(1, s0)).is_none() {
        return Err(Error::SingularModel("difference covariance at the initial similarity".into()));
    }
    let out = gauss_newton(DVector::from_element(1, s0), objective, grad_fim, opts)?;
    let a = logistic(out.estimate[0]).clamp(0.0, 1.0);
    Ok(GnOutcome {
        estimate: SimilarityParam::new(a)?,
        log_likelihood_trace: out.log_likelihood_trace,
        converged: out.converged,
        damped: out.damped,
        iterations: out.iterations,
    })
}

/// Fits `(sigma2, alpha2, beta)` for every tap count in
/// `l_hat - radius ..= l_hat + radius` (capped at `n_f`, beyond which taps
/// alias onto each other) and keeps the most likely. All orders share the
/// same three free parameters, so no complexity penalty applies.
pub fn fit_vn_with_order_refinement(
    stats: &BlockStats,
    init: &DiffuseNoiseParams,
    l_hat: usize,
    radius: usize,
    n_f: usize,
    opts: &GaussNewtonOptions,
) -> Result<DiffuseNoiseParams> {
    let mut best: Option<(f64, DiffuseNoiseParams)> = None;
    let mut last_err = None;
    for l in l_hat.saturating_sub(radius).max(1)..=(l_hat + radius).min(n_f.max(l_hat)) {
        match gauss_newton_vn_stats(stats, &DiffuseNoiseParams { l_taps: l, ..*init }, n_f, opts) {
            Ok(out) => {
                let ll = *out.log_likelihood_trace.last().expect("trace starts non-empty");
                if best.as_ref().is_none_or(|(b, _)| ll > *b) {
                    best = Some((ll, out.estimate));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match (best, last_err) {
        (Some((_, dn)), _) => Ok(dn),
        (None, Some(e)) => Err(e),
        (None, None) => unreachable!("the order range is never empty"),
    }
}

#[derive(Clone, Debug)]
pub struct EstimatorOptions {
    pub gn: GaussNewtonOptions,
    pub n_paths: usize,
    pub n_starts: usize,
    pub eta: f64,
    /// Half-width of the likelihood search around the energy-rule tap count;
    /// zero keeps the energy rule's choice.
    pub tap_search_radius: usize,
    pub n_rounds: usize,
    /// Cap on the number of CFRs refitted individually per round.
    pub max_specular_fits: usize,
    pub vn_init: DiffuseNoiseParams,
    pub a_init: SimilarityParam,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            gn: GaussNewtonOptions::default(),
            n_paths: 4,
            n_starts: 8,
            eta: 0.95,
            tap_search_radius: 4,
            n_rounds: 3,
            max_specular_fits: 64,
            vn_init: DiffuseNoiseParams { alpha2: 100.0, beta: 0.05, l_taps: 10, sigma2: 10.0 },
            a_init: SimilarityParam(0.5),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EstimationReport {
    pub theta_sp_hat: SpecularParams,
    pub theta_vn_hat: DiffuseNoiseParams,
    pub a_hat: SimilarityParam,
    /// Total CFR log-likelihood after every accepted round.
    pub log_likelihood_trace: Vec<f64>,
    pub converged: bool,
}

/// Similarity sub-problem input: consecutive-CFR differences plus the model
/// they are scored under.
#[derive(Clone, Copy, Debug)]
pub struct SimilarityTask<'a> {
    pub diffs: &'a [DVector<C64>],
    pub hypothesis: Hypothesis,
    /// Reference transmitter's parameters, required for the alternative.
    pub reference: Option<&'a DiffuseNoiseParams>,
}

fn total_log_likelihood(cfrs: &[CfrSample], mean: &DVector<C64>, cov: &FactoredCov) -> Result<f64> {
    cfrs.iter().map(|s| gaussian_log_likelihood(&s.h, mean, cov)).sum()
}

fn average_specular(fits: &[SpecularParams]) -> Result<SpecularParams> {
    let n = fits.len() as f64;
    let mut acc = fits[0].to_vector() * 0.0;
    for f in fits {
        acc += f.to_vector();
    }
    SpecularParams::from_vector(&(acc / n))
}

fn rel_change(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-12)
}

/// Runs the three sub-problems in alternation for one transmitter.
///
/// Every round refits the specular parameters of up to
/// `max_specular_fits` CFRs (warm-started from the running estimate so the
/// path order stays aligned), averages them, forms the specular-free residual
/// matrix, picks the tap count and refits the diffuse/noise parameters. A
/// round that lowers the total likelihood is rejected and ends the loop. The
/// similarity coefficient is fitted last from the differences in `similarity`.
pub fn alternating_estimate(
    snapshots: &[CfrSample],
    similarity: Option<SimilarityTask<'_>>,
    dims: &CfrDims,
    opts: &EstimatorOptions,
) -> Result<EstimationReport> {
    if snapshots.is_empty() {
        return Err(Error::EmptyInput("no CFR snapshots".into()));
    }
    for s in snapshots {
        if s.h.len() != dims.m() {
            return Err(Error::Dimension(format!("snapshot {} has length {}", s.snapshot_index, s.h.len())));
        }
    }
    let mean_cfr = snapshots.iter().fold(DVector::zeros(dims.m()), |acc, s| acc + &s.h) / C64::new(snapshots.len() as f64, 0.0);
    let mut sp = specular_matched_init(&mean_cfr, opts.n_paths, dims, 0.0)?;
    let mut vn = opts.vn_init;
    let mut a_hat = opts.a_init;
    let mut trace = Vec::new();
    let mut converged = false;

    for round in 0..opts.n_rounds {
        let ctx = |sub: &str| format!("round {round}, {sub}");
        let cov = crate::channel_cfr::diffuse_noise_cov(&vn, dims.n_f)
            .factor(dims)
            .map_err(|e| e.context(ctx("specular covariance")))?;
        if round == 0 {
            // The sample mean has covariance R / N; a multi-start fit there
            // anchors the path ordering for the per-snapshot refits.
            let scaled = crate::channel_cfr::diffuse_noise_cov(&vn, dims.n_f)
                .scaled(1.0 / snapshots.len() as f64)
                .factor(dims)
                .map_err(|e| e.context(ctx("mean covariance")))?;
            sp = fit_specular(&mean_cfr, opts.n_paths, &scaled, dims, &opts.gn, opts.n_starts)
                .map_err(|e| e.context(ctx("specular multi-start")))?
                .estimate;
        }
        let fits: Vec<SpecularParams> = snapshots
            .iter()
            .take(opts.max_specular_fits.max(1))
            .map(|s| gauss_newton_specular(&s.h, &sp, &cov, dims, &opts.gn).map(|o| o.estimate))
            .collect::<Result<_>>()
            .map_err(|e| e.context(ctx("specular sub-problem")))?;
        let sp_new = average_specular(&fits)?;
        let mean = specular_mean(&sp_new, dims)?;
        let residuals = DMatrix::from_columns(&snapshots.iter().map(|s| &s.h - &mean).collect::<Vec<_>>());
        // An exact specular fit leaves nothing to model; keep the current
        // diffuse/noise parameters rather than chase a zero covariance.
        let signal = snapshots.iter().map(|s| s.h.norm_squared()).sum::<f64>();
        let vn_new = if residuals.norm_squared() <= 1e-24 * signal {
            vn
        } else {
            let l_hat = if residuals.ncols() >= 2 {
                estimate_num_taps(&block_columns(&residuals, dims)?, opts.eta).map_err(|e| e.context(ctx("tap count")))?
            } else {
                vn.l_taps
            };
            let stats = BlockStats::from_residuals(&residuals, dims)?;
            fit_vn_with_order_refinement(&stats, &vn, l_hat, opts.tap_search_radius, dims.n_f, &opts.gn)
                .map_err(|e| e.context(ctx("diffuse/noise sub-problem")))?
        };

        let cov_new = crate::channel_cfr::diffuse_noise_cov(&vn_new, dims.n_f).factor(dims)?;
        let ll = total_log_likelihood(snapshots, &mean, &cov_new)?;
        if let Some(prev) = trace.last() {
            if ll < *prev {
                converged = true;
                break;
            }
        }
        let sp_change = rel_change(&sp_new.to_vector(), &sp.to_vector());
        let vn_change = rel_change(
            &DVector::from_vec(vec![vn_new.sigma2, vn_new.alpha2, vn_new.beta, vn_new.l_taps as f64]),
            &DVector::from_vec(vec![vn.sigma2, vn.alpha2, vn.beta, vn.l_taps as f64]),
        );
        sp = sp_new;
        vn = vn_new;
        trace.push(ll);
        if round > 0 && sp_change < opts.gn.rel_tol && vn_change < opts.gn.rel_tol {
            converged = true;
            break;
        }
    }

    if opts.n_rounds > 0 {
        if let Some(task) = similarity {
            if !task.diffs.is_empty() {
                let stats = BlockStats::from_vectors(task.diffs, dims)?;
                let (dn_ref, dn_other) = match task.hypothesis {
                    Hypothesis::Null => (&vn, None),
                    Hypothesis::Alternative => (
                        task.reference.ok_or_else(|| {
                            Error::InvalidParameter("alternative similarity needs reference parameters".into())
                        })?,
                        Some(&vn),
                    ),
                };
                a_hat = estimate_similarity_stats(&stats, dn_ref, opts.a_init, task.hypothesis, dn_other, dims.n_f, &opts.gn)
                    .map_err(|e| e.context("similarity sub-problem"))?
                    .estimate;
            }
        }
    }
    Ok(EstimationReport { theta_sp_hat: sp, theta_vn_hat: vn, a_hat, log_likelihood_trace: trace, converged })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_basis_examples() {
        let u = exp_basis(&[0.0], 3);
        assert!(u.iter().all(|z| (z - C64::new(1.0, 0.0)).norm() < 1e-15));
        let u = exp_basis(&[PI], 2);
        assert!((u[(0, 0)] - I).norm() < 1e-15);
        assert!((u[(1, 0)] + I).norm() < 1e-15);
    }

    #[test]
    fn exp_basis_derivative_matches_finite_differences() {
        let v = [0.3, -1.1];
        let d = exp_basis_derivative(&v, 5);
        let h = 1e-6;
        for k in 0..2 {
            let mut vp = v;
            let mut vm = v;
            vp[k] += h;
            vm[k] -= h;
            let fd = (exp_basis(&vp, 5) - exp_basis(&vm, 5)) / C64::new(2.0 * h, 0.0);
            for j in 0..5 {
                let rel = (fd[(j, k)] - d[(j, k)]).norm() / d[(j, k)].norm().max(1e-12);
                assert!(rel < 1e-6 || d[(j, k)].norm() < 1e-12, "rel {rel}");
            }
        }
    }

    #[test]
    fn jacobian_structure_for_zero_gain() {
        let dims = CfrDims::new(2, 2, 4).unwrap();
        let sp = SpecularParams::new(vec![0.2], vec![0.4], vec![0.3], vec![C64::new(0.0, 0.0)]).unwrap();
        let j = specular_jacobian(&sp, &dims).unwrap();
        for c in 0..3 {
            assert!(j.column(c).norm() == 0.0);
        }
        let diff = j.column(4) - j.column(3) * I;
        assert!(diff.norm() < 1e-15);
    }

    #[test]
    fn tap_count_rules() {
        let x = DMatrix::from_fn(6, 10, |i, j| C64::new((i + 1) as f64, 0.0) * (j as f64 - 4.5));
        assert_eq!(estimate_num_taps(&x, 0.9).unwrap(), 1);
        assert!(estimate_num_taps(&DMatrix::zeros(4, 5), 0.9).is_err());
        assert!(estimate_num_taps(&x, 1.0).is_err());
        let scaled = &x * C64::new(7.5, 0.0);
        assert_eq!(estimate_num_taps(&scaled, 0.9).unwrap(), 1);
    }

    #[test]
    fn sigma_derivative_is_unit_impulse() {
        let dn = DiffuseNoiseParams::new(200.0, 0.02, 20, 20.0).unwrap();
        let d = vn_cov_derivs(&dn, 20);
        assert_eq!(d[0].nu[0], C64::new(1.0, 0.0));
        assert!(d[0].nu[1..].iter().all(|z| z.norm() == 0.0));
        let want = 1.0 - (-2.0 * PI * 20.0 * 0.02f64).exp();
        assert!((d[1].nu[0].re - want).abs() < 1e-12);
        let want_beta = 2.0 * PI * 200.0 * 20.0 * (-2.0 * PI * 0.02 * 20.0f64).exp();
        assert!((d[2].nu[0].re - want_beta).abs() < 1e-9 * want_beta);
    }

    #[test]
    fn alternating_with_zero_rounds_returns_initial_values() {
        let dims = CfrDims::new(1, 1, 6).unwrap();
        let s = CfrSample { h: DVector::from_element(6, C64::new(1.0, 0.0)), label: None, snapshot_index: 0 };
        let opts = EstimatorOptions { n_rounds: 0, n_paths: 1, ..Default::default() };
        let rep = alternating_estimate(&[s], None, &dims, &opts).unwrap();
        assert!(!rep.converged);
        assert_eq!(rep.theta_vn_hat, opts.vn_init);
        assert_eq!(rep.a_hat, opts.a_init);
        assert!(rep.log_likelihood_trace.is_empty());
        assert!(alternating_estimate(&[], None, &dims, &opts).is_err());
    }
}
