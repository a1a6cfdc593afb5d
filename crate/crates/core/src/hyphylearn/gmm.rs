use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use super::classify::Classifier;
use crate::error::{Error, Result};

/// EM settings for full-covariance Gaussian mixtures.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GmmOptions {
    pub n_components: usize,
    pub max_iter: usize,
    /// Stop once the mean per-sample log-likelihood moves less than this.
    pub tol: f64,
    /// Added to every covariance diagonal.
    pub reg_covar: f64,
    pub max_restarts: usize,
    pub kmeans_iter: usize,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self { n_components: 2, max_iter: 100, tol: 1e-6, reg_covar: 1e-6, max_restarts: 5, kmeans_iter: 20 }
    }
}

#[derive(Clone, Debug)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    /// Mean per-sample log-likelihood after each EM iteration.
    pub log_likelihood_trace: Vec<f64>,
    chols: Vec<Cholesky<f64, Dyn>>,
}

struct Degenerate;

impl GaussianMixture {
    /// Fits by EM from a k-means++ start, restarting from a fresh seeding
    /// when a component collapses.
    pub fn fit<R: Rng + ?Sized>(x: &DMatrix<f64>, opts: &GmmOptions, rng: &mut R) -> Result<Self> {
        if x.ncols() == 0 || x.nrows() == 0 {
            return Err(Error::EmptyInput("no rows to cluster".into()));
        }
        if opts.n_components == 0 || opts.n_components > x.ncols() {
            return Err(Error::InvalidParameter(format!(
                "{} components for {} rows",
                opts.n_components,
                x.ncols()
            )));
        }
        for _ in 0..=opts.max_restarts {
            if let Ok(g) = Self::fit_once(x, opts, rng) {
                return Ok(g);
            }
        }
        Err(Error::Numerical(format!(
            "Gaussian mixture degenerate after {} restarts",
            opts.max_restarts
        )))
    }

    fn fit_once<R: Rng + ?Sized>(x: &DMatrix<f64>, opts: &GmmOptions, rng: &mut R) -> std::result::Result<Self, Degenerate> {
        let assign = kmeans(x, opts.n_components, opts.kmeans_iter, rng);
        let k = opts.n_components;
        let mut resp = DMatrix::zeros(k, x.ncols());
        for (j, &c) in assign.iter().enumerate() {
            resp[(c, j)] = 1.0;
        }
        let mut g = Self::m_step(x, &resp, opts.reg_covar)?;
        let mut prev = f64::NEG_INFINITY;
        for _ in 0..opts.max_iter {
            let (ll, r) = g.e_step(x);
            g.log_likelihood_trace.push(ll);
            if (ll - prev).abs() < opts.tol {
                break;
            }
            prev = ll;
            let trace = std::mem::take(&mut g.log_likelihood_trace);
            g = Self::m_step(x, &r, opts.reg_covar)?;
            g.log_likelihood_trace = trace;
        }
        Ok(g)
    }

    fn m_step(x: &DMatrix<f64>, resp: &DMatrix<f64>, reg: f64) -> std::result::Result<Self, Degenerate> {
        let (d, n) = x.shape();
        let k = resp.nrows();
        let mut weights = Vec::with_capacity(k);
        let mut means = Vec::with_capacity(k);
        let mut covariances = Vec::with_capacity(k);
        let mut chols = Vec::with_capacity(k);
        for c in 0..k {
            let r = resp.row(c).transpose();
            let nk = r.sum();
            if nk < 10.0 * f64::EPSILON * n as f64 || nk < 1e-10 {
                return Err(Degenerate);
            }
            let mean = x * &r / nk;
            let mut centred = x.clone();
            for (j, mut col) in centred.column_iter_mut().enumerate() {
                col -= &mean;
                col *= r[j].sqrt();
            }
            let mut cov = &centred * centred.transpose() / nk;
            for i in 0..d {
                cov[(i, i)] += reg;
            }
            let chol = Cholesky::new(cov.clone()).ok_or(Degenerate)?;
            weights.push(nk / n as f64);
            means.push(mean);
            covariances.push(cov);
            chols.push(chol);
        }
        Ok(Self { weights, means, covariances, log_likelihood_trace: Vec::new(), chols })
    }

    /// `log(w_c N(x | mu_c, S_c))` for every component and column.
    pub fn weighted_log_densities(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let (d, n) = x.shape();
        let k = self.weights.len();
        let mut out = DMatrix::zeros(k, n);
        for c in 0..k {
            let l = self.chols[c].l();
            let logdet = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let mut centred = x.clone();
            for mut col in centred.column_iter_mut() {
                col -= &self.means[c];
            }
            let y = l.solve_lower_triangular(&centred).expect("Cholesky factor has a positive diagonal");
            let base = self.weights[c].ln() - 0.5 * (d as f64 * (2.0 * PI).ln() + logdet);
            for j in 0..n {
                out[(c, j)] = base - 0.5 * y.column(j).norm_squared();
            }
        }
        out
    }

    /// Mean log-likelihood and responsibilities.
    fn e_step(&self, x: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let mut lp = self.weighted_log_densities(x);
        let mut total = 0.0;
        for mut col in lp.column_iter_mut() {
            let m = col.max();
            let lse = m + col.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse;
            col.apply(|v| *v = (*v - lse).exp());
        }
        (total / x.ncols() as f64, lp)
    }

    pub fn mean_log_likelihood(&self, x: &DMatrix<f64>) -> f64 {
        self.e_step(x).0
    }

    /// Most responsible component per column.
    pub fn predict_component(&self, x: &DMatrix<f64>) -> Vec<usize> {
        self.weighted_log_densities(x).column_iter().map(|c| c.argmax().0).collect()
    }
}

/// k-means++ seeding followed by Lloyd iterations; returns assignments.
fn kmeans<R: Rng + ?Sized>(x: &DMatrix<f64>, k: usize, iters: usize, rng: &mut R) -> Vec<usize> {
    let n = x.ncols();
    let dist2 = |j: usize, c: &DVector<f64>| (x.column(j) - c).norm_squared();
    let mut centres = vec![x.column(rng.random_range(0..n)).into_owned()];
    while centres.len() < k {
        let d: Vec<f64> = (0..n).map(|j| centres.iter().map(|c| dist2(j, c)).fold(f64::INFINITY, f64::min)).collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (j, v) in d.iter().enumerate() {
                if u < *v {
                    idx = j;
                    break;
                }
                u -= v;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centres.push(x.column(pick).into_owned());
    }
    let mut assign = vec![0; n];
    for _ in 0..iters.max(1) {
        let mut changed = false;
        for (j, a) in assign.iter_mut().enumerate() {
            let best = (0..k)
                .map(|c| (c, dist2(j, &centres[c])))
                .fold((0, f64::INFINITY), |acc, v| if v.1 < acc.1 { v } else { acc })
                .0;
            if best != *a {
                *a = best;
                changed = true;
            }
        }
        for (c, centre) in centres.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&j| assign[j] == c).collect();
            if !members.is_empty() {
                *centre = members.iter().fold(DVector::zeros(x.nrows()), |s, &j| s + x.column(j)) / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    assign
}

/// Maps each cluster to the majority anchor class in it (ties to the lower
/// class). Clusters holding no anchors take the overall anchor majority.
pub fn map_clusters_to_classes(clusters: &[usize], n_clusters: usize, anchors: &[(usize, usize)], n_classes: usize) -> Result<Vec<usize>> {
    if anchors.is_empty() {
        return Err(Error::EmptyInput("no labeled anchors".into()));
    }
    let mut counts = vec![vec![0usize; n_classes]; n_clusters];
    let mut overall = vec![0usize; n_classes];
    for &(row, class) in anchors {
        let cl = *clusters
            .get(row)
            .ok_or_else(|| Error::Dimension(format!("anchor row {row} out of {}", clusters.len())))?;
        if class >= n_classes {
            return Err(Error::InvalidParameter(format!("anchor class {class} with {n_classes} classes")));
        }
        counts[cl][class] += 1;
        overall[class] += 1;
    }
    let majority = |c: &[usize]| c.iter().enumerate().fold((0, 0), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc }).0;
    let fallback = majority(&overall);
    Ok(counts.iter().map(|c| if c.iter().all(|&v| v == 0) { fallback } else { majority(c) }).collect())
}

/// Two-stage baseline: an unsupervised mixture whose components are named
/// by anchor majority.
#[derive(Clone, Debug)]
pub struct GmmClassifier {
    pub mixture: GaussianMixture,
    pub component_class: Vec<usize>,
    pub n_classes: usize,
}

impl Classifier for GmmClassifier {
    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<usize>> {
        if x.nrows() != self.mixture.means[0].len() {
            return Err(Error::Dimension(format!("{} features for a mixture over {}", x.nrows(), self.mixture.means[0].len())));
        }
        Ok(self.mixture.predict_component(x).into_iter().map(|c| self.component_class[c]).collect())
    }
}

/// Fits a mixture to `rows` (`dim x n`) and labels components from
/// `anchors` given as `(column, class)` pairs.
pub fn gmm_baseline<R: Rng + ?Sized>(
    rows: &DMatrix<f64>,
    anchors: &[(usize, usize)],
    n_classes: usize,
    opts: &GmmOptions,
    rng: &mut R,
) -> Result<GmmClassifier> {
    let mixture = GaussianMixture::fit(rows, opts, rng)?;
    let clusters = mixture.predict_component(rows);
    let component_class = map_clusters_to_classes(&clusters, opts.n_components, anchors, n_classes)?;
    Ok(GmmClassifier { mixture, component_class, n_classes })
}

/// Labels every row by mixture clustering and anchor majority. The error
/// estimate is the fraction of anchors whose cluster maps to another class.
pub fn cluster_label<R: Rng + ?Sized>(
    rows: &DMatrix<f64>,
    anchors: &[(usize, usize)],
    n_classes: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, f64)> {
    let opts = GmmOptions { n_components: n_classes, ..GmmOptions::default() };
    let g = gmm_baseline(rows, anchors, n_classes, &opts, rng)?;
    let labels = g.predict(rows)?;
    let wrong = anchors.iter().filter(|&&(r, c)| labels[r] != c).count();
    Ok((labels, wrong as f64 / anchors.len() as f64))
}
