//! Small complex linear-algebra helpers shared by the channel models and
//! estimators: Hermitian Toeplitz assembly, jittered Cholesky factors of
//! block-diagonal covariances, and complex Gaussian sampling.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use num_complex::Complex;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

/// Relative jitter added to the diagonal when a factorization fails.
pub const JITTER_REL: f64 = 1e-8;

/// Hermitian Toeplitz matrix with first column `nu` (and first row `nu^H`).
/// The imaginary part of `nu[0]` is ignored.
pub fn toeplitz_hermitian(nu: &[C64]) -> DMatrix<C64> {
    let n = nu.len();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            C64::new(nu[0].re, 0.0)
        } else if i > j {
            nu[i - j]
        } else {
            nu[j - i].conj()
        }
    })
}

/// One draw from CN(0, 1).
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

pub fn complex_normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<C64> {
    DVector::from_fn(n, |_, _| complex_normal(rng))
}

/// Zero-mean sample covariance `(1/N) sum x x^H` of the given columns.
pub fn sample_covariance(cols: &[DVector<C64>]) -> Result<DMatrix<C64>> {
    let first = cols
        .first()
        .ok_or_else(|| Error::EmptyInput("sample covariance of zero vectors".into()))?;
    let m = first.len();
    let mut acc = DMatrix::<C64>::zeros(m, m);
    for x in cols {
        if x.len() != m {
            return Err(Error::Dimension(format!("expected length {m}, got {}", x.len())));
        }
        acc.gerc(C64::new(1.0, 0.0), x, x, C64::new(1.0, 0.0));
    }
    Ok(acc / C64::new(cols.len() as f64, 0.0))
}

/// ||a - b||_F / ||b||_F.
pub fn rel_frobenius(a: &DMatrix<C64>, b: &DMatrix<C64>) -> f64 {
    (a - b).norm() / b.norm()
}

/// Cholesky factor of a block-diagonal Hermitian covariance `I_n ⊗ B`.
///
/// A dense covariance is the special case of one block.
#[derive(Clone, Debug)]
pub struct FactoredCov {
    chol: Cholesky<C64, Dyn>,
    n_blocks: usize,
    block_dim: usize,
    jitter: f64,
    logdet: f64,
}

impl FactoredCov {
    pub fn from_dense(cov: &DMatrix<C64>) -> Result<Self> {
        Self::block_diagonal(cov, 1)
    }

    /// Factor `I_{n_blocks} ⊗ block`. Falls back to `block + eps I` with
    /// `eps = JITTER_REL * mean(diag)` and then `10 eps` before giving up.
    pub fn block_diagonal(block: &DMatrix<C64>, n_blocks: usize) -> Result<Self> {
        let d = block.nrows();
        if d == 0 || block.ncols() != d || n_blocks == 0 {
            return Err(Error::Dimension(format!(
                "covariance block {}x{} with {n_blocks} blocks",
                block.nrows(),
                block.ncols()
            )));
        }
        if block.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::SingularModel("non-finite covariance entries".into()));
        }
        let scale = (0..d).map(|i| block[(i, i)].re.abs()).sum::<f64>() / d as f64;
        let eps = JITTER_REL * if scale > 0.0 { scale } else { 1.0 };
        for jitter in [0.0, eps, 10.0 * eps] {
            let mut b = block.clone();
            for i in 0..d {
                b[(i, i)] = C64::new(b[(i, i)].re + jitter, 0.0);
            }
            if let Some(chol) = Cholesky::new(b) {
                let l = chol.l_dirty();
                let positive = (0..d).all(|i| {
                    let z = l[(i, i)];
                    z.re > 0.0 && z.im.abs() <= 1e-10 * z.re
                });
                let logdet_block: f64 = (0..d).map(|i| 2.0 * l[(i, i)].re.ln()).sum();
                if !positive || !logdet_block.is_finite() {
                    continue;
                }
                return Ok(Self {
                    logdet: logdet_block * n_blocks as f64,
                    chol,
                    n_blocks,
                    block_dim: d,
                    jitter,
                });
            }
        }
        Err(Error::SingularModel(format!("block dim {d}, jitter up to {:e}", 10.0 * eps)))
    }

    pub fn dim(&self) -> usize {
        self.n_blocks * self.block_dim
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn block_dim(&self) -> usize {
        self.block_dim
    }

    /// Diagonal jitter that was needed for the factorization (0 if none).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// Lower-triangular factor of one block.
    pub fn block_factor(&self) -> DMatrix<C64> {
        self.chol.l()
    }

    /// Inverse of one diagonal block.
    pub fn block_inverse(&self) -> DMatrix<C64> {
        self.chol.inverse()
    }

    fn check(&self, n: usize) -> Result<()> {
        if n != self.dim() {
            return Err(Error::Dimension(format!(
                "vector of length {n} against covariance of dim {}",
                self.dim()
            )));
        }
        Ok(())
    }

    /// `R^{-1} v`.
    pub fn solve(&self, v: &DVector<C64>) -> Result<DVector<C64>> {
        self.check(v.len())?;
        let d = self.block_dim;
        let mut out = DVector::zeros(v.len());
        for b in 0..self.n_blocks {
            let seg = v.rows(b * d, d).clone_owned();
            out.rows_mut(b * d, d).copy_from(&self.chol.solve(&seg));
        }
        Ok(out)
    }

    /// `R^{-1} X` for a matrix with `dim()` rows.
    pub fn solve_matrix(&self, x: &DMatrix<C64>) -> Result<DMatrix<C64>> {
        self.check(x.nrows())?;
        let d = self.block_dim;
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for b in 0..self.n_blocks {
            let seg = x.rows(b * d, d).clone_owned();
            out.rows_mut(b * d, d).copy_from(&self.chol.solve(&seg));
        }
        Ok(out)
    }

    /// `v^H R^{-1} v`, computed through the triangular factor.
    pub fn quad_form(&self, v: &DVector<C64>) -> Result<f64> {
        self.check(v.len())?;
        let d = self.block_dim;
        let l = self.chol.l_dirty();
        let mut acc = 0.0;
        let mut y = vec![C64::new(0.0, 0.0); d];
        for b in 0..self.n_blocks {
            // forward substitution L y = v_b
            for i in 0..d {
                let mut s = v[b * d + i];
                for (k, yk) in y.iter().enumerate().take(i) {
                    s -= l[(i, k)] * yk;
                }
                y[i] = s / l[(i, i)];
            }
            acc += y.iter().map(|z| z.norm_sqr()).sum::<f64>();
        }
        Ok(acc)
    }

    /// Draw from CN(0, R).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<C64> {
        let d = self.block_dim;
        let l = self.chol.l_dirty();
        let mut out = DVector::zeros(self.dim());
        let mut w = vec![C64::new(0.0, 0.0); d];
        for b in 0..self.n_blocks {
            for wi in w.iter_mut() {
                *wi = complex_normal(rng);
            }
            for i in 0..d {
                let mut s = C64::new(0.0, 0.0);
                for (k, wk) in w.iter().enumerate().take(i + 1) {
                    s += l[(i, k)] * wk;
                }
                out[b * d + i] = s;
            }
        }
        out
    }
}

/// Solve the real symmetric system `F x = g`. When `F` is not positive
/// definite, Levenberg damping `F + lambda * tr(F)/n * I` is increased until
/// the factorization succeeds. Returns the solution and whether damping was
/// used.
pub fn solve_spd_damped(f: &DMatrix<f64>, g: &DVector<f64>) -> Result<(DVector<f64>, bool)> {
    let n = f.nrows();
    if let Some(ch) = Cholesky::new(f.clone()) {
        let x = ch.solve(g);
        if x.iter().all(|v| v.is_finite()) {
            return Ok((x, false));
        }
    }
    let scale = (f.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut lambda = 1e-10;
    while lambda <= 1e6 {
        let mut fd = f.clone();
        for i in 0..n {
            fd[(i, i)] += lambda * scale;
        }
        if let Some(ch) = Cholesky::new(fd) {
            let x = ch.solve(g);
            if x.iter().all(|v| v.is_finite()) {
                return Ok((x, true));
            }
        }
        lambda *= 10.0;
    }
    Err(Error::Numerical("information matrix could not be regularized".into()))
}
