//! Factorizations of the marginal covariance `c I + tau K` used by the
//! likelihood, the Gibbs updates and posterior prediction.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{BmimError, Result};
use crate::kernels::KernelFactor;

/// Extra diagonal added once when a dense Cholesky fails.
pub const ESCALATED_JITTER: f64 = 1e-6;

/// Cholesky with a single jitter escalation on failure.
pub fn cholesky_with_escalation(m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(BmimError::NonFinite("matrix to factor has non-finite entries".into()));
    }
    match m.clone().cholesky() {
        Some(c) => Ok(c),
        None => {
            let scale = m.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
            let n = m.nrows();
            let bumped = m + DMatrix::<f64>::identity(n, n) * (ESCALATED_JITTER * scale);
            bumped
                .cholesky()
                .ok_or_else(|| BmimError::Numerical("Cholesky failed after jitter escalation".into()))
        }
    }
}

/// Factor of `V = c I + tau K` where `c = 1 + tau * jitter`.
#[derive(Debug, Clone)]
pub enum CovFactor {
    Dense {
        chol: Cholesky<f64, Dyn>,
    },
    LowRank {
        g: DMatrix<f64>,
        /// Cholesky of `(c / tau) I + G^T G`.
        inner: Cholesky<f64, Dyn>,
        c: f64,
        log_det: f64,
    },
}

impl CovFactor {
    pub fn new(kernel: &KernelFactor, tau: f64, jitter: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(BmimError::Numerical(format!("kernel scale {tau} is not positive")));
        }
        let c = 1.0 + tau * jitter;
        match kernel {
            KernelFactor::Dense(k) => {
                let n = k.nrows();
                let mut v = k * tau;
                for i in 0..n {
                    v[(i, i)] += c;
                }
                Ok(CovFactor::Dense {
                    chol: cholesky_with_escalation(v)?,
                })
            }
            KernelFactor::LowRank { g, gtg } => {
                let n = g.nrows();
                let r = g.ncols();
                let mut s = gtg.clone();
                for i in 0..r {
                    s[(i, i)] += c / tau;
                }
                let inner = cholesky_with_escalation(s)?;
                let log_det_s: f64 = 2.0 * inner.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                let log_det = n as f64 * c.ln() + log_det_s + r as f64 * (tau / c).ln();
                Ok(CovFactor::LowRank {
                    g: g.clone(),
                    inner,
                    c,
                    log_det,
                })
            }
        }
    }

    pub fn n(&self) -> usize {
        match self {
            CovFactor::Dense { chol } => chol.l_dirty().nrows(),
            CovFactor::LowRank { g, .. } => g.nrows(),
        }
    }

    pub fn log_det(&self) -> f64 {
        match self {
            CovFactor::Dense { chol } => 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>(),
            CovFactor::LowRank { log_det, .. } => *log_det,
        }
    }

    /// `V^{-1} b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            CovFactor::Dense { chol } => chol.solve(b),
            CovFactor::LowRank { g, inner, c, .. } => {
                let gtb = g.tr_mul(b);
                let t = inner.solve(&gtb);
                (b - g * t) / *c
            }
        }
    }

    /// `V^{-1} B`.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            CovFactor::Dense { chol } => chol.solve(b),
            CovFactor::LowRank { g, inner, c, .. } => {
                let gtb = g.tr_mul(b);
                let t = inner.solve(&gtb);
                (b - g * t) / *c
            }
        }
    }

    /// `b^T V^{-1} b`.
    pub fn quad_form(&self, b: &DVector<f64>) -> f64 {
        b.dot(&self.solve(b))
    }
}

/// Log density of `N(mean, sigma2 V)` at `y` given a factor of `V`.
pub fn gaussian_log_density(resid: &DVector<f64>, sigma2: f64, factor: &CovFactor) -> f64 {
    let n = resid.len() as f64;
    let q = factor.quad_form(resid);
    -0.5 * n * (2.0 * std::f64::consts::PI * sigma2).ln() - 0.5 * factor.log_det() - 0.5 * q / sigma2
}

/// Draws `N(0, S)` for a symmetric PSD `S`, escalating jitter if needed.
pub fn sample_mvn_zero(cov: &DMatrix<f64>, standard_normals: &DVector<f64>) -> Result<DVector<f64>> {
    let n = cov.nrows();
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    let scale = cov.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    let mut jitter = 1e-12 * scale;
    for _ in 0..8 {
        let m = cov + DMatrix::<f64>::identity(n, n) * jitter;
        if let Some(ch) = m.cholesky() {
            return Ok(ch.l() * standard_normals);
        }
        jitter *= 100.0;
    }
    Err(BmimError::Numerical("conditional covariance could not be factored".into()))
}
