//! Kernel functions on index space and kernel matrix construction.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{BmimError, Result};

pub const DEFAULT_JITTER: f64 = 1e-8;
pub const MAX_JITTER: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
    Polynomial { degree: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Added to the kernel matrix diagonal.
    pub jitter: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::gaussian()
    }
}

impl KernelSpec {
    pub fn gaussian() -> Self {
        KernelSpec {
            family: KernelFamily::Gaussian,
            jitter: DEFAULT_JITTER,
        }
    }

    pub fn polynomial(degree: u32) -> Self {
        KernelSpec {
            family: KernelFamily::Polynomial { degree },
            jitter: DEFAULT_JITTER,
        }
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let KernelFamily::Polynomial { degree } = self.family {
            if degree == 0 {
                return Err(BmimError::Config("polynomial degree must be at least 1".into()));
            }
        }
        if !(0.0..=MAX_JITTER).contains(&self.jitter) {
            return Err(BmimError::Config(format!(
                "jitter must lie in [0, {MAX_JITTER}], got {}",
                self.jitter
            )));
        }
        Ok(())
    }

    #[inline]
    fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Gaussian => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-d2).exp()
            }
            KernelFamily::Polynomial { degree } => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                (1.0 + dot).powi(degree as i32)
            }
        }
    }
}

/// Kernel between two index vectors, without jitter.
pub fn kernel_value(e: &[f64], e_prime: &[f64], spec: &KernelSpec) -> Result<f64> {
    if e.len() != e_prime.len() {
        return Err(BmimError::Dimension(format!(
            "index vectors of length {} and {}",
            e.len(),
            e_prime.len()
        )));
    }
    Ok(spec.eval_unchecked(e, e_prime))
}

fn rows_of(e: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..e.nrows()).map(|i| e.row(i).iter().copied().collect()).collect()
}

fn check_finite(e: &DMatrix<f64>) -> Result<()> {
    if e.iter().any(|v| !v.is_finite()) {
        return Err(BmimError::NonFinite("index matrix contains non-finite entries".into()));
    }
    Ok(())
}

/// `n x n` kernel matrix with jitter on the diagonal. The upper triangle is
/// computed and mirrored, so the result is exactly symmetric.
pub fn kernel_matrix(e: &DMatrix<f64>, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    check_finite(e)?;
    let mut k = kernel_matrix_raw(e, spec);
    for i in 0..k.nrows() {
        k[(i, i)] += spec.jitter;
    }
    Ok(k)
}

/// Kernel matrix without jitter. Caller guarantees finite input.
pub(crate) fn kernel_matrix_raw(e: &DMatrix<f64>, spec: &KernelSpec) -> DMatrix<f64> {
    let n = e.nrows();
    let rows = rows_of(e);
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = spec.eval_unchecked(&rows[i], &rows[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Rectangular cross-kernel between the rows of `a` and the rows of `b`.
pub fn cross_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(BmimError::Dimension(format!(
            "index matrices with {} and {} columns",
            a.ncols(),
            b.ncols()
        )));
    }
    check_finite(a)?;
    check_finite(b)?;
    let ra = rows_of(a);
    let rb = rows_of(b);
    Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| spec.eval_unchecked(&ra[i], &rb[j])))
}

/// Residual-diagonal threshold for the pivoted factorization, relative to the
/// largest kernel diagonal entry.
pub(crate) const LOW_RANK_TOL: f64 = 1e-12;

/// Factorization of a jitter-free kernel matrix, either as an exact dense
/// matrix or as `G G^T` from a pivoted Cholesky that stopped once every
/// residual diagonal entry fell below `LOW_RANK_TOL` times the largest
/// diagonal.
#[derive(Debug, Clone)]
pub enum KernelFactor {
    Dense(DMatrix<f64>),
    LowRank {
        g: DMatrix<f64>,
        gtg: DMatrix<f64>,
    },
}

impl KernelFactor {
    /// Builds a factor for the rows of `e`, preferring the low-rank form when
    /// the numerical rank stays at or below `max_rank`.
    pub fn new(e: &DMatrix<f64>, spec: &KernelSpec, max_rank: usize) -> Result<Self> {
        check_finite(e)?;
        let rows = rows_of(e);
        if let Some(g) = pivoted_cholesky(&rows, spec, max_rank) {
            let gtg = g.transpose() * &g;
            return Ok(KernelFactor::LowRank { g, gtg });
        }
        Ok(KernelFactor::Dense(kernel_matrix_raw(e, spec)))
    }

    pub fn dense(e: &DMatrix<f64>, spec: &KernelSpec) -> Result<Self> {
        check_finite(e)?;
        Ok(KernelFactor::Dense(kernel_matrix_raw(e, spec)))
    }

    pub fn n(&self) -> usize {
        match self {
            KernelFactor::Dense(k) => k.nrows(),
            KernelFactor::LowRank { g, .. } => g.nrows(),
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            KernelFactor::Dense(k) => k.nrows(),
            KernelFactor::LowRank { g, .. } => g.ncols(),
        }
    }

    /// Reconstructed jitter-free kernel matrix.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        match self {
            KernelFactor::Dense(k) => k.clone(),
            KernelFactor::LowRank { g, .. } => g * g.transpose(),
        }
    }
}

fn pivoted_cholesky(rows: &[Vec<f64>], spec: &KernelSpec, max_rank: usize) -> Option<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    let mut diag: Vec<f64> = rows.iter().map(|r| spec.eval_unchecked(r, r)).collect();
    let scale = diag.iter().fold(0.0f64, |a, &b| a.max(b)).max(f64::MIN_POSITIVE);
    let tol = LOW_RANK_TOL * scale;
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut pivoted = vec![false; n];
    loop {
        let mut best = usize::MAX;
        let mut best_val = tol;
        for (i, &d) in diag.iter().enumerate() {
            if !pivoted[i] && d > best_val {
                best_val = d;
                best = i;
            }
        }
        if best == usize::MAX {
            break;
        }
        if cols.len() >= max_rank {
            return None;
        }
        let piv = best;
        pivoted[piv] = true;
        let inv = 1.0 / best_val.sqrt();
        let prow = &rows[piv];
        let mut col: Vec<f64> = rows.iter().map(|r| spec.eval_unchecked(r, prow)).collect();
        for c in &cols {
            let gp = c[piv];
            if gp != 0.0 {
                for (v, &gc) in col.iter_mut().zip(c) {
                    *v -= gc * gp;
                }
            }
        }
        for (i, v) in col.iter_mut().enumerate() {
            if pivoted[i] && i != piv {
                *v = 0.0;
            } else {
                *v *= inv;
            }
        }
        for (i, v) in col.iter().enumerate() {
            diag[i] -= v * v;
        }
        diag[piv] = 0.0;
        cols.push(col);
    }
    let r = cols.len();
    let mut g = DMatrix::zeros(n, r);
    for (j, c) in cols.iter().enumerate() {
        g.set_column(j, &nalgebra::DVector::from_column_slice(c));
    }
    Some(g)
}
