//! Orthonormal bases for smoothly varying weights over ordered exposures
//! (for example, one pollutant measured at T time points).

use nalgebra::DMatrix;

use crate::error::{BmimError, Result};

fn cube_plus(v: f64) -> f64 {
    if v > 0.0 {
        v * v * v
    } else {
        0.0
    }
}

/// Natural cubic spline basis with `df` knots evaluated at `t = 1..=len`,
/// orthonormalized so that `Psi^T Psi = I`. Columns span constants and
/// linear trends plus `df - 2` curvature terms (truncated power form).
pub fn natural_spline_basis(len: usize, df: usize) -> Result<DMatrix<f64>> {
    if df == 0 || df > len {
        return Err(BmimError::Structure(format!(
            "natural spline df must be in 1..={len}, got {df}"
        )));
    }
    // rescale time to [0, 1] for conditioning
    let t: Vec<f64> = (0..len)
        .map(|i| if len == 1 { 0.0 } else { i as f64 / (len - 1) as f64 })
        .collect();
    let knots: Vec<f64> = (0..df)
        .map(|k| if df == 1 { 0.0 } else { k as f64 / (df - 1) as f64 })
        .collect();
    let last = knots[df - 1];
    let d = |k: usize, x: f64| (cube_plus(x - knots[k]) - cube_plus(x - last)) / (last - knots[k]);

    let raw = DMatrix::from_fn(len, df, |i, j| match j {
        0 => 1.0,
        1 => t[i] - 0.5,
        _ => {
            let k = j - 2;
            d(k, t[i]) - d(df - 2, t[i])
        }
    });
    orthonormalize(raw)
}

/// Orthonormalizes the columns of `m` with a Householder QR.
pub fn orthonormalize(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (rows, cols) = m.shape();
    let qr = m.qr();
    let r = qr.r();
    for j in 0..cols {
        if r[(j, j)].abs() < 1e-10 {
            return Err(BmimError::Structure("basis columns are linearly dependent".into()));
        }
    }
    let q = qr.q();
    Ok(q.columns(0, cols.min(rows)).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_is_orthonormal() {
        for df in 1..=6 {
            let psi = natural_spline_basis(12, df).unwrap();
            assert_eq!(psi.shape(), (12, df));
            let gram = psi.transpose() * &psi;
            let dev = (gram - DMatrix::<f64>::identity(df, df)).amax();
            assert!(dev < 1e-12, "df={df} dev={dev}");
        }
    }

    #[test]
    fn basis_spans_linear_trends() {
        let psi = natural_spline_basis(10, 4).unwrap();
        let lin = DMatrix::from_fn(10, 1, |i, _| 2.0 + 0.3 * i as f64);
        let proj = &psi * (psi.transpose() * &lin);
        assert!((proj - lin).amax() < 1e-10);
    }

    #[test]
    fn rejects_bad_df() {
        assert!(natural_spline_basis(3, 4).is_err());
        assert!(natural_spline_basis(3, 0).is_err());
    }
}
