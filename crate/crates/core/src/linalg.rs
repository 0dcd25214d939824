//! Small dense helpers shared by the Kalman filters.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Innovation covariances with a condition number above this are refused.
pub const MAX_CONDITION: f64 = 1e12;

/// Result of one measurement update.
#[derive(Debug, Clone)]
pub(crate) struct Update {
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
    pub innovation: DVector<f64>,
}

/// `S = R + H P Hᵀ; K = P Hᵀ S⁻¹; x += K (y − H x); P −= K H P`, symmetrized.
///
/// Returns `Err(reason)` if `S` is not numerically positive definite.
pub(crate) fn measurement_update(
    x: &DVector<f64>,
    p: &DMatrix<f64>,
    h: &DMatrix<f64>,
    y: &DVector<f64>,
    r_diag: &[f64],
) -> Result<Update, String> {
    let ph_t = p * h.transpose();
    let mut s = h * &ph_t;
    for (i, r) in r_diag.iter().enumerate() {
        s[(i, i)] += r;
    }
    check_conditioning(&s)?;
    let chol = s
        .clone()
        .cholesky()
        .ok_or_else(|| "innovation covariance is not positive definite".to_string())?;
    // K = P Hᵀ S⁻¹  <=>  S Kᵀ = H P
    let gain = chol.solve(&ph_t.transpose()).transpose();
    let innovation = y - h * x;
    let x_post = x + &gain * &innovation;
    let p_post = p - &gain * h * p;
    Ok(Update {
        x: x_post,
        p: symmetrize(p_post),
        innovation,
    })
}

fn check_conditioning(s: &DMatrix<f64>) -> Result<(), String> {
    if s.iter().any(|v| !v.is_finite()) {
        return Err("innovation covariance is not finite".into());
    }
    let (lo, hi) = if s.nrows() == 1 {
        (s[(0, 0)], s[(0, 0)])
    } else {
        let eig = SymmetricEigen::new(s.clone()).eigenvalues;
        (eig.min(), eig.max())
    };
    if lo <= 0.0 || hi / lo > MAX_CONDITION {
        return Err(format!("innovation covariance singular (eigenvalues {lo:e}..{hi:e})"));
    }
    Ok(())
}

pub(crate) fn symmetrize(p: DMatrix<f64>) -> DMatrix<f64> {
    (&p + p.transpose()) * 0.5
}

/// Submatrix with the given rows and columns.
pub(crate) fn select(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

#[cfg(test)]
pub(crate) fn select_vec(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn update_rejects_singular_innovation() {
        let x = DVector::zeros(2);
        let p = DMatrix::zeros(2, 2);
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let y = DVector::from_element(1, 1.0);
        assert!(measurement_update(&x, &p, &h, &y, &[0.0]).is_err());
        assert!(measurement_update(&x, &p, &h, &y, &[1e-3]).is_ok());
    }

    #[test]
    fn update_rejects_ill_conditioned_batch() {
        let x = DVector::zeros(2);
        let p = DMatrix::identity(2, 2) * 1e6;
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1e-9]);
        let y = DVector::zeros(2);
        assert!(measurement_update(&x, &p, &h, &y, &[1e-9, 1e-9]).is_err());
    }
}
