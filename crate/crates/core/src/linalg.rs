//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = m.clone().cholesky()?.inverse();
    Some(symmetrize(&inv))
}

pub fn spd_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    Some(m.clone().cholesky()?.solve(b))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Ratio of largest to smallest eigenvalue; infinite when the smallest is
/// not positive.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 || !min.is_finite() || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Checks symmetry and positive semi-definiteness up to a relative tolerance.
pub fn is_symmetric_psd(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    if (m - m.transpose()).iter().any(|v| v.abs() > rel_tol * scale) {
        return false;
    }
    if m.nrows() == 0 {
        return true;
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    eig.eigenvalues.min() >= -rel_tol * scale
}

/// A factor `L` with `L Lᵀ = m` for symmetric positive semi-definite `m`.
///
/// Cholesky is tried first; otherwise negative eigenvalues within
/// `rel_tol` of the largest are clipped to zero. Returns `None` when the
/// matrix is materially indefinite.
pub fn psd_factor(m: &DMatrix<f64>, rel_tol: f64) -> Option<DMatrix<f64>> {
    let s = symmetrize(m);
    if let Some(ch) = s.clone().cholesky() {
        return Some(ch.l());
    }
    let eig = SymmetricEigen::new(s);
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if eig.eigenvalues.iter().any(|&l| l < -rel_tol * max) {
        return None;
    }
    let mut factor = eig.eigenvectors.clone();
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        let root = l.max(0.0).sqrt();
        factor.column_mut(j).scale_mut(root);
    }
    Some(factor)
}

/// Numerical rank of a rows-as-observations design via its singular values.
pub fn rank(x: &DMatrix<f64>, rel_tol: f64) -> usize {
    if x.nrows() == 0 || x.ncols() == 0 {
        return 0;
    }
    let sv = x.clone().svd(false, false).singular_values;
    let max = sv.max();
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_of_zero_matrix_is_zero() {
        let z = DMatrix::<f64>::zeros(3, 3);
        let l = psd_factor(&z, 1e-8).unwrap();
        assert!(l.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn factor_reconstructs_singular_psd() {
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let m = &v * v.transpose();
        let l = psd_factor(&m, 1e-8).unwrap();
        let back = &l * l.transpose();
        assert!((back - m).abs().max() < 1e-12);
    }

    #[test]
    fn indefinite_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(psd_factor(&m, 1e-8).is_none());
        assert!(!is_symmetric_psd(&m, 1e-8));
    }

    #[test]
    fn condition_number_of_diag() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        assert!((condition_number(&m) - 4.0).abs() < 1e-12);
    }
}
