//! Small dense linear-algebra helpers shared by the estimators and bounds.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Condition-number guard for Fisher/CRLB inversions.
pub const FIM_CONDITION_GUARD: f64 = 1e12;
/// Equilibrated condition number above which a WLS solve is flagged.
pub const RANK_WARNING_CONDITION: f64 = 1e10;
/// Equilibrated condition number above which a WLS solve is rejected.
pub const RANK_ERROR_CONDITION: f64 = 1e12;

pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let m: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(n, m);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Condition number of a symmetric matrix after Jacobi (diagonal) scaling,
/// along with the index of the coordinate dominating the weakest direction.
pub fn equilibrated_condition(m: &DMatrix<f64>) -> (f64, usize) {
    let n = m.nrows();
    let scale: Vec<f64> = (0..n)
        .map(|i| {
            let d = m[(i, i)].abs();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let scaled = DMatrix::from_fn(n, n, |i, j| m[(i, j)] * scale[i] * scale[j]);
    let eig = SymmetricEigen::new(symmetrize(&scaled));
    let (mut imin, mut imax) = (0, 0);
    for i in 0..n {
        if eig.eigenvalues[i] < eig.eigenvalues[imin] {
            imin = i;
        }
        if eig.eigenvalues[i] > eig.eigenvalues[imax] {
            imax = i;
        }
    }
    let lmin = eig.eigenvalues[imin];
    let lmax = eig.eigenvalues[imax];
    let weakest = eig.eigenvectors.column(imin).iamax();
    let cond = if lmin <= 0.0 { f64::INFINITY } else { lmax / lmin };
    (cond, weakest)
}

/// Inverts a symmetric positive-definite matrix, refusing when its
/// equilibrated condition number exceeds `guard`. `names` labels the
/// coordinates for the error message.
pub fn spd_inverse(m: &DMatrix<f64>, guard: f64, names: Option<&[&str]>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::DimensionMismatch(format!("{}x{} is not square", n, m.ncols())));
    }
    for i in 0..n {
        if m[(i, i)] <= 0.0 || !m[(i, i)].is_finite() {
            return Err(Error::Unidentifiable { param: label(names, i), condition: f64::INFINITY });
        }
    }
    let (cond, weakest) = equilibrated_condition(m);
    if !(cond <= guard) {
        return Err(Error::Unidentifiable { param: label(names, weakest), condition: cond });
    }
    let chol = symmetrize(m).cholesky().ok_or_else(|| Error::NotPositiveDefinite("cholesky failed".into()))?;
    Ok(symmetrize(&chol.inverse()))
}

fn label(names: Option<&[&str]>, i: usize) -> String {
    names.and_then(|n| n.get(i).map(|s| s.to_string())).unwrap_or_else(|| format!("#{i}"))
}

/// Lower Cholesky factor of a covariance matrix.
pub fn cholesky_lower(q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    symmetrize(q).cholesky().map(|c| c.l()).ok_or_else(|| Error::NotPositiveDefinite("covariance".into()))
}

#[derive(Debug, Clone)]
pub struct LsqSolution {
    pub x: DVector<f64>,
    /// `(Gᵀ C⁻¹ G)⁻¹`
    pub cov: DMatrix<f64>,
    /// Condition number of the column-equilibrated whitened design matrix.
    pub condition: f64,
}

/// Solves `min (h - G x)ᵀ C⁻¹ (h - G x)` through the Cholesky whitening of
/// `C` and an SVD of the column-equilibrated whitened design matrix.
pub fn weighted_lstsq(g: &DMatrix<f64>, h: &DVector<f64>, c: &DMatrix<f64>) -> Result<LsqSolution> {
    let (rows, cols) = g.shape();
    if h.len() != rows || c.nrows() != rows || c.ncols() != rows {
        return Err(Error::DimensionMismatch(format!(
            "G is {rows}x{cols}, h has {}, C is {}x{}",
            h.len(),
            c.nrows(),
            c.ncols()
        )));
    }
    if rows < cols {
        return Err(Error::UnderDetermined { rows, cols });
    }
    let l = cholesky_lower(c)?;
    let a = l.solve_lower_triangular(g).ok_or_else(|| Error::NotPositiveDefinite("whitening".into()))?;
    let y = l.solve_lower_triangular(h).ok_or_else(|| Error::NotPositiveDefinite("whitening".into()))?;

    let scale: Vec<f64> = (0..cols)
        .map(|j| {
            let n = a.column(j).norm();
            if n > 0.0 {
                n
            } else {
                1.0
            }
        })
        .collect();
    let a_eq = DMatrix::from_fn(rows, cols, |i, j| a[(i, j)] / scale[j]);
    let svd = a_eq.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition <= RANK_ERROR_CONDITION) {
        return Err(Error::RankDeficient { condition });
    }
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let uty = u.transpose() * &y;
    let mut xs = DVector::<f64>::zeros(cols);
    let mut inner = DMatrix::<f64>::zeros(cols, cols);
    for k in 0..cols {
        let s = svd.singular_values[k];
        let coeff = uty[k] / s;
        for j in 0..cols {
            xs[j] += vt[(k, j)] * coeff;
        }
        for i in 0..cols {
            for j in 0..cols {
                inner[(i, j)] += vt[(k, i)] * vt[(k, j)] / (s * s);
            }
        }
    }
    let x = DVector::from_fn(cols, |j, _| xs[j] / scale[j]);
    let cov = DMatrix::from_fn(cols, cols, |i, j| inner[(i, j)] / (scale[i] * scale[j]));
    Ok(LsqSolution { x, cov: symmetrize(&cov), condition })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lstsq_matches_normal_equations() {
        let g = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let h = DVector::from_vec(vec![1.0, 2.9, 5.1, 7.0]);
        let c = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 0.5, 1.0]));
        let sol = weighted_lstsq(&g, &h, &c).unwrap();
        let w = c.clone().try_inverse().unwrap();
        let n = g.transpose() * &w * &g;
        let x = n.clone().try_inverse().unwrap() * g.transpose() * &w * &h;
        assert!((sol.x - x).norm() < 1e-12);
        assert!((sol.cov - n.try_inverse().unwrap()).norm() < 1e-12);
    }

    #[test]
    fn rank_deficient_columns_are_rejected() {
        let g = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let h = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let c = DMatrix::identity(3, 3);
        assert!(matches!(weighted_lstsq(&g, &h, &c), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn under_determined_is_reported() {
        let g = DMatrix::zeros(2, 3);
        let h = DVector::zeros(2);
        let c = DMatrix::identity(2, 2);
        assert!(matches!(weighted_lstsq(&g, &h, &c), Err(Error::UnderDetermined { rows: 2, cols: 3 })));
    }

    #[test]
    fn spd_inverse_names_the_dead_coordinate() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        match spd_inverse(&m, FIM_CONDITION_GUARD, Some(&["a", "b"])) {
            Err(Error::Unidentifiable { param, .. }) => assert_eq!(param, "b"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
