//! Subspace utilities backed by `nalgebra`'s SVD and QR.

use crate::tensor::Matrix;

/// Singular values in nonincreasing order.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    let svd = m.to_nalgebra().svd(false, false);
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Count of singular values above `tol * σ_max`.
pub fn numerical_rank(m: &Matrix, tol: f64) -> usize {
    let s = singular_values(m);
    let top = s.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > tol * top).count()
}

/// Orthonormal basis (as columns) of the column space of `m`, using the left
/// singular vectors whose singular values exceed `tol * σ_max`.
pub fn column_basis(m: &Matrix, tol: f64) -> Option<Matrix> {
    let svd = m.to_nalgebra().svd(true, false);
    let u = svd.u.as_ref()?;
    let s = &svd.singular_values;
    let top = s.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return None;
    }
    let keep: Vec<usize> = (0..s.len()).filter(|&i| s[i] > tol * top).collect();
    let mut out = Matrix::zeros(m.rows(), keep.len());
    for (c, &i) in keep.iter().enumerate() {
        for r in 0..m.rows() {
            out.set(r, c, u[(r, i)]);
        }
    }
    Some(out)
}

/// Thin QR orthonormalization of the columns of a full-column-rank matrix.
pub fn orthonormalize_columns(m: &Matrix) -> Matrix {
    let q = m.to_nalgebra().qr().q();
    Matrix::from_nalgebra(&q.columns(0, m.cols()).into_owned())
}

/// Principal angles (radians, nondecreasing) between the column spaces of
/// two matrices with orthonormal columns.
///
/// Computed from sines (`‖(I - Qa Qaᵀ) Qb‖` singular values), which keeps
/// small angles accurate.
pub fn principal_angles(qa: &Matrix, qb: &Matrix) -> Vec<f64> {
    let a = qa.to_nalgebra();
    let b = qb.to_nalgebra();
    let residual = &b - &a * (a.transpose() * &b);
    let mut sines: Vec<f64> = residual.svd(false, false).singular_values.iter().copied().collect();
    sines.sort_by(|x, y| x.total_cmp(y));
    sines.into_iter().map(|s| s.clamp(0.0, 1.0).asin()).collect()
}
