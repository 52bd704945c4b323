//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub fn zeros(r: usize, c: usize) -> Mat {
    Mat::zeros(r, c)
}

pub fn eye(n: usize) -> Mat {
    Mat::identity(n, n)
}

/// Block-diagonal [[a, 0], [0, b]].
pub fn blkdiag(a: &Mat, b: &Mat) -> Mat {
    block2(a, &zeros(a.nrows(), b.ncols()), &zeros(b.nrows(), a.ncols()), b)
}

/// Assembles [[a, b], [c, d]].
pub fn block2(a: &Mat, b: &Mat, c: &Mat, d: &Mat) -> Mat {
    let r = a.nrows() + c.nrows();
    let k = a.ncols() + b.ncols();
    let mut m = zeros(r, k);
    m.view_mut((0, 0), a.shape()).copy_from(a);
    m.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    m.view_mut((a.nrows(), 0), c.shape()).copy_from(c);
    m.view_mut((a.nrows(), a.ncols()), d.shape()).copy_from(d);
    m
}

/// [[a, 0], [0, 0]] padded to 2n×2n, `a` being n×n.
pub fn top_left(a: &Mat) -> Mat {
    let n = a.nrows();
    blkdiag(a, &zeros(n, n))
}

pub fn norm_inf(m: &Mat) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

pub fn is_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Solves `a x = b` by LU with partial pivoting and returns x together with
/// the ∞-norm condition number of `a`. `None` when `a` is exactly singular.
pub fn lu_solve_cond(a: &Mat, b: &Mat) -> Option<(Mat, f64)> {
    let lu = a.clone().lu();
    let inv = lu.try_inverse()?;
    let x = lu.solve(b)?;
    let cond = norm_inf(a) * norm_inf(&inv);
    Some((x, cond))
}

/// Solves `a x = b` by LU with partial pivoting.
pub fn lu_solve(a: &Mat, b: &Mat) -> Option<Mat> {
    a.clone().lu().solve(b)
}

/// Symmetric part test: max |m - mᵀ|.
pub fn asymmetry(m: &Mat) -> f64 {
    max_abs(&(m - m.transpose()))
}

/// Minimum eigenvalue of the symmetric part of `m`.
pub fn min_eig_sym(m: &Mat) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

/// Minimum absolute eigenvalue of the symmetric part of `m`.
pub fn min_abs_eig_sym(m: &Mat) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigenvalues()
        .iter()
        .map(|v| v.abs())
        .fold(f64::INFINITY, f64::min)
}

/// Horizontal concatenation [a | b].
pub fn hcat(a: &Mat, b: &Mat) -> Mat {
    let mut m = zeros(a.nrows(), a.ncols() + b.ncols());
    m.view_mut((0, 0), a.shape()).copy_from(a);
    m.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    m
}
