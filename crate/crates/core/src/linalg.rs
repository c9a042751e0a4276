//! Small dense helpers shared by the solvers.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

use crate::{Error, Mat, Result, Vector};

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn asymmetry(m: &Mat) -> f64 {
    (m - m.transpose()).norm()
}

pub fn blkdiag(blocks: &[&Mat]) -> Mat {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn hstack(blocks: &[&Mat]) -> Mat {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        out.view_mut((0, c), (rows, b.ncols())).copy_from(*b);
        c += b.ncols();
    }
    out
}

pub fn vstack(blocks: &[&Mat]) -> Mat {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(*b);
        r += b.nrows();
    }
    out
}

pub fn solve(a: &Mat, b: &Mat, context: &str) -> Result<Mat> {
    if a.nrows() != a.ncols() || a.nrows() != b.nrows() {
        return Err(Error::dim(format!("{context}: cannot solve {}x{} system with {} rows", a.nrows(), a.ncols(), b.nrows())));
    }
    let lu = a.clone().lu();
    let x = lu.solve(b).ok_or_else(|| Error::Singular(context.to_string()))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(context.to_string()));
    }
    Ok(x)
}

pub fn inverse(a: &Mat, context: &str) -> Result<Mat> {
    solve(a, &Mat::identity(a.nrows(), a.nrows()), context)
}

pub fn min_eig_sym(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

pub fn max_eig_sym(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    SymmetricEigen::new(symmetrize(m)).eigenvalues.max()
}

/// Any `C` with `CᵀC = Q`, from the eigendecomposition with negative
/// eigenvalues clipped to zero.
pub fn psd_sqrt(q: &Mat) -> Mat {
    let eig = SymmetricEigen::new(symmetrize(q));
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Mat::from_diagonal(&d) * eig.eigenvectors.transpose()
}

pub fn spectral_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Largest singular value estimated by power iteration on `MᵀM`.
pub fn power_norm(m: &Mat, steps: usize) -> f64 {
    let n = m.ncols();
    if n == 0 || m.nrows() == 0 {
        return 0.0;
    }
    // A fixed, non-degenerate start keeps the estimate deterministic.
    let mut v = Vector::from_fn(n, |i, _| 1.0 + 0.1 * ((i * 7919) % 13) as f64);
    v /= v.norm();
    let mut sigma = 0.0;
    for _ in 0..steps {
        let w = m.transpose() * (m * &v);
        let nw = w.norm();
        if nw == 0.0 {
            return 0.0;
        }
        sigma = nw.sqrt();
        v = w / nw;
    }
    // Power iteration approaches from below; take the larger of the
    // Rayleigh estimate and the final norm.
    sigma.max((m * &v).norm())
}

pub fn mat_pow(a: &Mat, k: usize) -> Mat {
    let mut out = Mat::identity(a.nrows(), a.ncols());
    for _ in 0..k {
        out = &out * a;
    }
    out
}

pub fn to_complex(m: &Mat) -> DMatrix<Complex64> {
    m.map(|v| Complex64::new(v, 0.0))
}

/// Numerical rank with singular values below `tol·max(1, σ_max)` treated as zero.
pub fn complex_rank(m: &DMatrix<Complex64>, tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let scale = sv.max().max(1.0);
    sv.iter().filter(|&&s| s > tol * scale).count()
}

/// Row block `r` (of height `h`) of a stacked matrix.
pub fn rows_block(m: &Mat, r: usize, h: usize) -> Mat {
    m.rows(r * h, h).into_owned()
}

pub fn quad(x: &Vector, p: &Mat) -> f64 {
    x.dot(&(p * x))
}
