//! Small dense linear-algebra helpers shared by every module.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, ZdpError};

/// Ensures every entry is finite.
pub fn ensure_finite(m: &DMatrix<f64>) -> Result<()> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Err(ZdpError::NonFinite { row: i, col: j });
            }
        }
    }
    Ok(())
}

pub fn ensure_finite_vec(v: &DVector<f64>) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(ZdpError::NonFinite { row: i, col: 0 }),
        None => Ok(()),
    }
}

/// Largest singular value (spectral norm). Zero for empty matrices.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(0.0_f64, |acc, &s| acc.max(s))
}

/// Singular values sorted in nonincreasing order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Full right singular system of an `n x d` matrix: `d` singular values
/// (zero-padded when `n < d`) with the matching `d x d` orthogonal `V`,
/// sorted by nonincreasing singular value.
pub fn right_singular_system(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = m.shape();
    let padded = if n >= d {
        m.clone()
    } else {
        let mut p = DMatrix::zeros(d, d);
        p.rows_mut(0, n).copy_from(m);
        p
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let values = order.iter().map(|&i| svd.singular_values[i]).collect();
    let v = DMatrix::from_fn(d, d, |r, c| v_t[(order[c], r)]);
    (values, v)
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// nondecreasing order and eigenvectors as matching columns.
pub fn sym_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let d = m.nrows();
    let sym = symmetrize(m);
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(d, d, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// `(M + M^T) / 2`, exactly symmetric.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let d = m.nrows();
    DMatrix::from_fn(d, d, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]))
}

/// Thin QR with a sign-fixed (nonnegative) diagonal of `R`.
///
/// Fails with [`ZdpError::RankCollapse`] when a pivot falls below
/// `collapse_tol * max|r_ii|` (pass `0.0` to disable).
pub fn thin_qr(m: &DMatrix<f64>, collapse_tol: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = m.ncols();
    if k == 0 {
        return Ok((DMatrix::zeros(m.nrows(), 0), DMatrix::zeros(0, 0)));
    }
    let qr = m.clone().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    let scale = (0..k).fold(0.0_f64, |acc, j| acc.max(r[(j, j)].abs()));
    for j in 0..k {
        let pivot = r[(j, j)];
        if collapse_tol > 0.0 && pivot.abs() <= collapse_tol * scale {
            return Err(ZdpError::RankCollapse {
                column: j,
                pivot: pivot.abs(),
            });
        }
        if pivot < 0.0 {
            q.column_mut(j).neg_mut();
            r.row_mut(j).neg_mut();
        }
    }
    Ok((q, r))
}

/// Largest absolute entry of `U^T U - I`.
pub fn orthonormality_defect(u: &DMatrix<f64>) -> f64 {
    let gram = u.transpose() * u;
    let k = gram.nrows();
    let mut worst = 0.0_f64;
    for i in 0..k {
        for j in 0..k {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

pub fn ensure_orthonormal(u: &DMatrix<f64>, tol: f64) -> Result<()> {
    let defect = orthonormality_defect(u);
    if defect > tol {
        return Err(ZdpError::NotOrthonormal(defect));
    }
    Ok(())
}

/// Least-squares fit `y = slope * x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}
