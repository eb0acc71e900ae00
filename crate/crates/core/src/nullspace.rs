//! Null-basis extraction, projectors, principal angles and subspace distances.
//!
//! Bases are unique only up to rotation, so downstream code compares
//! subspaces through projectors or principal angles, never column by column.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ZdpError};
use crate::linalg;

/// Singular values within this distance of the cutoff count as null.
pub const NEAR_CUTOFF_TIE: f64 = 1e-12;

/// Orthonormality tolerance for constructed bases.
pub const BASIS_ORTHONORMAL_TOL: f64 = 1e-10;

/// Orthonormality tolerance for caller-supplied bases.
pub const INPUT_ORTHONORMAL_TOL: f64 = 1e-8;

/// Token activations of one layer: `n` rows (tokens) by `d` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    data: DMatrix<f64>,
    layer_id: Option<String>,
    centered: bool,
}

impl ActivationMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(ZdpError::InvalidArgument(format!(
                "activation matrix must be at least 1x1, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        linalg::ensure_finite(&data)?;
        Ok(Self {
            data,
            layer_id: None,
            centered: false,
        })
    }

    pub fn with_layer(mut self, layer_id: impl Into<String>) -> Self {
        self.layer_id = Some(layer_id.into());
        self
    }

    /// Copy with the column mean subtracted from every row.
    pub fn centered(&self) -> Self {
        let mut data = self.data.clone();
        for mut col in data.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
        Self {
            data,
            layer_id: self.layer_id.clone(),
            centered: true,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }

    pub fn layer_id(&self) -> Option<&str> {
        self.layer_id.as_deref()
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.norm_squared()
    }
}

/// Which null space a basis describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// `ker(H)`, a subspace of the `d`-dimensional feature space.
    Right,
    /// `ker(H^T)`, a subspace of the `n`-dimensional token space.
    Left,
}

/// Singular-value truncation rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "policy", content = "value")]
pub enum CutoffPolicy {
    /// `max(n, d) * eps * sigma_max`.
    #[default]
    Default,
    /// `factor * sigma_max`.
    Relative(f64),
    /// A fixed singular-value threshold.
    Absolute(f64),
}

impl CutoffPolicy {
    pub fn resolve(&self, n: usize, d: usize, sigma_max: f64) -> Result<f64> {
        let cutoff = match *self {
            CutoffPolicy::Default => n.max(d) as f64 * f64::EPSILON * sigma_max,
            CutoffPolicy::Relative(f) => f * sigma_max,
            CutoffPolicy::Absolute(c) => c,
        };
        if !cutoff.is_finite() || cutoff < 0.0 {
            return Err(ZdpError::InvalidArgument(format!(
                "cutoff must be finite and >= 0, got {cutoff}"
            )));
        }
        Ok(cutoff)
    }
}

/// Raised when every direction is null, i.e. the input has numerical rank 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisWarning {
    RankZero,
}

/// Orthonormal basis (columns) of a right or left null space.
#[derive(Debug, Clone, PartialEq)]
pub struct NullBasis {
    basis: DMatrix<f64>,
    cutoff: f64,
    side: Side,
    warning: Option<BasisWarning>,
}

impl NullBasis {
    /// Wraps an orthonormal basis, checking `V^T V = I` to 1e-10.
    pub fn from_orthonormal(basis: DMatrix<f64>, cutoff: f64, side: Side) -> Result<Self> {
        if basis.nrows() == 0 {
            return Err(ZdpError::InvalidArgument(
                "basis must have a nonzero ambient dimension".into(),
            ));
        }
        if basis.ncols() > basis.nrows() {
            return Err(ZdpError::InvalidArgument(format!(
                "basis has {} columns in dimension {}",
                basis.ncols(),
                basis.nrows()
            )));
        }
        linalg::ensure_finite(&basis)?;
        linalg::ensure_orthonormal(&basis, BASIS_ORTHONORMAL_TOL)?;
        let warning = (basis.ncols() == basis.nrows()).then_some(BasisWarning::RankZero);
        Ok(Self {
            basis,
            cutoff,
            side,
            warning,
        })
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn k(&self) -> usize {
        self.basis.ncols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn warning(&self) -> Option<BasisWarning> {
        self.warning
    }

    pub fn projector(&self) -> Projector {
        projector_from_basis(self)
    }
}

/// Symmetric idempotent matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    matrix: DMatrix<f64>,
    rank: usize,
}

impl Projector {
    /// `U U^T` for a matrix with orthonormal columns, symmetrized exactly.
    pub fn from_columns(u: &DMatrix<f64>) -> Result<Self> {
        linalg::ensure_orthonormal(u, INPUT_ORTHONORMAL_TOL)?;
        Ok(Self {
            matrix: linalg::symmetrize(&(u * u.transpose())),
            rank: u.ncols(),
        })
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            matrix: DMatrix::zeros(d, d),
            rank: 0,
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            matrix: DMatrix::identity(d, d),
            rank: d,
        }
    }

    /// `I - P`.
    pub fn complement(&self) -> Self {
        let d = self.dim();
        Self {
            matrix: DMatrix::identity(d, d) - &self.matrix,
            rank: d - self.rank,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    /// `||P^2 - P||_F`.
    pub fn idempotence_defect(&self) -> f64 {
        (&self.matrix * &self.matrix - &self.matrix).norm()
    }
}

/// Orthonormal basis of the null space of `h` (`side = Right`) or of `h^T`
/// (`side = Left`).
///
/// Keeps every singular direction whose singular value is at most
/// `cutoff + 1e-12`; ties near the cutoff count as null. When every
/// direction is null the basis carries [`BasisWarning::RankZero`].
pub fn null_basis(h: &ActivationMatrix, policy: CutoffPolicy, side: Side) -> Result<NullBasis> {
    let m = match side {
        Side::Right => h.data().clone(),
        Side::Left => h.data().transpose(),
    };
    let (n, d) = m.shape();
    let (sv, v) = linalg::right_singular_system(&m);
    let cutoff = policy.resolve(n, d, sv[0])?;
    let keep: Vec<usize> = (0..d)
        .filter(|&i| sv[i] <= cutoff + NEAR_CUTOFF_TIE)
        .collect();
    let basis = DMatrix::from_fn(d, keep.len(), |r, c| v[(r, keep[c])]);
    let out = NullBasis::from_orthonormal(basis, cutoff, side)?;
    if out.warning.is_some() {
        log::warn!(
            "null basis spans the whole space: input has numerical rank 0 at cutoff {cutoff:e}"
        );
    }
    Ok(out)
}

/// Orthonormal basis of the row space `im(H^T)`, the complement of the right
/// null space at the same cutoff.
pub fn row_space_basis(h: &ActivationMatrix, policy: CutoffPolicy) -> Result<DMatrix<f64>> {
    let (n, d) = h.data().shape();
    let (sv, v) = linalg::right_singular_system(h.data());
    let cutoff = policy.resolve(n, d, sv[0])?;
    let keep: Vec<usize> = (0..d)
        .filter(|&i| sv[i] > cutoff + NEAR_CUTOFF_TIE)
        .collect();
    Ok(DMatrix::from_fn(d, keep.len(), |r, c| v[(r, keep[c])]))
}

/// Domain covariance `(1/n) H^T H`.
pub fn domain_covariance(h: &ActivationMatrix) -> DMatrix<f64> {
    let n = h.n_tokens() as f64;
    linalg::symmetrize(&(h.data().transpose() * h.data())) / n
}

/// Right null basis computed from the zero eigenspace of the covariance
/// instead of the SVD of `H`.
///
/// Eigenvalues of `(1/n) H^T H` at most `max(n, d) * eps * lambda_max` count
/// as zero. The reported cutoff is converted to singular-value units.
pub fn null_basis_via_covariance(h: &ActivationMatrix) -> Result<NullBasis> {
    let (n, d) = h.data().shape();
    let cov = domain_covariance(h);
    let (vals, vecs) = linalg::sym_eigen(&cov);
    let lambda_max = vals.last().copied().unwrap_or(0.0).max(0.0);
    let tol = n.max(d) as f64 * f64::EPSILON * lambda_max;
    let keep: Vec<usize> = (0..d)
        .filter(|&i| vals[i] <= tol + NEAR_CUTOFF_TIE)
        .collect();
    let basis = DMatrix::from_fn(d, keep.len(), |r, c| vecs[(r, keep[c])]);
    NullBasis::from_orthonormal(basis, (n as f64 * tol).sqrt(), Side::Right)
}

/// Principal angles between `span(U)` and `span(V)`, listed in nonincreasing
/// order (largest angle first). The cosines are the singular values of
/// `U^T V`; the list has `min(r, k)` entries in `[0, pi/2]`.
pub fn principal_angles(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<Vec<f64>> {
    if u.nrows() != v.nrows() {
        return Err(ZdpError::DimensionMismatch(format!(
            "bases live in dimensions {} and {}",
            u.nrows(),
            v.nrows()
        )));
    }
    linalg::ensure_orthonormal(u, INPUT_ORTHONORMAL_TOL)?;
    linalg::ensure_orthonormal(v, INPUT_ORTHONORMAL_TOL)?;
    let cross = u.transpose() * v;
    let mut angles: Vec<f64> = linalg::singular_values(&cross)
        .into_iter()
        .map(|c| c.clamp(0.0, 1.0).acos())
        .collect();
    angles.sort_by(|a, b| b.total_cmp(a));
    Ok(angles)
}

/// `||sin Theta(V1, V2)||_F = sqrt(k - ||V1^T V2||_F^2)`.
///
/// Evaluated as `||V2 - V1 V1^T V2||_F`, which is algebraically identical for
/// equal `k` but keeps precision for tiny angles.
pub fn sin_theta_distance(v1: &NullBasis, v2: &NullBasis) -> Result<f64> {
    if v1.ambient_dim() != v2.ambient_dim() || v1.side() != v2.side() {
        return Err(ZdpError::DimensionMismatch(format!(
            "bases differ in ambient dimension or side ({} {:?} vs {} {:?})",
            v1.ambient_dim(),
            v1.side(),
            v2.ambient_dim(),
            v2.side()
        )));
    }
    sin_theta_between(v1.basis(), v2.basis())
}

/// Matrix form of [`sin_theta_distance`] for raw orthonormal bases.
pub fn sin_theta_between(v1: &DMatrix<f64>, v2: &DMatrix<f64>) -> Result<f64> {
    if v1.shape() != v2.shape() {
        return Err(ZdpError::DimensionMismatch(format!(
            "sin-theta needs equal shapes, got {:?} and {:?}",
            v1.shape(),
            v2.shape()
        )));
    }
    let residual = v2 - v1 * (v1.transpose() * v2);
    Ok(residual.norm().max(0.0))
}

/// `P = V V^T`.
pub fn projector_from_basis(v: &NullBasis) -> Projector {
    Projector {
        matrix: linalg::symmetrize(&(v.basis() * v.basis().transpose())),
        rank: v.k(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, RngSpec};

    fn act(rows: usize, cols: usize, vals: &[f64]) -> ActivationMatrix {
        ActivationMatrix::new(DMatrix::from_row_slice(rows, cols, vals)).unwrap()
    }

    #[test]
    fn rejects_non_finite_input() {
        let m = DMatrix::from_row_slice(1, 2, &[1.0, f64::NAN]);
        assert!(matches!(
            ActivationMatrix::new(m),
            Err(ZdpError::NonFinite { row: 0, col: 1 })
        ));
    }

    #[test]
    fn zero_matrix_is_entirely_null() {
        let h = ActivationMatrix::new(DMatrix::zeros(3, 4)).unwrap();
        let v = null_basis(&h, CutoffPolicy::Default, Side::Right).unwrap();
        assert_eq!(v.k(), 4);
        assert_eq!(v.warning(), Some(BasisWarning::RankZero));
        assert!(linalg::orthonormality_defect(v.basis()) < 1e-12);
    }

    #[test]
    fn coordinate_kernel() {
        let h = act(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let v = null_basis(&h, CutoffPolicy::Default, Side::Right).unwrap();
        assert_eq!(v.k(), 1);
        assert!((v.basis()[(2, 0)].abs() - 1.0).abs() < 1e-14);
        assert!(v.warning().is_none());
    }

    #[test]
    fn left_null_of_tall_matrix() {
        let h = act(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let u = null_basis(&h, CutoffPolicy::Default, Side::Left).unwrap();
        assert_eq!(u.k(), 1);
        assert_eq!(u.ambient_dim(), 3);
        assert!((u.basis()[(2, 0)].abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn product_of_gaussians_has_expected_nullity() {
        let spec = RngSpec::new(11);
        let g1 = synth::standard_normal_matrix(50, 5, &mut spec.substream(0).rng());
        let g2 = synth::standard_normal_matrix(16, 5, &mut spec.substream(1).rng());
        let h = ActivationMatrix::new(&g1 * g2.transpose()).unwrap();
        let v = null_basis(&h, CutoffPolicy::Default, Side::Right).unwrap();
        // Rank oracle: count singular values above the same cutoff.
        let sv = linalg::singular_values(h.data());
        let cutoff = CutoffPolicy::Default.resolve(50, 16, sv[0]).unwrap();
        let rank = sv.iter().filter(|&&s| s > cutoff + NEAR_CUTOFF_TIE).count();
        assert_eq!(rank, 5);
        assert_eq!(v.k(), 11);
        let residual = (h.data() * v.basis()).norm();
        assert!(residual <= cutoff * (v.k() as f64).sqrt() * sv[0]);
    }

    #[test]
    fn absolute_and_relative_cutoffs() {
        let h = act(2, 2, &[1.0, 0.0, 0.0, 1e-3]);
        assert_eq!(
            null_basis(&h, CutoffPolicy::Absolute(1e-2), Side::Right)
                .unwrap()
                .k(),
            1
        );
        assert_eq!(
            null_basis(&h, CutoffPolicy::Relative(1e-4), Side::Right)
                .unwrap()
                .k(),
            0
        );
        // A singular value sitting exactly on the cutoff counts as null.
        assert_eq!(
            null_basis(&h, CutoffPolicy::Absolute(1e-3), Side::Right)
                .unwrap()
                .k(),
            1
        );
        assert!(null_basis(&h, CutoffPolicy::Absolute(-1.0), Side::Right).is_err());
    }

    #[test]
    fn domain_covariance_examples() {
        let h = act(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let s = domain_covariance(&h);
        assert_eq!(s, DMatrix::identity(2, 2) * 0.5);
        let z = ActivationMatrix::new(DMatrix::zeros(3, 2)).unwrap();
        assert_eq!(domain_covariance(&z), DMatrix::zeros(2, 2));
    }

    #[test]
    fn covariance_kernel_matches_svd_kernel() {
        let (h, _) = synth::rank_deficient_base(100, 8, 5, RngSpec::new(3)).unwrap();
        let a = null_basis(&h, CutoffPolicy::Default, Side::Right).unwrap();
        let b = null_basis_via_covariance(&h).unwrap();
        assert_eq!(a.k(), 3);
        assert_eq!(b.k(), 3);
        assert!(sin_theta_distance(&a, &b).unwrap() < 1e-6);
        let cov = domain_covariance(&h);
        let (vals, _) = linalg::sym_eigen(&cov);
        assert!(vals[0] >= -1e-12 * vals[7]);
    }

    #[test]
    fn centering_sets_flag_and_zero_means() {
        let h = act(2, 2, &[1.0, 2.0, 3.0, 6.0]).centered();
        assert!(h.is_centered());
        assert!(h.data().column(0).sum().abs() < 1e-15);
        assert!(h.data().column(1).sum().abs() < 1e-15);
    }

    #[test]
    fn principal_angles_examples() {
        let e = DMatrix::<f64>::identity(4, 4);
        let u = e.columns(0, 2).into_owned();
        let w = e.columns(2, 2).into_owned();
        assert!(principal_angles(&u, &u)
            .unwrap()
            .iter()
            .all(|a| a.abs() < 1e-7));
        let perp = principal_angles(&u, &w).unwrap();
        assert!(perp
            .iter()
            .all(|a| (a - std::f64::consts::FRAC_PI_2).abs() < 1e-12));
        let bad = DMatrix::from_element(4, 1, 1.0);
        assert!(matches!(
            principal_angles(&bad, &u),
            Err(ZdpError::NotOrthonormal(_))
        ));
    }

    #[test]
    fn principal_angles_are_nonincreasing_and_sum_matches() {
        let spec = RngSpec::new(5);
        let u = synth::haar_orthonormal(12, 3, &mut spec.substream(0).rng());
        let v = synth::haar_orthonormal(12, 5, &mut spec.substream(1).rng());
        let a = principal_angles(&u, &v).unwrap();
        assert_eq!(a.len(), 3);
        assert!(a.windows(2).all(|w| w[0] >= w[1]));
        let cos2: f64 = a.iter().map(|t| t.cos().powi(2)).sum();
        assert!((cos2 - (u.transpose() * &v).norm_squared()).abs() < 1e-10);
        let b = principal_angles(&v, &u).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn sin_theta_examples() {
        let e = DMatrix::<f64>::identity(2, 2);
        let v1 =
            NullBasis::from_orthonormal(e.columns(0, 1).into_owned(), 0.0, Side::Right).unwrap();
        let v2 =
            NullBasis::from_orthonormal(e.columns(1, 1).into_owned(), 0.0, Side::Right).unwrap();
        assert_eq!(sin_theta_distance(&v1, &v1).unwrap(), 0.0);
        assert!((sin_theta_distance(&v1, &v2).unwrap() - 1.0).abs() < 1e-15);
        // Plane rotation by theta: closed form sin(theta).
        for theta in [1e-9f64, 1e-4, 0.3, 1.2] {
            let rot = DMatrix::from_row_slice(2, 1, &[theta.cos(), theta.sin()]);
            let vr = NullBasis::from_orthonormal(rot, 0.0, Side::Right).unwrap();
            let s = sin_theta_distance(&v1, &vr).unwrap();
            assert!((s - theta.sin()).abs() < 1e-15 + 1e-12 * theta.sin());
        }
        let wide = NullBasis::from_orthonormal(e.clone(), 0.0, Side::Right).unwrap();
        assert!(sin_theta_distance(&v1, &wide).is_err());
    }

    #[test]
    fn sin_theta_agrees_with_overlap_formula() {
        let spec = RngSpec::new(9);
        let a = synth::haar_orthonormal(10, 3, &mut spec.substream(0).rng());
        let b = synth::haar_orthonormal(10, 3, &mut spec.substream(1).rng());
        let va = NullBasis::from_orthonormal(a.clone(), 0.0, Side::Right).unwrap();
        let vb = NullBasis::from_orthonormal(b.clone(), 0.0, Side::Right).unwrap();
        let formula = (3.0 - (a.transpose() * &b).norm_squared()).max(0.0).sqrt();
        assert!((sin_theta_distance(&va, &vb).unwrap() - formula).abs() < 1e-12);
    }

    #[test]
    fn projector_examples() {
        let empty = NullBasis::from_orthonormal(DMatrix::zeros(3, 0), 0.0, Side::Right).unwrap();
        let p0 = projector_from_basis(&empty);
        assert_eq!(p0.matrix(), &DMatrix::zeros(3, 3));
        assert_eq!(p0.rank(), 0);

        let e3 = DMatrix::from_row_slice(3, 1, &[0.0, 0.0, 1.0]);
        let p = projector_from_basis(&NullBasis::from_orthonormal(e3, 0.0, Side::Right).unwrap());
        assert_eq!(
            p.matrix(),
            &DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.0, 0.0, 1.0]))
        );

        let v = synth::haar_orthonormal(9, 4, &mut RngSpec::new(2).rng());
        let p = projector_from_basis(&NullBasis::from_orthonormal(v, 0.0, Side::Right).unwrap());
        assert!((p.trace() - 4.0).abs() < 1e-8);
        assert!(p.idempotence_defect() < 1e-9);
        assert_eq!(p.matrix(), &p.matrix().transpose());
    }
}
