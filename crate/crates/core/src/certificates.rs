//! Executable checks of the leak inequalities.
//!
//! Each checker recomputes both sides of an inequality from raw inputs and
//! reports the comparison in a [`CertificateResult`]. Comparisons use an
//! absolute tolerance of `1e-9` times the largest term involved.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ZdpError};
use crate::linalg;
use crate::nullspace::{self, ActivationMatrix, NullBasis, Projector};
use crate::synth::{self, RngSpec};

pub const CERT_RELATIVE_TOL: f64 = 1e-9;

/// Low-rank update `Delta W = A B^T` with `A, B` of shape `d x r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors {
    pub(crate) a: DMatrix<f64>,
    pub(crate) b: DMatrix<f64>,
}

impl LoraFactors {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if a.shape() != b.shape() {
            return Err(ZdpError::DimensionMismatch(format!(
                "A is {:?} but B is {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (d, r) = a.shape();
        if r == 0 || r > d {
            return Err(ZdpError::InvalidArgument(format!(
                "rank r = {r} must be in 1..={d}"
            )));
        }
        linalg::ensure_finite(&a)?;
        linalg::ensure_finite(&b)?;
        Ok(Self { a, b })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn r(&self) -> usize {
        self.a.ncols()
    }

    pub fn d(&self) -> usize {
        self.a.nrows()
    }

    /// `A B^T`.
    pub fn delta_w(&self) -> DMatrix<f64> {
        &self.a * self.b.transpose()
    }

    /// Orthonormal basis `U_B` of `im(B)`; `None` when `B` is numerically zero.
    pub fn range_basis_b(&self) -> Option<DMatrix<f64>> {
        let svd = self.b.clone().svd(true, false);
        let u = svd.u.expect("requested U");
        let smax = svd.singular_values.iter().fold(0.0_f64, |m, &s| m.max(s));
        if smax == 0.0 {
            return None;
        }
        let tol = self.d().max(self.r()) as f64 * f64::EPSILON * smax;
        let keep: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&i| svd.singular_values[i] > tol)
            .collect();
        Some(DMatrix::from_fn(self.d(), keep.len(), |i, j| {
            u[(i, keep[j])]
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificateResult {
    pub quantity: f64,
    pub lower_bound: Option<f64>,
    pub upper_bound: Option<f64>,
    pub satisfied: bool,
    /// Distance to the nearest supplied bound; negative when violated.
    pub slack: f64,
    pub tolerance: f64,
}

impl CertificateResult {
    pub fn check(quantity: f64, lower_bound: Option<f64>, upper_bound: Option<f64>) -> Self {
        let scale = [Some(quantity), lower_bound, upper_bound]
            .iter()
            .flatten()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        let tolerance = CERT_RELATIVE_TOL * scale;
        let mut slack = f64::INFINITY;
        if let Some(lo) = lower_bound {
            slack = slack.min(quantity - lo);
        }
        if let Some(hi) = upper_bound {
            slack = slack.min(hi - quantity);
        }
        if !slack.is_finite() {
            slack = 0.0;
        }
        let satisfied = lower_bound.is_none_or(|lo| lo - tolerance <= quantity)
            && upper_bound.is_none_or(|hi| quantity <= hi + tolerance);
        Self {
            quantity,
            lower_bound,
            upper_bound,
            satisfied,
            slack,
            tolerance,
        }
    }

    /// As [`check`](Self::check), with the tolerance raised to at least
    /// `floor` to absorb a known absolute rounding error.
    pub fn check_with_floor(
        quantity: f64,
        lower_bound: Option<f64>,
        upper_bound: Option<f64>,
        floor: f64,
    ) -> Self {
        let base = Self::check(quantity, lower_bound, upper_bound);
        if floor <= base.tolerance {
            return base;
        }
        let tolerance = floor;
        let satisfied = lower_bound.is_none_or(|lo| lo - tolerance <= quantity)
            && upper_bound.is_none_or(|hi| quantity <= hi + tolerance);
        Self {
            satisfied,
            tolerance,
            ..base
        }
    }
}

fn same_dims(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(ZdpError::DimensionMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_basis_dim(v0: &NullBasis, d: usize) -> Result<()> {
    if v0.ambient_dim() != d {
        return Err(ZdpError::DimensionMismatch(format!(
            "null basis lives in dimension {}, matrix has {d} columns",
            v0.ambient_dim()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceLeakReport {
    pub nvl: f64,
    pub k: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `NVL / k`, which the sandwich places between `lambda_min` and
    /// `lambda_max` of `G`.
    pub nvl_per_direction: f64,
    pub result: CertificateResult,
}

/// Checks `k lambda_min(G) <= ||(H + dH) V0||_F^2 <= k lambda_max(G)` with
/// `G = dH^T dH`.
pub fn variance_leak_certificate(
    h: &ActivationMatrix,
    dh: &DMatrix<f64>,
    v0: &NullBasis,
) -> Result<VarianceLeakReport> {
    same_dims(h.data(), dh, "base and perturbation")?;
    check_basis_dim(v0, h.dim())?;
    linalg::ensure_finite(dh)?;
    let k = v0.k();
    if k == 0 {
        return Err(ZdpError::EmptyNullSpace);
    }
    let residual = (h.data() * v0.basis()).norm();
    let allowed = (k as f64).sqrt() * v0.cutoff() + 1e-10 * h.data().norm();
    if residual > allowed {
        return Err(ZdpError::Precondition(format!(
            "basis is not in ker(H): ||H V0||_F = {residual:e} exceeds {allowed:e}"
        )));
    }
    let nvl = ((h.data() + dh) * v0.basis()).norm_squared();
    let g = linalg::symmetrize(&(dh.transpose() * dh));
    let (eig, _) = linalg::sym_eigen(&g);
    let lambda_min = eig[0].max(0.0);
    let lambda_max = eig[eig.len() - 1].max(0.0);
    let kf = k as f64;
    // H V0 is zero only up to `residual`, which shifts the leak by at most this.
    let floor = 2.0 * (residual * residual + residual * (kf * lambda_max).sqrt());
    Ok(VarianceLeakReport {
        nvl,
        k,
        lambda_min,
        lambda_max,
        nvl_per_direction: nvl / kf,
        result: CertificateResult::check_with_floor(
            nvl,
            Some(kf * lambda_min),
            Some(kf * lambda_max),
            floor,
        ),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankLeakReport {
    /// `||A B^T V0||_F`.
    pub leak: f64,
    /// `sigma_max(A) ||B^T V0||_F`.
    pub intermediate: f64,
    /// `sigma_max(A) sigma_max(B) ||U_B^T V0||_F`.
    pub outer_bound: f64,
    /// `||U_B^T V0||_F^2`.
    pub overlap_sq: f64,
    /// `sum cos^2` of the principal angles between `im(B)` and `V0`.
    pub cos_sq_sum: f64,
    /// Principal angles, largest first.
    pub angles: Vec<f64>,
    pub degenerate: bool,
    pub leak_vs_intermediate: CertificateResult,
    pub intermediate_vs_outer: CertificateResult,
    pub overlap_identity: CertificateResult,
    pub result: CertificateResult,
}

/// Rank-leak chain `leak <= intermediate <= outer_bound` plus the overlap
/// identity `||U_B^T V0||_F^2 = sum cos^2 theta_i`.
pub fn rank_leak_certificate(f: &LoraFactors, v0: &NullBasis) -> Result<RankLeakReport> {
    check_basis_dim(v0, f.d())?;
    let v = v0.basis();
    let Some(u_b) = f.range_basis_b() else {
        let zero = CertificateResult::check(0.0, None, Some(0.0));
        return Ok(RankLeakReport {
            leak: 0.0,
            intermediate: 0.0,
            outer_bound: 0.0,
            overlap_sq: 0.0,
            cos_sq_sum: 0.0,
            angles: Vec::new(),
            degenerate: true,
            leak_vs_intermediate: zero,
            intermediate_vs_outer: zero,
            overlap_identity: CertificateResult::check(0.0, Some(0.0), Some(0.0)),
            result: zero,
        });
    };
    let sa = linalg::spectral_norm(&f.a);
    let sb = linalg::spectral_norm(&f.b);
    let leak = (&f.a * (f.b.transpose() * v)).norm();
    let intermediate = sa * (f.b.transpose() * v).norm();
    let overlap_sq = (u_b.transpose() * v).norm_squared();
    let outer_bound = sa * sb * overlap_sq.sqrt();
    let angles = if v0.k() == 0 {
        Vec::new()
    } else {
        nullspace::principal_angles(&u_b, v)?
    };
    let cos_sq_sum: f64 = angles.iter().map(|t| t.cos().powi(2)).sum();
    let leak_vs_intermediate = CertificateResult::check(leak, None, Some(intermediate));
    let intermediate_vs_outer = CertificateResult::check(intermediate, None, Some(outer_bound));
    let mut overlap_identity =
        CertificateResult::check(overlap_sq, Some(cos_sq_sum), Some(cos_sq_sum));
    // acos loses accuracy near 0 and pi/2, so compare the identity against the
    // number of angles rather than the size of the overlap.
    let angle_tol = 1e-7 * (angles.len().max(1) as f64);
    overlap_identity.tolerance = overlap_identity.tolerance.max(angle_tol);
    overlap_identity.satisfied = (overlap_sq - cos_sq_sum).abs() <= overlap_identity.tolerance;
    let mut result = CertificateResult::check(leak, None, Some(outer_bound));
    result.satisfied = leak_vs_intermediate.satisfied
        && intermediate_vs_outer.satisfied
        && overlap_identity.satisfied;
    Ok(RankLeakReport {
        leak,
        intermediate,
        outer_bound,
        overlap_sq,
        cos_sq_sum,
        angles,
        degenerate: false,
        leak_vs_intermediate,
        intermediate_vs_outer,
        overlap_identity,
        result,
    })
}

fn check_overlap_dims(d: usize, r: usize, k: usize) -> Result<()> {
    if d == 0 || r > d || k > d {
        return Err(ZdpError::InvalidArgument(format!(
            "need r, k <= d with d >= 1 (d={d}, r={r}, k={k})"
        )));
    }
    Ok(())
}

/// `E ||U_B^T V0||_F^2 = r k / d` for Haar-random `U_B`.
pub fn expected_overlap(d: usize, r: usize, k: usize) -> Result<f64> {
    check_overlap_dims(d, r, k)?;
    Ok((r * k) as f64 / d as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub trials: usize,
}

/// Monte Carlo estimate of `E ||U_B^T V0||_F^2` with `U_B` Haar on the
/// Stiefel manifold and `V0` the first `k` coordinate axes. Trial `i` uses
/// `substream(i)` of the seed.
pub fn mc_overlap(
    d: usize,
    r: usize,
    k: usize,
    trials: usize,
    seed: u64,
) -> Result<OverlapEstimate> {
    check_overlap_dims(d, r, k)?;
    if trials < 2 {
        return Err(ZdpError::InvalidArgument(format!(
            "need at least 2 trials, got {trials}"
        )));
    }
    let root = RngSpec::new(seed);
    let samples: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let u = synth::haar_orthonormal(d, r, &mut root.substream(i).rng());
            u.rows(0, k).norm_squared()
        })
        .collect();
    let n = trials as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Ok(OverlapEstimate {
        mean,
        stderr: (var / n).sqrt(),
        trials,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DkResidualReport {
    /// `||H_hat V0_est||_F^2`.
    pub leak_est: f64,
    /// `||H_hat V0_true||_F^2`.
    pub leak_true: f64,
    pub g_norm: f64,
    /// `||sin Theta(V0_true, V0_est)||_F^2`.
    pub sin_theta_sq: f64,
    /// `2 ||G||_2 ||sin Theta||_F^2`.
    pub bound: f64,
    pub one_sided: CertificateResult,
    pub two_sided: CertificateResult,
}

/// Residual leak of an estimated basis:
/// `||H_hat V_est||^2 <= ||H_hat V_true||^2 + 2 ||G||_2 ||sin Theta||_F^2`
/// and the two-sided form `| ... - ... | <= 2 ||G||_2 ||sin Theta||_F^2`,
/// with `G = dH^T dH`. Both are evaluated as stated; they are not
/// guaranteed to hold.
pub fn dk_residual_certificate(
    h_hat: &ActivationMatrix,
    v0_true: &NullBasis,
    v0_est: &NullBasis,
    dh: &DMatrix<f64>,
) -> Result<DkResidualReport> {
    if v0_true.k() != v0_est.k() {
        return Err(ZdpError::DimensionMismatch(format!(
            "true basis has k = {}, estimate has k = {}",
            v0_true.k(),
            v0_est.k()
        )));
    }
    same_dims(h_hat.data(), dh, "activations and perturbation")?;
    check_basis_dim(v0_true, h_hat.dim())?;
    check_basis_dim(v0_est, h_hat.dim())?;
    linalg::ensure_finite(dh)?;
    let leak_est = (h_hat.data() * v0_est.basis()).norm_squared();
    let leak_true = (h_hat.data() * v0_true.basis()).norm_squared();
    let g_norm = linalg::spectral_norm(dh).powi(2);
    let sin_theta_sq = nullspace::sin_theta_distance(v0_true, v0_est)?.powi(2);
    let bound = 2.0 * g_norm * sin_theta_sq;
    let mut two_sided = CertificateResult::check((leak_est - leak_true).abs(), None, Some(bound));
    // Both leaks carry rounding of their own size.
    two_sided.tolerance = two_sided
        .tolerance
        .max(CERT_RELATIVE_TOL * leak_est.max(leak_true));
    two_sided.satisfied = two_sided.quantity <= bound + two_sided.tolerance;
    Ok(DkResidualReport {
        leak_est,
        leak_true,
        g_norm,
        sin_theta_sq,
        bound,
        one_sided: CertificateResult::check(leak_est, None, Some(leak_true + bound)),
        two_sided,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSandwichReport {
    /// `tr(P Sigma)`.
    pub trace: f64,
    /// `||P - P*||_F^2`.
    pub distance_sq: f64,
    /// `tr(Pi P Pi)` with `Pi = I - P*`.
    pub pi_trace: f64,
    pub result: CertificateResult,
    pub identity: CertificateResult,
}

/// Projector-trace control
/// `(delta/2) ||P - P*||_F^2 <= tr(P Sigma) <= (L/2) ||P - P*||_F^2`
/// for `ker(Sigma) = im(P*)` and nonzero spectrum in `[delta, L]`, together
/// with `tr(Pi P Pi) = ||P - P*||_F^2 / 2`.
pub fn projector_trace_sandwich(
    p: &Projector,
    pstar: &Projector,
    sigma: &DMatrix<f64>,
    delta: f64,
    l: f64,
) -> Result<TraceSandwichReport> {
    let d = pstar.dim();
    if p.dim() != d || sigma.shape() != (d, d) {
        return Err(ZdpError::DimensionMismatch(format!(
            "P is {0}x{0}, P* is {d}x{d}, Sigma is {1:?}",
            p.dim(),
            sigma.shape()
        )));
    }
    if p.rank() != pstar.rank() {
        return Err(ZdpError::Precondition(format!(
            "projectors must have equal rank ({} vs {})",
            p.rank(),
            pstar.rank()
        )));
    }
    if !(delta > 0.0 && delta <= l && l.is_finite()) {
        return Err(ZdpError::Precondition(format!(
            "need 0 < delta <= L, got delta={delta}, L={l}"
        )));
    }
    linalg::ensure_finite(sigma)?;
    let sym = linalg::symmetrize(sigma);
    let scale = sym.norm().max(f64::MIN_POSITIVE);
    if (sigma - &sym).norm() > 1e-12 * scale {
        return Err(ZdpError::NotPsd("Sigma is not symmetric".into()));
    }
    let kernel_residual = (&sym * pstar.matrix()).norm();
    if kernel_residual > 1e-9 * scale {
        return Err(ZdpError::Precondition(format!(
            "im(P*) is not in ker(Sigma): ||Sigma P*||_F = {kernel_residual:e}"
        )));
    }
    let (eig, _) = linalg::sym_eigen(&sym);
    let k = pstar.rank();
    let spec_tol = 1e-9 * eig[d - 1].abs().max(l);
    if eig[0] < -spec_tol {
        return Err(ZdpError::NotPsd(format!(
            "smallest eigenvalue {:e}",
            eig[0]
        )));
    }
    if let Some(&lo) = eig.get(k) {
        if lo < delta - spec_tol || eig[d - 1] > l + spec_tol {
            return Err(ZdpError::Precondition(format!(
                "nonzero spectrum [{lo:e}, {:e}] is not inside [delta, L] = [{delta:e}, {l:e}]",
                eig[d - 1]
            )));
        }
    }
    let trace = (p.matrix() * &sym).trace();
    let distance_sq = (p.matrix() - pstar.matrix()).norm_squared();
    let pi = pstar.complement();
    let pi_trace = (pi.matrix() * p.matrix() * pi.matrix()).trace();
    Ok(TraceSandwichReport {
        trace,
        distance_sq,
        pi_trace,
        result: CertificateResult::check_with_floor(
            trace,
            Some(0.5 * delta * distance_sq),
            Some(0.5 * l * distance_sq),
            (k as f64).sqrt() * kernel_residual + 16.0 * d as f64 * f64::EPSILON * scale,
        ),
        identity: {
            let mut id = CertificateResult::check(
                pi_trace,
                Some(0.5 * distance_sq),
                Some(0.5 * distance_sq),
            );
            id.tolerance = id.tolerance.max(1e-12 * d as f64);
            id.satisfied = (pi_trace - 0.5 * distance_sq).abs() <= id.tolerance;
            id
        },
    })
}

/// Heuristic first-order SNL increase
/// `sigma_max(A)^2 sigma_max(B)^2 (r k / d) / ||H_hat||_F^2`; not a bound.
pub fn heuristic_snl_increase(
    f: &LoraFactors,
    d: usize,
    k: usize,
    frob_hhat_sq: f64,
) -> Result<f64> {
    if d != f.d() {
        return Err(ZdpError::DimensionMismatch(format!(
            "factors live in dimension {}, got d = {d}",
            f.d()
        )));
    }
    if !(frob_hhat_sq > 0.0 && frob_hhat_sq.is_finite()) {
        return Err(ZdpError::InvalidArgument(format!(
            "||H_hat||_F^2 must be positive, got {frob_hhat_sq}"
        )));
    }
    let overlap = expected_overlap(d, f.r(), k)?;
    let sa = linalg::spectral_norm(&f.a);
    let sb = linalg::spectral_norm(&f.b);
    Ok(sa * sa * sb * sb * overlap / frob_hhat_sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nullspace::{CutoffPolicy, Side};
    use crate::synth::{
        aligned_lowrank_factors, haar_orthonormal, rank_deficient_base, standard_normal_matrix,
    };
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn basis(m: DMatrix<f64>) -> NullBasis {
        NullBasis::from_orthonormal(m, 0.0, Side::Right).unwrap()
    }

    fn axes(d: usize, cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(d, cols.len(), |i, j| if i == cols[j] { 1.0 } else { 0.0 })
    }

    #[test]
    fn certificate_result_tolerance() {
        let r = CertificateResult::check(1.0 + 5e-10, None, Some(1.0));
        assert!(r.satisfied && r.slack < 0.0);
        assert!(!CertificateResult::check(1.0 + 1e-8, None, Some(1.0)).satisfied);
        assert!(!CertificateResult::check(0.5, Some(0.6), None).satisfied);
    }

    #[test]
    fn variance_leak_zero_perturbation() {
        let (h, v0) = rank_deficient_base(30, 10, 6, RngSpec::new(1)).unwrap();
        let rep = variance_leak_certificate(&h, &DMatrix::zeros(30, 10), &v0).unwrap();
        assert!(rep.nvl < 1e-20 && rep.result.satisfied, "{rep:?}");
    }

    #[test]
    fn variance_leak_isotropic_is_tight() {
        // dH = sigma * Q with orthonormal columns Q (n x d) gives G = sigma^2 I.
        let (h, v0) = rank_deficient_base(30, 10, 6, RngSpec::new(1)).unwrap();
        let q = haar_orthonormal(30, 10, &mut RngSpec::new(2).rng());
        let rep = variance_leak_certificate(&h, &(q * 1.5), &v0).unwrap();
        let target = v0.k() as f64 * 2.25;
        assert!((rep.nvl - target).abs() < 1e-10);
        assert!(rep.result.satisfied);
        assert!(rep.result.slack.abs() < 1e-10);
        assert!((rep.nvl_per_direction - 2.25).abs() < 1e-12);
    }

    #[test]
    fn variance_leak_random_has_strict_slack() {
        for seed in 0..200 {
            let (h, v0) = rank_deficient_base(40, 12, 8, RngSpec::new(seed)).unwrap();
            let dh =
                standard_normal_matrix(40, 12, &mut RngSpec::new(seed).substream(9).rng()) * 0.1;
            let rep = variance_leak_certificate(&h, &dh, &v0).unwrap();
            assert!(rep.result.satisfied && rep.result.slack > 0.0);
            let (eig, _) = linalg::sym_eigen(&(dh.transpose() * &dh));
            assert!((rep.lambda_max - eig[11]).abs() < 1e-12 * eig[11]);
            assert!(
                rep.lambda_min <= rep.nvl_per_direction && rep.nvl_per_direction <= rep.lambda_max
            );
        }
    }

    #[test]
    fn variance_leak_rejects_wrong_basis() {
        let (h, _) = rank_deficient_base(30, 10, 6, RngSpec::new(1)).unwrap();
        let wrong = basis(axes(10, &[0, 1]));
        assert!(matches!(
            variance_leak_certificate(&h, &DMatrix::zeros(30, 10), &wrong),
            Err(ZdpError::Precondition(_))
        ));
    }

    #[test]
    fn rank_leak_orthogonal_and_random() {
        let (_, v0) = rank_deficient_base(40, 12, 9, RngSpec::new(5)).unwrap();
        let f = aligned_lowrank_factors(&v0, 2, &[FRAC_PI_2, FRAC_PI_2], 1.3, 0.7, RngSpec::new(1))
            .unwrap();
        let rep = rank_leak_certificate(&f, &v0).unwrap();
        assert!(rep.leak < 1e-12 && rep.result.satisfied);
        for seed in 0..200 {
            let mut rng = RngSpec::new(seed).rng();
            let f = LoraFactors::new(
                standard_normal_matrix(12, 3, &mut rng),
                standard_normal_matrix(12, 3, &mut rng),
            )
            .unwrap();
            let rep = rank_leak_certificate(&f, &v0).unwrap();
            assert!(rep.result.satisfied, "seed {seed}: {rep:?}");
            assert!(rep.leak <= rep.intermediate * (1.0 + 1e-9));
            assert!(rep.intermediate <= rep.outer_bound * (1.0 + 1e-9));
        }
    }

    #[test]
    fn rank_leak_aligned_equality() {
        let (_, v0) = rank_deficient_base(40, 12, 8, RngSpec::new(7)).unwrap();
        let f =
            aligned_lowrank_factors(&v0, 3, &[0.0, 0.0, 0.0], 2.0, 0.5, RngSpec::new(3)).unwrap();
        let rep = rank_leak_certificate(&f, &v0).unwrap();
        assert!((rep.leak - rep.intermediate).abs() < 1e-9);
        assert!((rep.intermediate - rep.outer_bound).abs() < 1e-9);
    }

    #[test]
    fn rank_leak_overlap_identity_with_mixed_angles() {
        let (_, v0) = rank_deficient_base(40, 12, 6, RngSpec::new(8)).unwrap();
        let angles = [0.2, 0.9, 1.4];
        let f = aligned_lowrank_factors(&v0, 3, &angles, 1.0, 1.0, RngSpec::new(2)).unwrap();
        let rep = rank_leak_certificate(&f, &v0).unwrap();
        let cos2: f64 = angles.iter().map(|a: &f64| a.cos().powi(2)).sum();
        assert!((rep.overlap_sq - cos2).abs() < 1e-10);
        assert!(rep.overlap_identity.satisfied);
    }

    #[test]
    fn rank_leak_zero_b_is_degenerate() {
        let (_, v0) = rank_deficient_base(40, 12, 8, RngSpec::new(7)).unwrap();
        let f = LoraFactors::new(DMatrix::from_element(12, 2, 1.0), DMatrix::zeros(12, 2)).unwrap();
        let rep = rank_leak_certificate(&f, &v0).unwrap();
        assert!(rep.degenerate && rep.leak == 0.0 && rep.result.satisfied);
    }

    #[test]
    fn lora_factor_validation() {
        assert!(LoraFactors::new(DMatrix::zeros(4, 2), DMatrix::zeros(4, 3)).is_err());
        assert!(LoraFactors::new(DMatrix::zeros(2, 3), DMatrix::zeros(2, 3)).is_err());
        let mut a = DMatrix::zeros(4, 2);
        a[(0, 0)] = f64::NAN;
        assert!(LoraFactors::new(a, DMatrix::zeros(4, 2)).is_err());
    }

    #[test]
    fn expected_overlap_values() {
        assert_eq!(expected_overlap(12, 2, 3).unwrap(), 0.5);
        assert_eq!(expected_overlap(7, 7, 3).unwrap(), 3.0);
        assert!(expected_overlap(4, 5, 1).is_err());
    }

    #[test]
    fn mc_overlap_matches_closed_form() {
        let est = mc_overlap(12, 2, 3, 20_000, 11).unwrap();
        assert!((est.mean - 0.5).abs() <= 3.0 * est.stderr, "{est:?}");
        let est = mc_overlap(64, 4, 8, 20_000, 12).unwrap();
        assert!((est.mean - 0.5).abs() <= 0.01);
        for (d, r, k) in [(8, 1, 1), (10, 3, 5), (16, 4, 2), (20, 20, 3)] {
            let est = mc_overlap(d, r, k, 4000, (d * 100 + r * 10 + k) as u64).unwrap();
            let exact = expected_overlap(d, r, k).unwrap();
            assert!(
                (est.mean - exact).abs() <= 3.0 * est.stderr + 1e-12,
                "{d} {r} {k}: {est:?}"
            );
        }
        let full = mc_overlap(9, 9, 4, 10, 1).unwrap();
        assert!((full.mean - 4.0).abs() < 1e-12);
    }

    #[test]
    fn dk_residual_identical_bases() {
        let (h, v0) = rank_deficient_base(30, 10, 6, RngSpec::new(4)).unwrap();
        let dh = standard_normal_matrix(30, 10, &mut RngSpec::new(3).rng()) * 0.1;
        let hh = ActivationMatrix::new(h.data() + &dh).unwrap();
        let rep = dk_residual_certificate(&hh, &v0, &v0, &dh).unwrap();
        assert_eq!(rep.leak_est, rep.leak_true);
        assert!(rep.sin_theta_sq < 1e-24);
        assert!(rep.one_sided.satisfied && rep.two_sided.satisfied);
    }

    #[test]
    fn dk_residual_eigen_aligned_rotation() {
        // H_hat = dH = diag(s), V_true = e0, e1; rotate e0 toward e4 by theta.
        // The leak changes by sin^2(theta) (s4^2 - s0^2) with no cross term.
        let s = [0.3, 0.5, 1.0, 1.5, 2.0, 2.5];
        let dh = DMatrix::from_fn(6, 6, |i, j| if i == j { s[i] } else { 0.0 });
        let hh = ActivationMatrix::new(dh.clone()).unwrap();
        let v_true = basis(axes(6, &[0, 1]));
        let mut prev = None;
        for theta in [1e-1, 1e-2, 1e-3] {
            let mut v = axes(6, &[0, 1]);
            v[(0, 0)] = f64::cos(theta);
            v[(4, 0)] = f64::sin(theta);
            let rep = dk_residual_certificate(&hh, &v_true, &basis(v), &dh).unwrap();
            let diff = rep.leak_est - rep.leak_true;
            let hand = theta.sin().powi(2) * (s[4] * s[4] - s[0] * s[0]);
            assert!((diff - hand).abs() < 1e-12);
            assert!(
                rep.one_sided.satisfied && rep.two_sided.satisfied && rep.one_sided.slack > 0.0
            );
            if let Some(p) = prev {
                let ratio: f64 = p / diff;
                let hand_ratio = (10.0 * theta).sin().powi(2) / theta.sin().powi(2);
                assert!((ratio - hand_ratio).abs() < 1e-6 * hand_ratio, "{ratio}");
            }
            prev = Some(diff);
        }
    }

    #[test]
    fn dk_residual_rejects_mismatched_k() {
        let dh = DMatrix::zeros(6, 6);
        let hh = ActivationMatrix::new(DMatrix::identity(6, 6)).unwrap();
        assert!(
            dk_residual_certificate(&hh, &basis(axes(6, &[0])), &basis(axes(6, &[0, 1])), &dh)
                .is_err()
        );
    }

    fn sandwich_fixture(
        seed: u64,
        d: usize,
        k: usize,
        delta: f64,
        l: f64,
    ) -> (Projector, DMatrix<f64>, DMatrix<f64>) {
        let mut rng = RngSpec::new(seed).rng();
        let frame = haar_orthonormal(d, d, &mut rng);
        let pstar = Projector::from_columns(&frame.columns(0, k).into_owned()).unwrap();
        let spectrum = crate::synth::standard_normal_vector(d - k, &mut rng);
        let mut sigma = DMatrix::zeros(d, d);
        for (j, z) in spectrum.iter().enumerate() {
            let lam = if j == 0 {
                delta
            } else if j == 1 {
                l
            } else {
                delta + (l - delta) * (0.5 + 0.5 * z.tanh())
            };
            let u = frame.column(k + j);
            sigma += u * u.transpose() * lam;
        }
        (pstar, linalg::symmetrize(&sigma), frame)
    }

    #[test]
    fn trace_sandwich_at_truth_is_zero() {
        let (pstar, sigma, _) = sandwich_fixture(1, 8, 3, 0.5, 2.0);
        let rep = projector_trace_sandwich(&pstar, &pstar, &sigma, 0.5, 2.0).unwrap();
        assert!(rep.trace.abs() < 1e-12 && rep.distance_sq < 1e-24);
        assert!(rep.result.satisfied && rep.identity.satisfied);
    }

    #[test]
    fn trace_sandwich_flat_spectrum_is_tight_above() {
        let d = 8;
        let k = 3;
        let frame = haar_orthonormal(d, d, &mut RngSpec::new(4).rng());
        let pstar = Projector::from_columns(&frame.columns(0, k).into_owned()).unwrap();
        let sigma = pstar.complement().matrix() * 2.0;
        let mut rotated = frame.columns(0, k).into_owned();
        let theta: f64 = 0.3;
        let col = frame.column(0) * theta.cos() + frame.column(k) * theta.sin();
        rotated.set_column(0, &col);
        let p = Projector::from_columns(&rotated).unwrap();
        let rep = projector_trace_sandwich(&p, &pstar, &sigma, 2.0, 2.0).unwrap();
        let upper = rep.result.upper_bound.unwrap();
        assert!((rep.trace - upper).abs() < 1e-12);
        assert!(rep.result.satisfied && rep.identity.satisfied);
    }

    #[test]
    fn trace_sandwich_random_instances() {
        for seed in 0..200 {
            let (pstar, sigma, _) = sandwich_fixture(seed, 10, 4, 0.3, 3.0);
            let mut rng = RngSpec::new(seed).substream(1).rng();
            let p = Projector::from_columns(&haar_orthonormal(10, 4, &mut rng)).unwrap();
            let rep = projector_trace_sandwich(&p, &pstar, &sigma, 0.3, 3.0).unwrap();
            assert!(
                rep.result.satisfied && rep.identity.satisfied,
                "seed {seed}: {rep:?}"
            );
        }
    }

    #[test]
    fn trace_sandwich_preconditions() {
        let (pstar, sigma, frame) = sandwich_fixture(2, 8, 3, 0.5, 2.0);
        let p = pstar.clone();
        assert!(projector_trace_sandwich(&p, &pstar, &sigma, 0.6, 2.0).is_err());
        assert!(projector_trace_sandwich(&p, &pstar, &sigma, 0.5, 1.5).is_err());
        assert!(projector_trace_sandwich(&p, &pstar, &sigma, 2.0, 1.0).is_err());
        let leaky = &sigma + frame.column(0) * frame.column(0).transpose();
        assert!(matches!(
            projector_trace_sandwich(&p, &pstar, &leaky, 0.5, 2.0),
            Err(ZdpError::Precondition(_))
        ));
        let other = Projector::from_columns(&frame.columns(0, 2).into_owned()).unwrap();
        assert!(projector_trace_sandwich(&other, &pstar, &sigma, 0.5, 2.0).is_err());
    }

    #[test]
    fn heuristic_values() {
        let a = axes(12, &[0, 1]);
        let b = axes(12, &[2, 3]);
        let f = LoraFactors::new(a.clone(), b.clone()).unwrap();
        assert!((heuristic_snl_increase(&f, 12, 3, 10.0).unwrap() - 0.05).abs() < 1e-15);
        let zero = LoraFactors::new(DMatrix::zeros(12, 2), b.clone()).unwrap();
        assert_eq!(heuristic_snl_increase(&zero, 12, 3, 10.0).unwrap(), 0.0);
        let scaled = LoraFactors::new(a * 3.0, b).unwrap();
        assert!((heuristic_snl_increase(&scaled, 12, 3, 10.0).unwrap() - 0.45).abs() < 1e-14);
        assert!(heuristic_snl_increase(&f, 12, 3, 0.0).is_err());
    }

    #[test]
    fn rank_leak_on_recovered_basis() {
        let (h, _) = rank_deficient_base(60, 16, 10, RngSpec::new(21)).unwrap();
        let v0 = nullspace::null_basis(&h, CutoffPolicy::Default, Side::Right).unwrap();
        let mut rng = RngSpec::new(22).rng();
        let f = LoraFactors::new(
            standard_normal_matrix(16, 2, &mut rng),
            standard_normal_matrix(16, 2, &mut rng),
        )
        .unwrap();
        assert!(rank_leak_certificate(&f, &v0).unwrap().result.satisfied);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn rank_leak_chain_holds(seed in any::<u64>(), r in 1usize..5, scale in 0.01f64..100.0) {
            let (_, v0) = rank_deficient_base(30, 10, 6, RngSpec::new(seed)).unwrap();
            let mut rng = RngSpec::new(seed).substream(1).rng();
            let f = LoraFactors::new(standard_normal_matrix(10, r, &mut rng) * scale, standard_normal_matrix(10, r, &mut rng)).unwrap();
            let rep = rank_leak_certificate(&f, &v0).unwrap();
            prop_assert!(rep.result.satisfied);
        }
    }
}
