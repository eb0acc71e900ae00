//! Fisher information of a categorical softmax head over hidden states and
//! the second-order KL check for perturbations of the hidden state.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ZdpError};
use crate::linalg;
use crate::nullspace::{self, ActivationMatrix, CutoffPolicy, NullBasis};
use crate::probes;
use crate::synth::{self, RngSpec};

/// `p(y | h) = softmax(W h)` with `W` of shape `c x d`, `c >= 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxModel {
    w: DMatrix<f64>,
}

impl SoftmaxModel {
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if w.nrows() < 2 || w.ncols() == 0 {
            return Err(ZdpError::InvalidArgument(format!(
                "need at least 2 classes and d >= 1, got {:?}",
                w.shape()
            )));
        }
        linalg::ensure_finite(&w)?;
        Ok(Self { w })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn classes(&self) -> usize {
        self.w.nrows()
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    fn check_state(&self, h: &DVector<f64>) -> Result<()> {
        if h.len() != self.dim() {
            return Err(ZdpError::DimensionMismatch(format!(
                "hidden state has length {}, model expects {}",
                h.len(),
                self.dim()
            )));
        }
        linalg::ensure_finite_vec(h)
    }

    /// Log-probabilities via log-sum-exp.
    pub fn log_probabilities(&self, h: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state(h)?;
        let z = &self.w * h;
        Ok(log_softmax(&z))
    }

    pub fn probabilities(&self, h: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.log_probabilities(h)?.map(f64::exp))
    }
}

fn log_softmax(z: &DVector<f64>) -> DVector<f64> {
    let max = z.max();
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.map(|v| v - lse)
}

/// `W^T (diag(p) - p p^T) W`, symmetrized.
pub fn softmax_fim(model: &SoftmaxModel, h: &DVector<f64>) -> Result<DMatrix<f64>> {
    let p = model.probabilities(h)?;
    let mut cov = DMatrix::from_diagonal(&p) - &p * p.transpose();
    cov = linalg::symmetrize(&cov);
    let f = linalg::symmetrize(&(model.w.transpose() * cov * &model.w));
    linalg::ensure_finite(&f)
        .map_err(|_| ZdpError::Numerical("Fisher matrix is not finite".into()))?;
    Ok(f)
}

/// Orthogonal projector onto the row space `im(H^T)` at the default cutoff.
pub fn row_space_projector(h: &ActivationMatrix) -> Result<DMatrix<f64>> {
    let v1 = nullspace::row_space_basis(h, CutoffPolicy::Default)?;
    Ok(linalg::symmetrize(&(&v1 * v1.transpose())))
}

/// `F_par = P F P` with `P` the projector onto `im(H^T)`.
pub fn restricted_fisher(f: &DMatrix<f64>, h: &ActivationMatrix) -> Result<DMatrix<f64>> {
    probes::ensure_psd(f)?;
    if f.nrows() != h.dim() {
        return Err(ZdpError::DimensionMismatch(format!(
            "Fisher is {0}x{0}, activations have d = {1}",
            f.nrows(),
            h.dim()
        )));
    }
    let p = row_space_projector(h)?;
    Ok(linalg::symmetrize(&(&p * f * &p)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlCheckResult {
    pub scale: f64,
    pub kl_exact: f64,
    pub kl_quadratic: f64,
    pub residual: f64,
}

/// `e^x - 1 - x` without cancellation for small `|x|`.
fn expm1_minus_x(x: f64) -> f64 {
    if x.abs() < 0.1 {
        let mut term = x * x / 2.0;
        let mut sum = term;
        for n in 3..20 {
            term *= x / n as f64;
            sum += term;
            if term.abs() <= f64::EPSILON * sum.abs() {
                break;
            }
        }
        sum
    } else {
        x.exp_m1() - x
    }
}

/// `KL(p || q)` for `q = softmax(z + s u)` with `p = softmax(z)`:
/// `ln sum_j p_j e^{s v_j}` where `v = u - E_p[u]`.
fn kl_shift(p: &DVector<f64>, u: &DVector<f64>, s: f64) -> f64 {
    let mean = p.dot(u);
    let centered = u.map(|v| v - mean);
    let inner: f64 = p
        .iter()
        .zip(centered.iter())
        .map(|(pj, vj)| pj * expm1_minus_x(s * vj))
        .sum();
    // sum_j p_j s v_j vanishes up to rounding; keep it for consistency.
    let linear: f64 = s * p.dot(&centered);
    (inner + linear).ln_1p().max(0.0)
}

/// Exact `KL(p(.|h) || p(.|h + s dtheta))` against `0.5 s^2 dtheta^T F_par dtheta`
/// for every scale `s`. `F_par` is the restricted Fisher at `h` with the row
/// space of `acts`.
pub fn kl_second_order_check(
    model: &SoftmaxModel,
    h: &DVector<f64>,
    acts: &ActivationMatrix,
    dtheta: &DVector<f64>,
    scales: &[f64],
) -> Result<Vec<KlCheckResult>> {
    model.check_state(dtheta)?;
    let f_par = restricted_fisher(&softmax_fim(model, h)?, acts)?;
    let p = model.probabilities(h)?;
    let u = &model.w * dtheta;
    let quad_unit = 0.5 * dtheta.dot(&(&f_par * dtheta));
    scales
        .iter()
        .map(|&s| {
            if !s.is_finite() {
                return Err(ZdpError::InvalidArgument(format!(
                    "scale must be finite, got {s}"
                )));
            }
            let kl_exact = kl_shift(&p, &u, s);
            if !kl_exact.is_finite() {
                return Err(ZdpError::Numerical(format!(
                    "KL is not finite at scale {s}"
                )));
            }
            let kl_quadratic = (quad_unit * s * s).max(0.0);
            Ok(KlCheckResult {
                scale: s,
                kl_exact,
                kl_quadratic,
                residual: kl_exact - kl_quadratic,
            })
        })
        .collect()
}

/// Direct categorical KL `sum p (log p - log q)`, used as a cross-check.
pub fn categorical_kl(model: &SoftmaxModel, h: &DVector<f64>, h2: &DVector<f64>) -> Result<f64> {
    let lp = model.log_probabilities(h)?;
    let lq = model.log_probabilities(h2)?;
    Ok(lp
        .iter()
        .zip(lq.iter())
        .map(|(a, b)| a.exp() * (a - b))
        .sum())
}

/// Slope of `ln |residual|` against `ln s`, skipping zero residuals.
pub fn residual_exponent(results: &[KlCheckResult]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = results
        .iter()
        .filter(|r| r.residual != 0.0 && r.scale > 0.0)
        .map(|r| (r.scale.ln(), r.residual.abs().ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    Some(linalg::linear_fit(&xs, &ys).0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SilenceCheck {
    pub silent: bool,
    /// `||F V0||_F`.
    pub residual: f64,
    pub tol: f64,
}

/// `F V0 = 0` up to `tol * ||F||_F`.
pub fn fisher_silence_check(f: &DMatrix<f64>, v0: &NullBasis, tol: f64) -> Result<SilenceCheck> {
    if f.nrows() != v0.ambient_dim() || !f.is_square() {
        return Err(ZdpError::DimensionMismatch(format!(
            "Fisher is {:?}, basis lives in dimension {}",
            f.shape(),
            v0.ambient_dim()
        )));
    }
    let residual = (f * v0.basis()).norm();
    Ok(SilenceCheck {
        silent: residual <= tol * f.norm(),
        residual,
        tol,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreCovariance {
    pub mean: DMatrix<f64>,
    /// Elementwise standard error of `mean`.
    pub stderr: DMatrix<f64>,
    pub samples: usize,
}

/// Monte Carlo Fisher: second moment of the score `W^T (e_y - p)` with
/// `y ~ p(.|h)`.
pub fn score_covariance_mc(
    model: &SoftmaxModel,
    h: &DVector<f64>,
    samples: usize,
    rng: RngSpec,
) -> Result<ScoreCovariance> {
    if samples < 2 {
        return Err(ZdpError::InvalidArgument(format!(
            "need at least 2 samples, got {samples}"
        )));
    }
    let p = model.probabilities(h)?;
    let dist =
        WeightedIndex::new(p.iter().copied()).map_err(|e| ZdpError::Numerical(e.to_string()))?;
    let mut counts = vec![0usize; model.classes()];
    let mut gen = rng.rng();
    for _ in 0..samples {
        counts[dist.sample(&mut gen)] += 1;
    }
    let d = model.dim();
    let n = samples as f64;
    let mut mean = DMatrix::zeros(d, d);
    let mut second = DMatrix::zeros(d, d);
    for (y, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let mut e = -p.clone();
        e[y] += 1.0;
        let score = model.w.transpose() * e;
        let outer = &score * score.transpose();
        let w = count as f64 / n;
        mean += &outer * w;
        second += outer.map(|v| v * v) * w;
    }
    let stderr = DMatrix::from_fn(d, d, |i, j| {
        ((second[(i, j)] - mean[(i, j)].powi(2)).max(0.0) / (n - 1.0)).sqrt()
    });
    Ok(ScoreCovariance {
        mean,
        stderr,
        samples,
    })
}

/// Softmax head whose rows lie in `im(H^T)`, so `W V0 = 0` and the Fisher is
/// silent on the null space of `H`.
#[derive(Debug, Clone)]
pub struct SilentFixture {
    pub model: SoftmaxModel,
    pub acts: ActivationMatrix,
    pub v0: NullBasis,
    /// Hidden state at which the Fisher is evaluated: the unit-norm first row of `H`.
    pub h: DVector<f64>,
}

impl SilentFixture {
    /// `H` is `4d x d` of the given rank; `W` is Gaussian with its rows
    /// projected onto `im(H^T)`.
    pub fn new(classes: usize, d: usize, rank: usize, rng: RngSpec) -> Result<Self> {
        let (acts, v0) = synth::rank_deficient_base(4 * d, d, rank, rng.substream(0))?;
        let raw = synth::standard_normal_matrix(classes, d, &mut rng.substream(1).rng());
        let w = &raw - &raw * v0.basis() * v0.basis().transpose();
        let row = acts.data().row(0).transpose();
        let h = &row / row.norm();
        Ok(Self {
            model: SoftmaxModel::new(w)?,
            acts,
            v0,
            h,
        })
    }

    /// Same fixture with one row of `W` tilted along the first null direction.
    pub fn leaky(mut self, amount: f64) -> Result<Self> {
        let mut w = self.model.w.clone();
        let v = self.v0.basis().column(0).transpose() * amount;
        let mut row = w.row_mut(0);
        row += v;
        self.model = SoftmaxModel::new(w)?;
        Ok(self)
    }

    /// Unit vector in `im(H^T)`: the normalized second row of `H`.
    pub fn image_direction(&self) -> DVector<f64> {
        let row = self.acts.data().row(1).transpose();
        &row / row.norm()
    }

    /// First null direction.
    pub fn null_direction(&self) -> DVector<f64> {
        self.v0.basis().column(0).into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture() -> SilentFixture {
        SilentFixture::new(8, 16, 10, RngSpec::new(3)).unwrap()
    }

    fn scales() -> Vec<f64> {
        (0..=8)
            .map(|i| 10f64.powf(-3.0 + 2.0 * i as f64 / 8.0))
            .collect()
    }

    #[test]
    fn zero_weights_give_zero_fisher() {
        let m = SoftmaxModel::new(DMatrix::zeros(3, 4)).unwrap();
        let f = softmax_fim(&m, &DVector::from_element(4, 1.0)).unwrap();
        assert_eq!(f.norm(), 0.0);
    }

    #[test]
    fn binary_logistic_closed_form() {
        let w = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let m = SoftmaxModel::new(DMatrix::from_rows(&[w.transpose(), -w.transpose()])).unwrap();
        let h = DVector::from_vec(vec![0.3, 0.1, -0.2]);
        let f = softmax_fim(&m, &h).unwrap();
        let z = w.dot(&h);
        let p = 1.0 / (1.0 + (-2.0 * z).exp());
        let expected = &w * w.transpose() * (4.0 * p * (1.0 - p));
        assert!((&f - expected).amax() < 1e-14);
        assert_eq!(
            linalg::singular_values(&f)
                .iter()
                .filter(|s| **s > 1e-12)
                .count(),
            1
        );
    }

    #[test]
    fn softmax_is_overflow_safe_and_shift_invariant() {
        let m = SoftmaxModel::new(DMatrix::from_row_slice(
            3,
            2,
            &[1000.0, 0.0, -1000.0, 0.0, 0.0, 1.0],
        ))
        .unwrap();
        let h = DVector::from_vec(vec![1.0, 0.5]);
        let p = m.probabilities(&h).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.sum() - 1.0).abs() < 1e-15);
        // Adding a constant to every logit leaves F unchanged.
        let w = synth::standard_normal_matrix(4, 3, &mut RngSpec::new(1).rng());
        let mut shifted = w.clone();
        for mut row in shifted.row_iter_mut() {
            row[0] += 3.0;
        }
        let h = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let f1 = softmax_fim(&SoftmaxModel::new(w).unwrap(), &h).unwrap();
        let shift_probe = SoftmaxModel::new(shifted).unwrap();
        let p1 = shift_probe.probabilities(&h).unwrap();
        let f2 = softmax_fim(&shift_probe, &h).unwrap();
        assert!((p1.sum() - 1.0).abs() < 1e-15);
        // F differs only through the shared column shift, which (diag p - p p^T) annihilates.
        assert!(
            (&f1 - &f2).amax() < 1e-12 * f1.amax().max(1.0),
            "{}",
            (&f1 - &f2).amax()
        );
    }

    #[test]
    fn fim_is_psd_with_kernel_of_w() {
        let fx = fixture();
        let f = softmax_fim(&fx.model, &fx.h).unwrap();
        probes::ensure_psd(&f).unwrap();
        assert!((&f * fx.v0.basis()).norm() < 1e-14);
    }

    #[test]
    fn fim_matches_score_covariance() {
        let fx = fixture();
        let f = softmax_fim(&fx.model, &fx.h).unwrap();
        let mc = score_covariance_mc(&fx.model, &fx.h, 100_000, RngSpec::new(8)).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let err = (mc.mean[(i, j)] - f[(i, j)]).abs();
                assert!(
                    err <= 3.0 * mc.stderr[(i, j)] + 1e-12 || err < 1e-14,
                    "({i},{j}) {err} vs {}",
                    mc.stderr[(i, j)]
                );
            }
        }
    }

    #[test]
    fn restricted_fisher_cases() {
        let fx = fixture();
        let f = softmax_fim(&fx.model, &fx.h).unwrap();
        let fp = restricted_fisher(&f, &fx.acts).unwrap();
        assert!((&fp - &f).amax() < 1e-12);
        let id = restricted_fisher(&DMatrix::identity(16, 16), &fx.acts).unwrap();
        let expected = DMatrix::identity(16, 16) - fx.v0.basis() * fx.v0.basis().transpose();
        assert!((&id - expected).amax() < 1e-10);
        assert!((&fp * fx.v0.basis()).norm() < 1e-12);
    }

    #[test]
    fn restricted_quadratic_form_decomposes() {
        let fx = fixture();
        let g = synth::standard_normal_matrix(16, 16, &mut RngSpec::new(4).rng());
        let f = &g * g.transpose();
        let fp = restricted_fisher(&f, &fx.acts).unwrap();
        let v1 = nullspace::row_space_basis(&fx.acts, CutoffPolicy::Default).unwrap();
        let dtheta = synth::standard_normal_vector(16, &mut RngSpec::new(5).rng());
        let alpha = v1.transpose() * &dtheta;
        let lhs = dtheta.dot(&(&fp * &dtheta));
        let rhs = alpha.dot(&(v1.transpose() * &f * &v1 * &alpha));
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn null_direction_kl_is_zero() {
        let fx = fixture();
        let res =
            kl_second_order_check(&fx.model, &fx.h, &fx.acts, &fx.null_direction(), &scales())
                .unwrap();
        for r in res {
            assert!(r.kl_exact < 1e-28 && r.kl_quadratic < 1e-28, "{r:?}");
        }
    }

    #[test]
    fn image_direction_residual_is_cubic() {
        let fx = fixture();
        let res =
            kl_second_order_check(&fx.model, &fx.h, &fx.acts, &fx.image_direction(), &scales())
                .unwrap();
        let exponent = residual_exponent(&res).unwrap();
        assert!(exponent >= 2.9, "{exponent}");
        for r in &res {
            let direct =
                categorical_kl(&fx.model, &fx.h, &(&fx.h + fx.image_direction() * r.scale))
                    .unwrap();
            assert!(
                (direct - r.kl_exact).abs() < 1e-12,
                "{direct} {}",
                r.kl_exact
            );
        }
    }

    #[test]
    fn mixed_direction_matches_image_part() {
        let fx = fixture();
        let v1 = fx.image_direction();
        let mixed = fx.null_direction() + &v1;
        let a = kl_second_order_check(&fx.model, &fx.h, &fx.acts, &mixed, &scales()).unwrap();
        let b = kl_second_order_check(&fx.model, &fx.h, &fx.acts, &v1, &scales()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.kl_exact - y.kl_exact).abs() <= 1e-12 * y.kl_exact.max(1e-300) + 1e-20);
            assert!((x.kl_quadratic - y.kl_quadratic).abs() <= 1e-9 * y.kl_quadratic);
        }
    }

    #[test]
    fn silence_checks() {
        let fx = fixture();
        let f = softmax_fim(&fx.model, &fx.h).unwrap();
        let check = fisher_silence_check(&f, &fx.v0, 1e-12).unwrap();
        assert!(check.silent && check.residual <= 1e-14);
        let leaky = fixture().leaky(1.0).unwrap();
        let fl = softmax_fim(&leaky.model, &leaky.h).unwrap();
        let check = fisher_silence_check(&fl, &leaky.v0, 1e-12).unwrap();
        assert!(!check.silent);
        let fnc = probes::fnc(&fl, &leaky.v0).unwrap();
        assert!((check.residual - fnc.sqrt()).abs() < 1e-14 * check.residual.max(1.0));
    }

    #[test]
    fn model_validation() {
        assert!(SoftmaxModel::new(DMatrix::zeros(1, 3)).is_err());
        let m = SoftmaxModel::new(DMatrix::zeros(2, 3)).unwrap();
        assert!(softmax_fim(&m, &DVector::zeros(2)).is_err());
        assert!(softmax_fim(&m, &DVector::from_element(3, f64::NAN)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn fim_always_psd(seed in any::<u64>(), c in 2usize..6, d in 1usize..8, scale in 0.01f64..50.0) {
            let mut rng = RngSpec::new(seed).rng();
            let m = SoftmaxModel::new(synth::standard_normal_matrix(c, d, &mut rng) * scale).unwrap();
            let h = synth::standard_normal_vector(d, &mut rng);
            let f = softmax_fim(&m, &h).unwrap();
            let (vals, _) = linalg::sym_eigen(&f);
            prop_assert!(vals[0] >= -1e-10 * vals[d - 1].abs().max(1.0));
            prop_assert_eq!(&f, &f.transpose());
        }
    }
}
