//! The four zero-direction probes: NVL, SNL, FNC and the BINA adversary.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ZdpError};
use crate::linalg;
use crate::nullspace::{ActivationMatrix, NullBasis, Projector, Side};
use crate::thresholds::Alarm;

/// Symmetry / PSD tolerance for Fisher matrices passed to [`fnc`].
pub const PSD_TOL: f64 = 1e-8;

/// Per-layer probe values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub layer_id: Option<String>,
    pub nvl: f64,
    pub d_score: f64,
    pub snl: f64,
    pub fnc: Option<f64>,
    pub bina_score: Option<f64>,
    pub k: usize,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alarms: Vec<Alarm>,
}

impl ProbeReport {
    /// NVL, D and SNL of perturbed activations against a base null basis.
    pub fn compute(h_hat: &ActivationMatrix, v0: &NullBasis) -> Result<Self> {
        let (nvl, d_score) = nvl(h_hat, v0)?;
        let snl = snl(h_hat, v0)?;
        Ok(Self {
            layer_id: h_hat.layer_id().map(str::to_owned),
            nvl,
            d_score,
            snl,
            fnc: None,
            bina_score: None,
            k: v0.k(),
            n: h_hat.n_tokens(),
            alarms: Vec::new(),
        })
    }

    pub fn with_fnc(mut self, fisher: &DMatrix<f64>, v0: &NullBasis) -> Result<Self> {
        self.fnc = Some(fnc(fisher, v0)?);
        Ok(self)
    }

    pub fn with_bina_score(mut self, score: f64) -> Self {
        self.bina_score = Some(score);
        self
    }
}

fn check_probe_inputs(h_hat: &ActivationMatrix, v0: &NullBasis) -> Result<()> {
    if v0.side() != Side::Right {
        return Err(ZdpError::InvalidArgument(
            "leak probes need a right null basis".into(),
        ));
    }
    if v0.ambient_dim() != h_hat.dim() {
        return Err(ZdpError::DimensionMismatch(format!(
            "activations have d = {}, basis lives in dimension {}",
            h_hat.dim(),
            v0.ambient_dim()
        )));
    }
    if v0.k() == 0 {
        return Err(ZdpError::EmptyNullSpace);
    }
    Ok(())
}

/// Null-variance leak `||H_hat V0||_F^2` and its normalisation `NVL / (n k)`.
pub fn nvl(h_hat: &ActivationMatrix, v0: &NullBasis) -> Result<(f64, f64)> {
    check_probe_inputs(h_hat, v0)?;
    let energy = (h_hat.data() * v0.basis()).norm_squared();
    let d_score = energy / (h_hat.n_tokens() as f64 * v0.k() as f64);
    Ok((energy, d_score))
}

/// Spectral null leakage `||H_hat V0||_F^2 / ||H_hat||_F^2`, in `[0, 1]`.
pub fn snl(h_hat: &ActivationMatrix, v0: &NullBasis) -> Result<f64> {
    check_probe_inputs(h_hat, v0)?;
    let total = h_hat.frobenius_sq();
    if total == 0.0 {
        return Err(ZdpError::UndefinedRatio);
    }
    let leak = (h_hat.data() * v0.basis()).norm_squared();
    Ok((leak / total).min(1.0))
}

/// Checks that `f` is symmetric and positive semidefinite to [`PSD_TOL`]
/// (relative to its largest entry).
pub fn ensure_psd(f: &DMatrix<f64>) -> Result<()> {
    if !f.is_square() {
        return Err(ZdpError::NotPsd(format!(
            "matrix is {}x{}",
            f.nrows(),
            f.ncols()
        )));
    }
    linalg::ensure_finite(f)?;
    let scale = f.amax().max(1.0);
    let asym = (f - f.transpose()).amax();
    if asym > PSD_TOL * scale {
        return Err(ZdpError::NotPsd(format!("asymmetry {asym:.3e}")));
    }
    let (vals, _) = linalg::sym_eigen(f);
    if let Some(&min) = vals.first() {
        if min < -PSD_TOL * scale {
            return Err(ZdpError::NotPsd(format!("negative eigenvalue {min:.3e}")));
        }
    }
    Ok(())
}

/// Fisher null conservation `||F V0||_F^2`.
pub fn fnc(fisher: &DMatrix<f64>, v0: &NullBasis) -> Result<f64> {
    ensure_psd(fisher)?;
    if fisher.nrows() != v0.ambient_dim() {
        return Err(ZdpError::DimensionMismatch(format!(
            "Fisher is {}x{}, basis lives in dimension {}",
            fisher.nrows(),
            fisher.ncols(),
            v0.ambient_dim()
        )));
    }
    Ok((fisher * v0.basis()).norm_squared())
}

// ---------------------------------------------------------------------------
// BINA
// ---------------------------------------------------------------------------

/// Differentiable map from hidden states to logits.
pub trait LogitMap {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn logits(&self, h: &DVector<f64>) -> Result<DVector<f64>>;

    /// Jacobian `d logits / d h` (`output_dim x input_dim`). `None` selects
    /// central finite differences.
    fn jacobian(&self, _h: &DVector<f64>) -> Option<Result<DMatrix<f64>>> {
        None
    }
}

/// Scalar score `L(h)` for the score-functional objective.
pub trait ScoreFunctional {
    fn value(&self, h: &DVector<f64>) -> Result<f64>;

    fn gradient(&self, _h: &DVector<f64>) -> Option<Result<DVector<f64>>> {
        None
    }
}

/// `f(h) = W h`.
#[derive(Debug, Clone)]
pub struct LinearLogits {
    pub weights: DMatrix<f64>,
}

impl LogitMap for LinearLogits {
    fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn logits(&self, h: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.weights * h)
    }

    fn jacobian(&self, _h: &DVector<f64>) -> Option<Result<DMatrix<f64>>> {
        Some(Ok(self.weights.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BinaObjective {
    /// Ascend a caller-supplied scalar `L(h + delta)`.
    ScoreFunctional,
    /// Ascend `||f(h + delta) - f(h)||_2^2`.
    #[default]
    LogitDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaConfig {
    pub step_size: f64,
    pub budget: f64,
    pub iterations: usize,
    pub objective: BinaObjective,
    /// Record the per-iteration trajectory.
    pub verbose: bool,
}

impl BinaConfig {
    pub fn new(step_size: f64, budget: f64, iterations: usize) -> Result<Self> {
        let cfg = Self {
            step_size,
            budget,
            iterations,
            objective: BinaObjective::default(),
            verbose: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_objective(mut self, objective: BinaObjective) -> Self {
        self.objective = objective;
        self
    }

    pub fn verbose(mut self) -> Self {
        self.verbose = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.step_size.is_nan()
            || self.step_size <= 0.0
            || self.budget.is_nan()
            || self.budget <= 0.0
            || self.iterations == 0
        {
            return Err(ZdpError::InvalidArgument(format!(
                "BINA needs step size > 0, budget > 0, iterations >= 1 (got {}, {}, {})",
                self.step_size, self.budget, self.iterations
            )));
        }
        Ok(())
    }
}

/// State after one BINA iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaIterate {
    pub iteration: usize,
    pub score: f64,
    pub delta_norm: f64,
    /// `||(I - P) delta||_2`.
    pub off_null_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaOutcome {
    pub delta: DVector<f64>,
    pub score: f64,
    pub iterations_run: usize,
    /// Set when the projected gradient vanished (`||s|| < 1e-12`) and the
    /// search stopped before `T` iterations.
    pub stopped_early: bool,
    pub trajectory: Option<Vec<BinaIterate>>,
}

const STEP_FLOOR: f64 = 1e-12;

/// Bidirectional null adversary.
///
/// Starting from `delta = 0`, each iteration takes the objective gradient `g`
/// at `h + delta`, slices it through the left projector (`Q g`) and back into
/// the right null space (`s = P Q g`), normalises `s` with a floor of 1e-12,
/// steps `delta += eta s`, projects onto the L2 ball of radius `epsilon` and
/// re-applies `P`. The score is `||Q (f(h + delta) - f(h))||_2`.
///
/// A projected gradient below 1e-12 stops the search early. Note that the
/// logit-difference objective has a vanishing gradient at `delta = 0` for any
/// smooth map, so in that mode the search returns immediately with
/// `delta = 0`.
pub fn bina(
    h: &DVector<f64>,
    p: &Projector,
    q: &Projector,
    model: &dyn LogitMap,
    functional: Option<&dyn ScoreFunctional>,
    cfg: &BinaConfig,
) -> Result<BinaOutcome> {
    cfg.validate()?;
    let d = h.len();
    linalg::ensure_finite_vec(h)?;
    if p.dim() != d || q.dim() != d || model.input_dim() != d || model.output_dim() != d {
        return Err(ZdpError::DimensionMismatch(format!(
            "BINA needs P, Q, f: R^{d} -> R^{d}; got P {}, Q {}, f {} -> {}",
            p.dim(),
            q.dim(),
            model.input_dim(),
            model.output_dim()
        )));
    }
    if cfg.objective == BinaObjective::ScoreFunctional && functional.is_none() {
        return Err(ZdpError::InvalidArgument(
            "score_functional objective needs a score functional".into(),
        ));
    }
    let base_logits = model.logits(h)?;
    let score_of = |delta: &DVector<f64>| -> Result<f64> {
        let diff = model.logits(&(h + delta))? - &base_logits;
        Ok((q.matrix() * diff).norm())
    };

    let mut delta = DVector::zeros(d);
    let mut trajectory = cfg.verbose.then(Vec::new);
    let mut iterations_run = 0;
    let mut stopped_early = false;
    for t in 1..=cfg.iterations {
        let point = h + &delta;
        let g = match cfg.objective {
            BinaObjective::LogitDifference => {
                logit_difference_gradient(model, &point, &base_logits)?
            }
            BinaObjective::ScoreFunctional => {
                functional_gradient(functional.expect("checked"), &point)?
            }
        };
        linalg::ensure_finite_vec(&g)
            .map_err(|_| ZdpError::Numerical(format!("non-finite gradient at iteration {t}")))?;
        let g_left = q.matrix() * g;
        let s = p.matrix() * g_left;
        let s_norm = s.norm();
        if s_norm < STEP_FLOOR {
            stopped_early = true;
            break;
        }
        let s = s / s_norm.max(STEP_FLOOR);
        delta += s * cfg.step_size;
        let norm = delta.norm();
        if norm > 0.0 {
            delta *= (cfg.budget / norm).min(1.0);
        }
        delta = p.matrix() * delta;
        linalg::ensure_finite_vec(&delta)
            .map_err(|_| ZdpError::Numerical(format!("non-finite delta at iteration {t}")))?;
        iterations_run = t;
        if let Some(traj) = trajectory.as_mut() {
            traj.push(BinaIterate {
                iteration: t,
                score: score_of(&delta)?,
                delta_norm: delta.norm(),
                off_null_norm: (&delta - p.matrix() * &delta).norm(),
            });
        }
    }
    let score = score_of(&delta)?;
    Ok(BinaOutcome {
        delta,
        score,
        iterations_run,
        stopped_early,
        trajectory,
    })
}

fn fd_step(x: &DVector<f64>) -> f64 {
    1e-5 * (1.0 + x.amax())
}

/// `grad ||f(x) - f(h)||^2 = 2 J(x)^T (f(x) - f(h))`.
fn logit_difference_gradient(
    model: &dyn LogitMap,
    x: &DVector<f64>,
    base: &DVector<f64>,
) -> Result<DVector<f64>> {
    match model.jacobian(x) {
        Some(jac) => {
            let diff = model.logits(x)? - base;
            Ok(jac?.transpose() * diff * 2.0)
        }
        None => {
            let objective =
                |y: &DVector<f64>| -> Result<f64> { Ok((model.logits(y)? - base).norm_squared()) };
            central_difference(&objective, x)
        }
    }
}

fn functional_gradient(functional: &dyn ScoreFunctional, x: &DVector<f64>) -> Result<DVector<f64>> {
    match functional.gradient(x) {
        Some(g) => g,
        None => central_difference(&|y: &DVector<f64>| functional.value(y), x),
    }
}

/// Central differences with step `1e-5 * (1 + ||x||_inf)`.
pub fn central_difference(
    f: &dyn Fn(&DVector<f64>) -> Result<f64>,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let step = fd_step(x);
    let mut grad = DVector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe)?;
        probe[i] = x[i] - step;
        let down = f(&probe)?;
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}
