//! Streaming null-space tracker, null-aligned low-rank updates, and the
//! regret measurement harness.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certificates::LoraFactors;
use crate::error::{Result, ZdpError};
use crate::linalg;
use crate::nullspace::Projector;
use crate::synth::{self, GramStream, RngSpec};

/// Relative pivot size below which the tracker's QR reports a collapse.
pub const QR_COLLAPSE_TOL: f64 = 1e-10;

/// Synthetic stream with population Gram `Sigma` having `null_dim` zero
/// eigenvalues and the listed nonzero eigenvalues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub null_dim: usize,
    pub spectrum: Vec<f64>,
    pub batch_rows: usize,
    pub seed: u64,
}

impl StreamSpec {
    /// Nonzero spectrum spaced linearly from `delta` to `lambda_max`.
    pub fn linear(
        d: usize,
        k: usize,
        m: usize,
        delta: f64,
        lambda_max: f64,
        seed: u64,
    ) -> Result<Self> {
        if k >= d {
            return Err(ZdpError::InvalidArgument(format!(
                "null dimension k = {k} must be below d = {d}"
            )));
        }
        let p = d - k;
        let spectrum = (0..p)
            .map(|i| {
                if p == 1 {
                    delta
                } else {
                    delta + (lambda_max - delta) * i as f64 / (p - 1) as f64
                }
            })
            .collect();
        let spec = Self {
            null_dim: k,
            spectrum,
            batch_rows: m,
            seed,
        };
        spec.validate()?;
        if lambda_max < delta {
            return Err(ZdpError::InvalidArgument(format!(
                "lambda_max {lambda_max} is below delta {delta}"
            )));
        }
        Ok(spec)
    }

    /// Every nonzero eigenvalue equal to `delta`.
    pub fn flat(d: usize, k: usize, m: usize, delta: f64, seed: u64) -> Result<Self> {
        Self::linear(d, k, m, delta, delta, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.null_dim == 0 {
            return Err(ZdpError::InvalidArgument(
                "stream needs at least one null direction".into(),
            ));
        }
        if self.spectrum.is_empty() {
            return Err(ZdpError::InvalidArgument(
                "stream needs at least one nonzero eigenvalue".into(),
            ));
        }
        if self.batch_rows == 0 {
            return Err(ZdpError::InvalidArgument(
                "batch rows m must be >= 1".into(),
            ));
        }
        if let Some(bad) = self.spectrum.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(ZdpError::InvalidArgument(format!(
                "nonzero eigenvalues must be positive, got {bad}"
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.null_dim + self.spectrum.len()
    }

    /// Smallest nonzero eigenvalue `delta`.
    pub fn eigengap(&self) -> f64 {
        self.spectrum.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `||Sigma||_2`.
    pub fn sigma_norm(&self) -> f64 {
        self.spectrum.iter().copied().fold(0.0, f64::max)
    }

    /// Largest step constant allowed by `c <= 1 / (4 ||Sigma||_2)`.
    pub fn step_constant_limit(&self) -> f64 {
        1.0 / (4.0 * self.sigma_norm())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrackerInit {
    Random,
    Warm(DMatrix<f64>),
}

/// How the projector from the previous basis enters a tracker step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Deflation {
    /// `V <- V - eta (I - P) G V`: only the gradient step is deflated.
    #[default]
    Update,
    /// `v <- v - eta G v` then `v <- v - P v` on the whole iterate. Since
    /// `P v = v` for the current columns this keeps only `-eta (I - P) G v`.
    Iterate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    basis: DMatrix<f64>,
    projector: DMatrix<f64>,
    t: u64,
    c: f64,
    deflation: Deflation,
    score_history: Vec<f64>,
}

pub fn ont_init(
    d: usize,
    k: usize,
    c: f64,
    init: TrackerInit,
    rng: RngSpec,
) -> Result<TrackerState> {
    if k == 0 || k > d {
        return Err(ZdpError::InvalidArgument(format!(
            "target nullity k = {k} must be in 1..={d}"
        )));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(ZdpError::InvalidArgument(format!(
            "step constant c must be positive, got {c}"
        )));
    }
    let basis = match init {
        TrackerInit::Random => synth::haar_orthonormal(d, k, &mut rng.rng()),
        TrackerInit::Warm(v) => {
            if v.shape() != (d, k) {
                return Err(ZdpError::DimensionMismatch(format!(
                    "warm basis is {:?}, expected ({d}, {k})",
                    v.shape()
                )));
            }
            linalg::ensure_finite(&v)?;
            linalg::ensure_orthonormal(&v, 1e-8)?;
            v
        }
    };
    let projector = linalg::symmetrize(&(&basis * basis.transpose()));
    Ok(TrackerState {
        basis,
        projector,
        t: 0,
        c,
        deflation: Deflation::Update,
        score_history: Vec::new(),
    })
}

impl TrackerState {
    pub fn with_deflation(mut self, deflation: Deflation) -> Self {
        self.deflation = deflation;
        self
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn projector(&self) -> &DMatrix<f64> {
        &self.projector
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn k(&self) -> usize {
        self.basis.ncols()
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn deflation(&self) -> Deflation {
        self.deflation
    }

    pub fn score_history(&self) -> &[f64] {
        &self.score_history
    }

    /// One tracker step on batch `h` (`m x d`); returns `D_t`.
    pub fn step(&mut self, h: &DMatrix<f64>) -> Result<f64> {
        if h.ncols() != self.dim() || h.nrows() == 0 {
            return Err(ZdpError::DimensionMismatch(format!(
                "batch is {:?}, tracker dimension is {}",
                h.shape(),
                self.dim()
            )));
        }
        linalg::ensure_finite(h)?;
        let t = self.t + 1;
        let eta = self.c / t as f64;
        let g = h.transpose() * h;
        let gv = &g * &self.basis;
        let next = match self.deflation {
            Deflation::Update => &self.basis - (&gv - &self.projector * &gv) * eta,
            Deflation::Iterate => {
                let w = &self.basis - gv * eta;
                &w - &self.projector * &w
            }
        };
        // Pivots are measured against the unit columns of the previous basis,
        // so a deflation that annihilates the iterate is caught.
        let (q, r) = linalg::thin_qr(&next, 0.0)?;
        let scale = (0..r.ncols()).fold(1.0_f64, |m, j| m.max(r[(j, j)].abs()));
        if let Some(column) = (0..r.ncols()).find(|&j| r[(j, j)].abs() <= QR_COLLAPSE_TOL * scale) {
            let pivot = r[(column, column)].abs();
            log::error!("tracker QR collapsed at step {t}, column {column} (pivot {pivot:e})");
            return Err(ZdpError::RankCollapse { column, pivot });
        }
        self.basis = q;
        self.projector = linalg::symmetrize(&(&self.basis * self.basis.transpose()));
        self.t = t;
        let score = (h * &self.basis).norm_squared() / (h.nrows() * self.k()) as f64;
        self.score_history.push(score);
        Ok(score)
    }
}

/// One adapted layer: factors plus the null projector they live in.
#[derive(Debug, Clone, PartialEq)]
pub struct OnalLayer {
    pub factors: LoraFactors,
    pub projector: Projector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnalState {
    layers: Vec<OnalLayer>,
    t: u64,
    c: f64,
    clip: f64,
    reorth_period: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnalStepInfo {
    pub t: u64,
    pub eta: f64,
    pub reorthonormalized: bool,
}

fn clip_factor(g: &DMatrix<f64>, clip: f64) -> f64 {
    let norm = g.norm();
    if clip > 0.0 && norm > 0.0 {
        (clip / norm).min(1.0)
    } else {
        1.0
    }
}

impl OnalState {
    /// Factors are projected into `im(P)` on entry.
    pub fn new(
        layers: Vec<(LoraFactors, Projector)>,
        c: f64,
        clip: f64,
        reorth_period: u64,
    ) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(ZdpError::InvalidArgument(format!(
                "step constant c must be positive, got {c}"
            )));
        }
        if !(clip >= 0.0 && clip.is_finite()) {
            return Err(ZdpError::InvalidArgument(format!(
                "clip must be >= 0, got {clip}"
            )));
        }
        if reorth_period == 0 {
            return Err(ZdpError::InvalidArgument(
                "reorthonormalization period must be >= 1".into(),
            ));
        }
        let layers = layers
            .into_iter()
            .map(|(f, p)| {
                if p.dim() != f.d() {
                    return Err(ZdpError::DimensionMismatch(format!(
                        "projector is {0}x{0}, factors live in dimension {1}",
                        p.dim(),
                        f.d()
                    )));
                }
                let factors = LoraFactors::new(p.matrix() * f.a(), p.matrix() * f.b())?;
                Ok(OnalLayer {
                    factors,
                    projector: p,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            t: 0,
            c,
            clip,
            reorth_period,
        })
    }

    pub fn layers(&self) -> &[OnalLayer] {
        &self.layers
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// Projected, optionally clipped, descent step on every layer followed by
    /// reprojection; every `reorth_period` steps each factor is replaced by
    /// the product of its thin-QR factors.
    pub fn step(&mut self, grads: &[(DMatrix<f64>, DMatrix<f64>)]) -> Result<OnalStepInfo> {
        if grads.len() != self.layers.len() {
            return Err(ZdpError::DimensionMismatch(format!(
                "{} gradient pairs for {} layers",
                grads.len(),
                self.layers.len()
            )));
        }
        for (layer, (ga, gb)) in self.layers.iter().zip(grads) {
            let shape = layer.factors.a.shape();
            if ga.shape() != shape || gb.shape() != shape {
                return Err(ZdpError::DimensionMismatch(format!(
                    "gradients {:?}/{:?} do not match factors {shape:?}",
                    ga.shape(),
                    gb.shape()
                )));
            }
            linalg::ensure_finite(ga)?;
            linalg::ensure_finite(gb)?;
        }
        let t = self.t + 1;
        let eta = self.c / t as f64;
        let reorth = t.is_multiple_of(self.reorth_period);
        for (layer, (ga, gb)) in self.layers.iter_mut().zip(grads) {
            let p = layer.projector.matrix();
            let mut g_a = p * ga;
            let mut g_b = p * gb;
            g_a *= clip_factor(&g_a, self.clip);
            g_b *= clip_factor(&g_b, self.clip);
            let mut a = p * (&layer.factors.a - g_a * eta);
            let mut b = p * (&layer.factors.b - g_b * eta);
            if reorth {
                let (qa, ra) = linalg::thin_qr(&a, 0.0)?;
                let (qb, rb) = linalg::thin_qr(&b, 0.0)?;
                a = qa * ra;
                b = qb * rb;
            }
            layer.factors.a = a;
            layer.factors.b = b;
        }
        self.t = t;
        Ok(OnalStepInfo {
            t,
            eta,
            reorthonormalized: reorth,
        })
    }

    /// Largest `||(I - P) X||_F / ||X||_F` over all factors (0 for zero factors).
    pub fn containment_defect(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| {
                let p = l.projector.matrix();
                [&l.factors.a, &l.factors.b].map(|x| {
                    let norm = x.norm();
                    if norm == 0.0 {
                        0.0
                    } else {
                        (x - p * x).norm() / norm
                    }
                })
            })
            .fold(0.0, f64::max)
    }
}

/// Loss `||A B^T - T||_F^2 / 2` over one layer's factor product.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSurrogate {
    pub target: DMatrix<f64>,
}

impl QuadraticSurrogate {
    pub fn loss(&self, f: &LoraFactors) -> f64 {
        0.5 * (f.delta_w() - &self.target).norm_squared()
    }

    /// `(R B, R^T A)` with residual `R = A B^T - T`.
    pub fn gradients(&self, f: &LoraFactors) -> (DMatrix<f64>, DMatrix<f64>) {
        let r = f.delta_w() - &self.target;
        (&r * f.b(), r.transpose() * f.a())
    }
}

/// Activation change `H (A B^T)^T` induced by `h -> h + A B^T h`.
pub fn induced_delta_h(h: &DMatrix<f64>, f: &LoraFactors) -> DMatrix<f64> {
    h * f.b() * f.a().transpose()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    /// Step constant; `None` uses the largest value allowed by `||Sigma||_2`.
    pub c: Option<f64>,
    /// Start at the true null basis instead of a random one.
    pub warm: bool,
    pub deflation: Deflation,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            c: None,
            warm: false,
            deflation: Deflation::Update,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretRun {
    pub seed: u64,
    pub c: f64,
    pub steps: usize,
    pub scores: Vec<f64>,
    pub oracle_scores: Vec<f64>,
    /// `D_t - D_t*`.
    pub gaps: Vec<f64>,
    /// `R_t`, the running sum of gaps.
    pub cumulative: Vec<f64>,
    /// `(a, b)` of `R_t ~ a ln t + b` over `t in [T/10, T]`.
    pub log_fit: (f64, f64),
    /// Mean of `||H_t^T H_t - Sigma||_2` over the first 1000 batches.
    pub tau2_estimate: f64,
    pub step_warning: Option<String>,
}

impl RegretRun {
    pub fn regret(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// `R_t` at 1-based step `t`.
    pub fn regret_at(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.cumulative[t - 1]
        }
    }
}

fn fit_window(steps: usize) -> std::ops::RangeInclusive<usize> {
    (steps / 10).max(1)..=steps
}

/// Least squares of `R_t` against `ln t` over `t in [T/10, T]`.
pub fn log_fit(cumulative: &[f64]) -> (f64, f64) {
    let window = fit_window(cumulative.len());
    let xs: Vec<f64> = window.clone().map(|t| (t as f64).ln()).collect();
    let ys: Vec<f64> = window.map(|t| cumulative[t - 1]).collect();
    linalg::linear_fit(&xs, &ys)
}

fn step_warning(spec: &StreamSpec, c: f64) -> Option<String> {
    let limit = spec.step_constant_limit();
    (c > limit * (1.0 + 1e-12)).then(|| {
        let msg = format!("step constant c = {c} exceeds 1/(4||Sigma||_2) = {limit}");
        log::warn!("{msg}");
        msg
    })
}

/// Runs the tracker for `steps` batches of the stream and measures its
/// excess score over the oracle that knows `ker(Sigma)`.
///
/// Batches come from [`synth::gram_stream`]; the random initial basis uses
/// `substream(1)` of the stream seed.
pub fn regret_harness(spec: &StreamSpec, steps: usize, cfg: &TrackerConfig) -> Result<RegretRun> {
    spec.validate()?;
    if steps == 0 {
        return Err(ZdpError::InvalidArgument("need at least one step".into()));
    }
    let stream = synth::gram_stream(spec)?;
    regret_on_stream(spec, &stream, steps, cfg)
}

fn regret_on_stream(
    spec: &StreamSpec,
    stream: &GramStream,
    steps: usize,
    cfg: &TrackerConfig,
) -> Result<RegretRun> {
    let c = cfg.c.unwrap_or_else(|| spec.step_constant_limit());
    let warning = step_warning(spec, c);
    let (d, k, m) = (spec.dim(), spec.null_dim, spec.batch_rows);
    let v0 = stream.true_null_basis();
    let init = if cfg.warm {
        TrackerInit::Warm(v0.clone())
    } else {
        TrackerInit::Random
    };
    let mut tracker = ont_init(d, k, c, init, RngSpec::new(spec.seed).substream(1))?
        .with_deflation(cfg.deflation);
    let sigma = stream.sigma();
    let tau_steps = steps.min(1000);
    let mut scores = Vec::with_capacity(steps);
    let mut oracle_scores = Vec::with_capacity(steps);
    let mut tau_sum = 0.0;
    for t in 1..=steps {
        let h = stream.batch(t as u64);
        if t <= tau_steps {
            tau_sum += linalg::spectral_norm(&(h.transpose() * &h - &sigma));
        }
        scores.push(tracker.step(&h)?);
        oracle_scores.push((&h * v0).norm_squared() / (m * k) as f64);
    }
    let gaps: Vec<f64> = scores
        .iter()
        .zip(&oracle_scores)
        .map(|(s, o)| s - o)
        .collect();
    let cumulative: Vec<f64> = gaps
        .iter()
        .scan(0.0, |acc, g| {
            *acc += g;
            Some(*acc)
        })
        .collect();
    Ok(RegretRun {
        seed: spec.seed,
        c,
        steps,
        log_fit: log_fit(&cumulative),
        scores,
        oracle_scores,
        gaps,
        cumulative,
        tau2_estimate: tau_sum / tau_steps as f64,
        step_warning: warning,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretSweep {
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub mean_gap: Vec<f64>,
    pub stderr_gap: Vec<f64>,
    pub mean_cumulative: Vec<f64>,
    /// Fit of the mean cumulative regret against `ln t`.
    pub log_fit: (f64, f64),
    /// `C_hat` from the least-squares fit `mean_gap_t ~ C / t` over
    /// `t in [T/10, T]`.
    pub c_hat: f64,
    pub step_warning: Option<String>,
    pub tau2_estimate: f64,
}

impl RegretSweep {
    pub fn regret_at(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.mean_cumulative[t - 1]
        }
    }
}

/// Independent runs, one per seed, in parallel. Each run uses `spec` with
/// its seed replaced. Results are ordered by seed position.
pub fn regret_sweep(
    spec: &StreamSpec,
    steps: usize,
    cfg: &TrackerConfig,
    seeds: &[u64],
) -> Result<RegretSweep> {
    if seeds.is_empty() {
        return Err(ZdpError::InvalidArgument("need at least one seed".into()));
    }
    let runs: Vec<RegretRun> = seeds
        .par_iter()
        .map(|&seed| {
            regret_harness(
                &StreamSpec {
                    seed,
                    ..spec.clone()
                },
                steps,
                cfg,
            )
        })
        .collect::<Result<_>>()?;
    Ok(aggregate_runs(&runs))
}

/// Mean and standard error curves of several runs of equal length.
pub fn aggregate_runs(runs: &[RegretRun]) -> RegretSweep {
    let steps = runs.iter().map(|r| r.steps).min().unwrap_or(0);
    let n = runs.len() as f64;
    let mut mean_gap = vec![0.0; steps];
    let mut stderr_gap = vec![0.0; steps];
    let mut mean_cumulative = vec![0.0; steps];
    for i in 0..steps {
        let mean = runs.iter().map(|r| r.gaps[i]).sum::<f64>() / n;
        mean_gap[i] = mean;
        if runs.len() > 1 {
            let var = runs.iter().map(|r| (r.gaps[i] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            stderr_gap[i] = (var / n).sqrt();
        }
        mean_cumulative[i] = runs.iter().map(|r| r.cumulative[i]).sum::<f64>() / n;
    }
    let window = fit_window(steps);
    let (num, den) = window.fold((0.0, 0.0), |(num, den), t| {
        let inv = 1.0 / t as f64;
        (num + mean_gap[t - 1] * inv, den + inv * inv)
    });
    RegretSweep {
        seeds: runs.iter().map(|r| r.seed).collect(),
        steps,
        log_fit: if steps > 0 {
            log_fit(&mean_cumulative)
        } else {
            (0.0, 0.0)
        },
        c_hat: if den > 0.0 { num / den } else { 0.0 },
        mean_gap,
        stderr_gap,
        mean_cumulative,
        step_warning: runs.iter().find_map(|r| r.step_warning.clone()),
        tau2_estimate: runs.iter().map(|r| r.tau2_estimate).sum::<f64>() / n,
    }
}

/// `ceil(C / eps)`.
pub fn epsilon_accuracy_time(c: f64, eps: f64) -> Result<u64> {
    if !(c > 0.0 && eps > 0.0 && c.is_finite() && eps.is_finite()) {
        return Err(ZdpError::InvalidArgument(format!(
            "C and eps must be positive, got {c} and {eps}"
        )));
    }
    Ok((c / eps).ceil() as u64)
}

/// First 1-based step from which every later gap is at most `eps`.
pub fn empirical_crossing_time(gaps: &[f64], eps: f64) -> Option<usize> {
    let last_bad = gaps.iter().rposition(|&g| g > eps);
    match last_bad {
        None => Some(1),
        Some(i) if i + 1 < gaps.len() => Some(i + 2),
        Some(_) => None,
    }
}
