//! Deterministic generators for every synthetic fixture.
//!
//! All randomness flows from [`RngSpec`]: a ChaCha20 stream keyed by the
//! 64-bit seed (expanded with `seed_from_u64`) and selected with
//! `set_stream(stream_id)`. Normal variates come from
//! `rand_distr::StandardNormal`. Matrices are filled in row-major order.
//! Derived sub-streams replace the seed with
//! `splitmix64(seed ^ (stream_id * 0x9E3779B97F4A7C15))` and take the child
//! index as their stream id, so parallel consumers never share a stream.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::certificates::LoraFactors;
use crate::error::{Result, ZdpError};
use crate::linalg;
use crate::nullspace::{self, ActivationMatrix, CutoffPolicy, NullBasis, Side};
use crate::online::StreamSpec;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed plus stream selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngSpec {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngSpec {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream_id: 0 }
    }

    /// Independent child stream `index` of this stream.
    pub fn substream(&self, index: u64) -> Self {
        Self {
            seed: splitmix64(self.seed ^ self.stream_id.wrapping_mul(GOLDEN)),
            stream_id: index,
        }
    }

    pub fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

pub fn standard_normal_matrix<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> DMatrix<f64> {
    let vals: Vec<f64> = (0..rows * cols)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    DMatrix::from_row_slice(rows, cols, &vals)
}

pub fn standard_normal_vector<R: Rng + ?Sized>(len: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(len, (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Haar-distributed `d x k` orthonormal frame: the Q factor of a Gaussian
/// matrix with the diagonal of R made positive.
pub fn haar_orthonormal<R: Rng + ?Sized>(d: usize, k: usize, rng: &mut R) -> DMatrix<f64> {
    assert!(k <= d, "haar_orthonormal needs k <= d");
    loop {
        let g = standard_normal_matrix(d, k, rng);
        if let Ok((q, _)) = linalg::thin_qr(&g, 1e-12) {
            return q;
        }
    }
}

/// `n x d` activations with i.i.d. `N(0, sigma2 / n)` entries.
pub fn gaussian_activations(
    n: usize,
    d: usize,
    sigma2: f64,
    rng: RngSpec,
) -> Result<ActivationMatrix> {
    if n == 0 || d == 0 || sigma2.is_nan() || sigma2 <= 0.0 {
        return Err(ZdpError::InvalidArgument(format!(
            "gaussian_activations needs n, d >= 1 and sigma2 > 0 (got {n}, {d}, {sigma2})"
        )));
    }
    let scale = (sigma2 / n as f64).sqrt();
    ActivationMatrix::new(standard_normal_matrix(n, d, &mut rng.rng()) * scale)
}

const MAX_RESAMPLES: usize = 16;

/// Rank-deficient base `H = L R^T` with Gaussian `L` (`n x rank`) and `R`
/// (`d x rank`), together with the exact orthonormal complement of `im(R)`.
pub fn rank_deficient_base(
    n: usize,
    d: usize,
    rank: usize,
    rng: RngSpec,
) -> Result<(ActivationMatrix, NullBasis)> {
    if rank == 0 || rank > n.min(d) {
        return Err(ZdpError::InvalidArgument(format!(
            "rank must satisfy 1 <= rank <= min(n, d) = {}, got {rank}",
            n.min(d)
        )));
    }
    for attempt in 0..MAX_RESAMPLES as u64 {
        let stream = rng.substream(attempt);
        let mut r = stream.rng();
        let left = standard_normal_matrix(n, rank, &mut r);
        let right = standard_normal_matrix(d, rank, &mut r);
        let sv_l = linalg::singular_values(&left);
        let sv_r = linalg::singular_values(&right);
        if sv_l[rank - 1] <= 1e-8 * sv_l[0] || sv_r[rank - 1] <= 1e-8 * sv_r[0] {
            continue;
        }
        let h = ActivationMatrix::new(&left * right.transpose())?;
        // Complement of im(R) is the right null space of R^T.
        let (_, v) = linalg::right_singular_system(&right.transpose());
        let basis = v.columns(rank, d - rank).into_owned();
        let h_sv = linalg::singular_values(h.data());
        let cutoff = CutoffPolicy::Default.resolve(n, d, h_sv[0])?;
        let null = NullBasis::from_orthonormal(basis, cutoff, Side::Right)?;
        if (h.data() * null.basis()).norm() <= 1e-10 * h.data().norm() {
            return Ok((h, null));
        }
    }
    Err(ZdpError::Numerical(format!(
        "rank_deficient_base failed after {MAX_RESAMPLES} resamples"
    )))
}

/// Low-rank factors whose column space `im(B)` meets `span(V0)` at the given
/// principal angles.
///
/// Both factors have flat singular spectra (`A = scale_a * U_A W^T`,
/// `B = scale_b * U_B W^T` with a shared `r x r` rotation `W`), so every
/// direction is a top singular direction. That is the joint alignment under
/// which the rank-leak chain is tight at every step.
pub fn aligned_lowrank_factors(
    v0: &NullBasis,
    r: usize,
    target_angles: &[f64],
    scale_a: f64,
    scale_b: f64,
    rng: RngSpec,
) -> Result<LoraFactors> {
    let d = v0.ambient_dim();
    let k = v0.k();
    let m = r.min(k);
    if r == 0 || r > d {
        return Err(ZdpError::InvalidArgument(format!(
            "rank r = {r} must be in 1..={d}"
        )));
    }
    if target_angles.len() != m {
        return Err(ZdpError::InvalidArgument(format!(
            "expected min(r, k) = {m} target angles, got {}",
            target_angles.len()
        )));
    }
    if target_angles
        .iter()
        .any(|a| !(0.0..=std::f64::consts::FRAC_PI_2).contains(a))
    {
        return Err(ZdpError::InvalidArgument(
            "target angles must lie in [0, pi/2]".into(),
        ));
    }
    let tilted = target_angles.iter().filter(|a| a.sin() > 0.0).count();
    let needed = tilted + (r - m);
    if needed > d - k {
        return Err(ZdpError::InvalidArgument(format!(
            "infeasible angle configuration: needs {needed} complement directions, only {} available",
            d - k
        )));
    }
    let mut gen = rng.rng();
    let rot = haar_orthonormal(k.max(1), k.max(1), &mut gen);
    let in_null = if k > 0 {
        v0.basis() * rot
    } else {
        DMatrix::zeros(d, 0)
    };
    let complement = if needed == 0 {
        DMatrix::zeros(d, 0)
    } else {
        let p0 = v0.basis() * v0.basis().transpose();
        let g = standard_normal_matrix(d, needed, &mut gen);
        let projected = &g - &p0 * &g;
        linalg::thin_qr(&projected, 1e-10)?.0
    };
    let mut u_b = DMatrix::zeros(d, r);
    let mut next = 0;
    for (i, &theta) in target_angles.iter().enumerate() {
        let mut col = in_null.column(i) * theta.cos();
        if theta.sin() > 0.0 {
            col += complement.column(next) * theta.sin();
            next += 1;
        }
        u_b.set_column(i, &col);
    }
    for j in m..r {
        u_b.set_column(j, &complement.column(next));
        next += 1;
    }
    let w = haar_orthonormal(r, r, &mut gen);
    let u_a = haar_orthonormal(d, r, &mut gen);
    LoraFactors::new(
        &u_a * w.transpose() * scale_a,
        &u_b * w.transpose() * scale_b,
    )
}

/// Mini-batch stream with population Gram `Sigma = V1 diag(spectrum) V1^T`.
///
/// Batch `t` has rows `z^T diag(sqrt(spectrum / m)) V1^T` with `z` standard
/// normal, so `E[H_t^T H_t] = Sigma` and every row lies exactly in
/// `im(Sigma)`.
#[derive(Debug, Clone)]
pub struct GramStream {
    null_basis: DMatrix<f64>,
    signal_basis: DMatrix<f64>,
    scales: DVector<f64>,
    m: usize,
    batches: RngSpec,
}

pub fn gram_stream(spec: &StreamSpec) -> Result<GramStream> {
    spec.validate()?;
    let d = spec.dim();
    let k = spec.null_dim;
    let root = RngSpec::new(spec.seed);
    let frame = haar_orthonormal(d, d, &mut root.substream(0).rng());
    let scales = DVector::from_iterator(
        d - k,
        spec.spectrum
            .iter()
            .map(|l| (l / spec.batch_rows as f64).sqrt()),
    );
    Ok(GramStream {
        null_basis: frame.columns(0, k).into_owned(),
        signal_basis: frame.columns(k, d - k).into_owned(),
        scales,
        m: spec.batch_rows,
        batches: root.substream(2),
    })
}

impl GramStream {
    /// Batch for step `t` (1-based); random access, independent across `t`.
    pub fn batch(&self, t: u64) -> DMatrix<f64> {
        let mut rng = self.batches.substream(t).rng();
        let mut z = standard_normal_matrix(self.m, self.scales.len(), &mut rng);
        for (j, s) in self.scales.iter().enumerate() {
            z.column_mut(j).scale_mut(*s);
        }
        z * self.signal_basis.transpose()
    }

    /// Population Gram `Sigma`.
    pub fn sigma(&self) -> DMatrix<f64> {
        let mut scaled = self.signal_basis.clone();
        for (j, s) in self.scales.iter().enumerate() {
            scaled.column_mut(j).scale_mut(s * s * self.m as f64);
        }
        linalg::symmetrize(&(scaled * self.signal_basis.transpose()))
    }

    /// Orthonormal basis of `ker(Sigma)`.
    pub fn true_null_basis(&self) -> &DMatrix<f64> {
        &self.null_basis
    }

    pub fn batch_rows(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.null_basis.nrows()
    }

    pub fn iter(&self) -> impl Iterator<Item = DMatrix<f64>> + '_ {
        (1..).map(move |t| self.batch(t))
    }
}

/// Ratio `||dH||_2 / ||H||_2` and whether it respects the budget `rho`
/// (inclusive).
pub fn perturbation_budget_check(
    h: &ActivationMatrix,
    dh: &DMatrix<f64>,
    rho: f64,
) -> Result<(bool, f64)> {
    if dh.shape() != h.data().shape() {
        return Err(ZdpError::DimensionMismatch(format!(
            "perturbation is {:?}, base is {:?}",
            dh.shape(),
            h.data().shape()
        )));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(ZdpError::InvalidArgument(format!(
            "rho must lie in (0, 1), got {rho}"
        )));
    }
    let base = linalg::spectral_norm(h.data());
    if base == 0.0 {
        return Err(ZdpError::InvalidArgument(
            "base activations are zero".into(),
        ));
    }
    let ratio = linalg::spectral_norm(dh) / base;
    // Inclusive boundary, up to rounding in the two SVDs.
    Ok((ratio <= rho * (1.0 + 8.0 * f64::EPSILON), ratio))
}

/// Base matrix plus `c * 1 v^T` along its first null direction.
pub fn null_bump(h: &ActivationMatrix, v0: &NullBasis, amplitude: f64) -> Result<ActivationMatrix> {
    if v0.k() == 0 {
        return Err(ZdpError::EmptyNullSpace);
    }
    let n = h.n_tokens();
    let ones = DVector::from_element(n, 1.0);
    let bump = ones * v0.basis().column(0).transpose() * amplitude;
    ActivationMatrix::new(h.data() + bump)
}

/// Null basis of the base matrix at the default cutoff.
pub fn recover_null_basis(h: &ActivationMatrix) -> Result<NullBasis> {
    nullspace::null_basis(h, CutoffPolicy::Default, Side::Right)
}
