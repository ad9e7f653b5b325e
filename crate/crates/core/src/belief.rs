//! Belief states (mean and covariance) and their Monte-Carlo propagation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{idx, normalize_angle, ControlInput, VehicleModel, VehicleState, STATE_DIM};
use crate::linalg::{min_eigenvalue, psd_cholesky, symmetrize, PSD_TOLERANCE};
use crate::rng::Stream;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BeliefError {
    #[error("covariance is not symmetric positive semidefinite")]
    NotPsd,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("fewer than two propagated samples are finite ({valid} of {total})")]
    DegenerateSamples { valid: usize, total: usize },
    #[error("state component {0} is not tracked by the covariance subset")]
    UntrackedComponent(usize),
    #[error("need at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("invalid covariance subset: {0}")]
    InvalidSubset(String),
}

/// Ordered state components whose covariance is tracked.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct CovSubset {
    indices: Vec<usize>,
    state_dim: usize,
}

impl CovSubset {
    pub fn new(indices: Vec<usize>, state_dim: usize) -> Result<Self, BeliefError> {
        let mut seen = vec![false; state_dim];
        for &i in &indices {
            if i >= state_dim {
                return Err(BeliefError::InvalidSubset(format!(
                    "index {i} out of range for dimension {state_dim}"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(BeliefError::InvalidSubset(format!("index {i} repeated")));
            }
        }
        Ok(CovSubset { indices, state_dim })
    }

    pub fn full(state_dim: usize) -> Self {
        CovSubset {
            indices: (0..state_dim).collect(),
            state_dim,
        }
    }

    /// `{vY, yaw rate, e_psi, e_Y}`.
    pub fn default_vehicle() -> Self {
        CovSubset {
            indices: vec![
                idx::VY,
                idx::YAW_RATE,
                idx::HEADING_ERROR,
                idx::LATERAL_ERROR,
            ],
            state_dim: STATE_DIM,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn position(&self, component: usize) -> Option<usize> {
        self.indices.iter().position(|&i| i == component)
    }
}

impl TryFrom<Vec<usize>> for CovSubset {
    type Error = BeliefError;

    fn try_from(indices: Vec<usize>) -> Result<Self, Self::Error> {
        CovSubset::new(indices, STATE_DIM)
    }
}

impl From<CovSubset> for Vec<usize> {
    fn from(s: CovSubset) -> Self {
        s.indices
    }
}

/// Mean and covariance (over a tracked subset) of a state distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct BeliefState {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    subset: CovSubset,
}

impl BeliefState {
    /// Validates dimensions, symmetry (1e-10) and PSD-ness (eigenvalues >= -1e-10).
    pub fn new(
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        subset: CovSubset,
    ) -> Result<Self, BeliefError> {
        if mean.len() != subset.state_dim() {
            return Err(BeliefError::DimensionMismatch(format!(
                "mean has {} entries, subset expects {}",
                mean.len(),
                subset.state_dim()
            )));
        }
        if cov.nrows() != subset.len() || cov.ncols() != subset.len() {
            return Err(BeliefError::DimensionMismatch(format!(
                "covariance is {}x{}, subset tracks {}",
                cov.nrows(),
                cov.ncols(),
                subset.len()
            )));
        }
        if cov.iter().any(|v| !v.is_finite()) || mean.iter().any(|v| !v.is_finite()) {
            return Err(BeliefError::NotPsd);
        }
        if (&cov - cov.transpose()).abs().max() > PSD_TOLERANCE {
            return Err(BeliefError::NotPsd);
        }
        if min_eigenvalue(&cov) < -PSD_TOLERANCE {
            return Err(BeliefError::NotPsd);
        }
        Ok(BeliefState { mean, cov, subset })
    }

    /// Point mass at `mean`.
    pub fn deterministic(mean: DVector<f64>, subset: CovSubset) -> Self {
        let n = subset.len();
        BeliefState {
            mean,
            cov: DMatrix::zeros(n, n),
            subset,
        }
    }

    pub fn from_vehicle(
        state: &VehicleState,
        cov: DMatrix<f64>,
        subset: CovSubset,
    ) -> Result<Self, BeliefError> {
        Self::new(DVector::from_row_slice(&state.to_array()), cov, subset)
    }

    pub(crate) fn from_parts_unchecked(
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        subset: CovSubset,
    ) -> Self {
        BeliefState { mean, cov, subset }
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn subset(&self) -> &CovSubset {
        &self.subset
    }

    /// Typed view of the mean for 8-dimensional vehicle beliefs.
    pub fn mean_state(&self) -> VehicleState {
        VehicleState::from_array(self.mean.as_slice())
    }

    /// Variance of a single state component, if tracked.
    pub fn variance(&self, component: usize) -> Option<f64> {
        self.subset.position(component).map(|p| self.cov[(p, p)])
    }
}

/// Current and previous belief, so a single-step cost can see both.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBeliefState {
    pub current: BeliefState,
    pub previous: BeliefState,
}

impl AugmentedBeliefState {
    /// Shift register update: the new belief becomes current, the old
    /// current becomes previous.
    pub fn advance(self, next: BeliefState) -> Self {
        AugmentedBeliefState {
            current: next,
            previous: self.current,
        }
    }
}

/// Pairs two beliefs. At the start of a horizon pass the same belief twice.
pub fn augment(current: BeliefState, previous: BeliefState) -> AugmentedBeliefState {
    AugmentedBeliefState { current, previous }
}

/// Standard deviation of the lateral error, clamping tiny negative variances.
pub fn lateral_std(belief: &BeliefState) -> Result<f64, BeliefError> {
    let var = belief
        .variance(idx::LATERAL_ERROR)
        .ok_or(BeliefError::UntrackedComponent(idx::LATERAL_ERROR))?;
    Ok(var.max(0.0).sqrt())
}

/// A discrete-time system with a random disturbance.
pub trait StochasticModel: Sync {
    type Control: Sync;

    fn state_dim(&self) -> usize;

    /// One disturbed transition from `x` into `next`. Returns `false` when
    /// the transition is invalid (non-finite, left the model's domain).
    fn sample_step(&self, x: &[f64], u: &Self::Control, rng: &mut Stream, next: &mut [f64])
        -> bool;

    /// Re-expresses `x` on the same branch as `reference` for components
    /// with periodic wrapping.
    fn unwrap_near(&self, _x: &mut [f64], _reference: &[f64]) {}

    /// Maps a state back onto its canonical range.
    fn canonicalize(&self, _x: &mut [f64]) {}
}

impl StochasticModel for VehicleModel {
    type Control = ControlInput;

    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    #[inline]
    fn sample_step(&self, x: &[f64], u: &ControlInput, rng: &mut Stream, next: &mut [f64]) -> bool {
        let w = self.noise.sample(rng);
        match crate::dynamics::step(
            &VehicleState::from_array(x),
            u,
            &w,
            &self.params,
            &self.track,
        ) {
            Ok(v) => {
                next.copy_from_slice(&v.to_array());
                true
            }
            Err(_) => false,
        }
    }

    fn unwrap_near(&self, x: &mut [f64], reference: &[f64]) {
        if self.track.is_closed() {
            let l = self.track.length();
            let d = x[idx::PROGRESS] - reference[idx::PROGRESS];
            x[idx::PROGRESS] -= l * (d / l).round();
        }
        let d = x[idx::HEADING_ERROR] - reference[idx::HEADING_ERROR];
        x[idx::HEADING_ERROR] = reference[idx::HEADING_ERROR] + normalize_angle(d);
    }

    fn canonicalize(&self, x: &mut [f64]) {
        x[idx::PROGRESS] = self.track.wrap(x[idx::PROGRESS]);
        x[idx::HEADING_ERROR] = normalize_angle(x[idx::HEADING_ERROR]);
    }
}

/// `x+ = A x + B u + w`, `w ~ N(0, Sigma_w)` over the full state.
#[derive(Clone, Debug)]
pub struct LinearGaussianModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub noise_cov: DMatrix<f64>,
    noise_factor: DMatrix<f64>,
}

impl LinearGaussianModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        noise_cov: DMatrix<f64>,
    ) -> Result<Self, BeliefError> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || noise_cov.nrows() != n || noise_cov.ncols() != n {
            return Err(BeliefError::DimensionMismatch(format!(
                "A {}x{}, B {}x{}, Sigma_w {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                noise_cov.nrows(),
                noise_cov.ncols()
            )));
        }
        let noise_factor = psd_cholesky(&noise_cov).ok_or(BeliefError::NotPsd)?;
        Ok(LinearGaussianModel {
            a,
            b,
            noise_cov,
            noise_factor,
        })
    }
}

impl StochasticModel for LinearGaussianModel {
    type Control = DVector<f64>;

    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn sample_step(&self, x: &[f64], u: &DVector<f64>, rng: &mut Stream, next: &mut [f64]) -> bool {
        let n = self.a.nrows();
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.a[(i, j)] * x[j];
            }
            for j in 0..self.b.ncols() {
                acc += self.b[(i, j)] * u[j];
            }
            for (j, zj) in z.iter().enumerate().take(i + 1) {
                acc += self.noise_factor[(i, j)] * zj;
            }
            next[i] = acc;
        }
        next.iter().all(|v| v.is_finite())
    }
}

/// Sample mean and unbiased covariance (over `subset`) of a particle set
/// stored row-major, `dim` values per particle.
///
/// Statistics are accumulated relative to the first particle; identical
/// particles therefore give their common value and an exactly zero
/// covariance.
pub fn particle_statistics<M: StochasticModel>(
    model: &M,
    particles: &[f64],
    subset: &CovSubset,
) -> Result<BeliefState, BeliefError> {
    let dim = model.state_dim();
    let total = particles.len() / dim;
    if total < 2 {
        return Err(BeliefError::DegenerateSamples {
            valid: total,
            total,
        });
    }
    let reference = &particles[..dim];
    let mut shifted = particles.to_vec();
    for row in shifted.chunks_exact_mut(dim) {
        model.unwrap_near(row, reference);
        for (v, r) in row.iter_mut().zip(reference) {
            *v -= r;
        }
    }
    let inv = 1.0 / total as f64;
    let mut mean_shift = vec![0.0; dim];
    for row in shifted.chunks_exact(dim) {
        for (m, v) in mean_shift.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean_shift.iter_mut() {
        *m *= inv;
    }
    let idxs = subset.indices();
    let d = idxs.len();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut dev = vec![0.0; d];
    for row in shifted.chunks_exact(dim) {
        for (a, &ia) in idxs.iter().enumerate() {
            dev[a] = row[ia] - mean_shift[ia];
        }
        for a in 0..d {
            for b in a..d {
                cov[(a, b)] += dev[a] * dev[b];
            }
        }
    }
    let norm = 1.0 / (total as f64 - 1.0);
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] * norm;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let mut mean: Vec<f64> = reference
        .iter()
        .zip(&mean_shift)
        .map(|(r, s)| r + s)
        .collect();
    model.canonicalize(&mut mean);
    Ok(BeliefState::from_parts_unchecked(
        DVector::from_vec(mean),
        cov,
        subset.clone(),
    ))
}

/// Draws `n` states from `N(mean, cov)` into `out` (row-major); untracked
/// components stay at the mean.
pub fn sample_particles(
    belief: &BeliefState,
    n: usize,
    rng: &mut Stream,
    out: &mut Vec<f64>,
) -> Result<(), BeliefError> {
    let dim = belief.mean().len();
    out.clear();
    out.reserve(n * dim);
    let mean = belief.mean().as_slice();
    if belief.cov().iter().all(|v| *v == 0.0) {
        for _ in 0..n {
            out.extend_from_slice(mean);
        }
        return Ok(());
    }
    let factor = psd_cholesky(belief.cov()).ok_or(BeliefError::NotPsd)?;
    let idxs = belief.subset().indices();
    let d = idxs.len();
    let mut z = vec![0.0; d];
    for _ in 0..n {
        let start = out.len();
        out.extend_from_slice(mean);
        let row = &mut out[start..];
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        for a in 0..d {
            let mut acc = 0.0;
            for (b, zb) in z.iter().enumerate().take(a + 1) {
                acc += factor[(a, b)] * zb;
            }
            row[idxs[a]] += acc;
        }
    }
    Ok(())
}

/// Pushes every particle through one disturbed step into `out`, dropping
/// invalid ones. Returns the number of survivors.
pub fn propagate_particles<M: StochasticModel>(
    model: &M,
    particles: &[f64],
    control: &M::Control,
    rng: &mut Stream,
    out: &mut Vec<f64>,
) -> usize {
    let dim = model.state_dim();
    out.clear();
    out.reserve(particles.len());
    let mut next = vec![0.0; dim];
    for x in particles.chunks_exact(dim) {
        if model.sample_step(x, control, rng, &mut next) && next.iter().all(|v| v.is_finite()) {
            out.extend_from_slice(&next);
        }
    }
    out.len() / dim
}

/// Reusable buffers for repeated propagation.
#[derive(Default, Debug, Clone)]
pub struct Scratch {
    sampled: Vec<f64>,
    stepped: Vec<f64>,
}

/// One step of Monte-Carlo mean/covariance propagation.
///
/// Samples `n` states from the Gaussian belief, draws an independent
/// disturbance for each, steps them, and returns the sample mean and the
/// `1/(n-1)` sample covariance over the belief's subset. Samples whose step
/// fails are dropped; fewer than two survivors is an error.
pub fn propagate_mc<M: StochasticModel>(
    belief: &BeliefState,
    control: &M::Control,
    n: usize,
    rng: &mut Stream,
    model: &M,
) -> Result<BeliefState, BeliefError> {
    propagate_mc_with(belief, control, n, rng, model, &mut Scratch::default())
}

/// [`propagate_mc`] with caller-owned buffers.
pub fn propagate_mc_with<M: StochasticModel>(
    belief: &BeliefState,
    control: &M::Control,
    n: usize,
    rng: &mut Stream,
    model: &M,
    scratch: &mut Scratch,
) -> Result<BeliefState, BeliefError> {
    if n < 2 {
        return Err(BeliefError::TooFewSamples(n));
    }
    if belief.mean().len() != model.state_dim() {
        return Err(BeliefError::DimensionMismatch(format!(
            "belief has {} states, model {}",
            belief.mean().len(),
            model.state_dim()
        )));
    }
    sample_particles(belief, n, rng, &mut scratch.sampled)?;
    let valid = propagate_particles(model, &scratch.sampled, control, rng, &mut scratch.stepped);
    if valid < 2 {
        return Err(BeliefError::DegenerateSamples { valid, total: n });
    }
    particle_statistics(model, &scratch.stepped, belief.subset())
}

/// Exact linear-Gaussian propagation: `A m + B u`, `A S A' + Sigma_w`.
pub fn propagate_linear(
    belief: &BeliefState,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    control: &DVector<f64>,
    noise_cov: &DMatrix<f64>,
) -> Result<BeliefState, BeliefError> {
    let n = belief.mean().len();
    if belief.subset().indices() != (0..n).collect::<Vec<_>>().as_slice() {
        return Err(BeliefError::DimensionMismatch(
            "linear propagation needs the full covariance".into(),
        ));
    }
    if a.nrows() != n
        || a.ncols() != n
        || b.nrows() != n
        || b.ncols() != control.len()
        || noise_cov.shape() != (n, n)
    {
        return Err(BeliefError::DimensionMismatch(format!(
            "state {n}, A {:?}, B {:?}, u {}, Sigma_w {:?}",
            a.shape(),
            b.shape(),
            control.len(),
            noise_cov.shape()
        )));
    }
    let mean = a * belief.mean() + b * control;
    let mut cov = a * belief.cov() * a.transpose() + noise_cov;
    symmetrize(&mut cov);
    Ok(BeliefState::from_parts_unchecked(
        mean,
        cov,
        belief.subset().clone(),
    ))
}
