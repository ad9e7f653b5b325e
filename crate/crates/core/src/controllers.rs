//! Sampling-based receding-horizon controllers: MPPI, Shield-MPPI (penalty
//! form) and belief-space stochastic MPPI.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, Matrix2, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{lateral_std, propagate_mc_with, BeliefError, BeliefState, CovSubset, Scratch};
use crate::constraints::{
    allocate_budget, backoff_gaussian, residual, violation_cost, DcbfForm, SafetyParams,
    TrackBarrier, DEFAULT_P_FAIL,
};
use crate::dynamics::{idx, ControlBounds, ControlInput, VehicleModel, VehicleState, STATE_DIM};
use crate::linalg::psd_cholesky;
use crate::rng::{domain, substream, Stream};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControllerError {
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
    #[error("every sampled rollout was invalid")]
    AllRolloutsInvalid,
    #[error(transparent)]
    Belief(#[from] BeliefError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControllerKind {
    #[serde(rename = "mppi")]
    Mppi,
    #[serde(rename = "smppi")]
    ShieldMppi,
    #[serde(rename = "bss")]
    BssMppi,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [
        ControllerKind::Mppi,
        ControllerKind::ShieldMppi,
        ControllerKind::BssMppi,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ControllerKind::Mppi => "mppi",
            ControllerKind::ShieldMppi => "smppi",
            ControllerKind::BssMppi => "bss",
        }
    }

    pub fn is_shielded(self) -> bool {
        self != ControllerKind::Mppi
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControllerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mppi" => Ok(ControllerKind::Mppi),
            "smppi" | "shield" | "shield-mppi" => Ok(ControllerKind::ShieldMppi),
            "bss" | "bss-mppi" => Ok(ControllerKind::BssMppi),
            other => Err(format!(
                "unknown controller kind '{other}' (expected mppi, smppi or bss)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MppiConfig {
    pub kind: ControllerKind,
    /// Number of sampled control sequences `M`.
    pub samples: usize,
    /// Horizon `K` in control steps.
    pub horizon: usize,
    /// Temperature `lambda`.
    pub temperature: f64,
    /// Control-cost weight `gamma`.
    pub control_cost: f64,
    /// Sampling covariance over (steer, throttle).
    pub sampling_cov: Matrix2<f64>,
    pub bounds: ControlBounds,
    /// Samples per belief propagation step `N` (belief-space controller only).
    pub inner_samples: usize,
    /// Components whose covariance the belief-space controller tracks.
    pub cov_subset: CovSubset,
}

impl Default for MppiConfig {
    fn default() -> Self {
        MppiConfig {
            kind: ControllerKind::BssMppi,
            samples: 256,
            horizon: 20,
            temperature: 2.0,
            control_cost: 0.1,
            sampling_cov: Matrix2::from_diagonal(&Vector2::new(0.1 * 0.1, 0.3 * 0.3)),
            bounds: ControlBounds::default(),
            inner_samples: 16,
            cov_subset: CovSubset::default_vehicle(),
        }
    }
}

impl MppiConfig {
    /// The sampling covariance may be singular (a zero entry disables
    /// exploration of that channel); the control cost then uses the
    /// pseudo-inverse.
    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad = |m: String| Err(ControllerError::InvalidConfig(m));
        if self.samples < 1 {
            return bad("samples (M) must be >= 1".into());
        }
        if self.horizon < 1 {
            return bad("horizon (K) must be >= 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.control_cost >= 0.0 && self.control_cost.is_finite()) {
            return bad(format!(
                "control_cost must be >= 0, got {}",
                self.control_cost
            ));
        }
        let s = &self.sampling_cov;
        if s.iter().any(|v| !v.is_finite()) || (s[(0, 1)] - s[(1, 0)]).abs() > 1e-12 {
            return bad("sampling covariance must be finite and symmetric".into());
        }
        if psd_cholesky(&DMatrix::from_column_slice(2, 2, s.as_slice())).is_none() {
            return bad("sampling covariance must be positive semidefinite".into());
        }
        self.bounds
            .validate()
            .map_err(|e| ControllerError::InvalidConfig(e.to_string()))?;
        if self.kind == ControllerKind::BssMppi {
            if self.inner_samples < 2 {
                return bad(format!(
                    "inner_samples (N) must be >= 2, got {}",
                    self.inner_samples
                ));
            }
            if self.cov_subset.position(idx::LATERAL_ERROR).is_none() {
                return bad("cov_subset must include the lateral error".into());
            }
        }
        if self.cov_subset.state_dim() != STATE_DIM {
            return bad("cov_subset must index the vehicle state".into());
        }
        Ok(())
    }
}

/// Running, terminal and safety cost definition.
#[derive(Clone, Debug, PartialEq)]
pub struct CostSpec {
    /// Diagonal of `Q`, indexed like the vehicle state.
    pub weights: [f64; STATE_DIM],
    /// Goal state `x_g`; only components with nonzero weight matter.
    pub target: [f64; STATE_DIM],
    /// Penalty `C_obs` added per step with `|e_Y| > w_T`.
    pub collision_penalty: f64,
    /// Track half width `w_T` (m).
    pub half_width: f64,
    /// Terminal cost is `terminal_scale * q(x_K)`.
    pub terminal_scale: f64,
    pub safety: SafetyParams,
    /// Back-off multiplier `nu` on the lateral standard deviation.
    pub backoff: f64,
    pub dcbf_form: DcbfForm,
}

impl Default for CostSpec {
    fn default() -> Self {
        let mut weights = [0.0; STATE_DIM];
        weights[idx::VX] = 3.0;
        weights[idx::YAW_RATE] = 0.0;
        weights[idx::HEADING_ERROR] = 0.0;
        weights[idx::LATERAL_ERROR] = 0.1;
        let mut target = [0.0; STATE_DIM];
        target[idx::VX] = 6.0;
        CostSpec {
            weights,
            target,
            collision_penalty: 1000.0,
            half_width: 2.0,
            terminal_scale: 1.0,
            safety: SafetyParams::default(),
            backoff: default_backoff(),
            dcbf_form: DcbfForm::Squared,
        }
    }
}

/// Gaussian back-off for [`DEFAULT_P_FAIL`] split over both boundaries.
fn default_backoff() -> f64 {
    let eps = allocate_budget(DEFAULT_P_FAIL, 2).expect("valid budget")[0];
    backoff_gaussian(eps).expect("valid probability")
}

impl CostSpec {
    pub fn target_speed(&self) -> f64 {
        self.target[idx::VX]
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad = |m: String| Err(ControllerError::InvalidConfig(m));
        if let Some(w) = self.weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return bad(format!("state weights must be >= 0, got {w}"));
        }
        if self.target.iter().any(|t| !t.is_finite()) {
            return bad("target state must be finite".into());
        }
        if !(self.collision_penalty >= 0.0 && self.collision_penalty.is_finite()) {
            return bad(format!(
                "collision_penalty must be >= 0, got {}",
                self.collision_penalty
            ));
        }
        if !(self.half_width > 0.0 && self.half_width.is_finite()) {
            return bad(format!("half_width must be > 0, got {}", self.half_width));
        }
        if !(self.terminal_scale >= 0.0 && self.terminal_scale.is_finite()) {
            return bad(format!(
                "terminal_scale must be >= 0, got {}",
                self.terminal_scale
            ));
        }
        if !(self.backoff >= 0.0 && self.backoff.is_finite()) {
            return bad(format!("backoff must be >= 0, got {}", self.backoff));
        }
        self.safety
            .validate()
            .map_err(|e| ControllerError::InvalidConfig(e.to_string()))
    }

    /// Step cost `q(x)`: weighted squared error to the goal plus the
    /// off-track indicator penalty.
    #[inline]
    pub fn running(&self, x: &VehicleState) -> f64 {
        let a = x.to_array();
        let mut c = 0.0;
        for i in 0..STATE_DIM {
            let d = a[i] - self.target[i];
            c += self.weights[i] * d * d;
        }
        if x.lateral_error.abs() > self.half_width {
            c += self.collision_penalty;
        }
        c
    }

    #[inline]
    pub fn terminal(&self, x: &VehicleState) -> f64 {
        self.terminal_scale * self.running(x)
    }

    pub fn barrier(&self) -> TrackBarrier {
        TrackBarrier {
            half_width: self.half_width,
            backoff: self.backoff,
            form: self.dcbf_form,
        }
    }
}

/// Nominal control sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlPlan {
    controls: Vec<ControlInput>,
}

impl ControlPlan {
    pub fn new(
        controls: Vec<ControlInput>,
        bounds: &ControlBounds,
    ) -> Result<Self, ControllerError> {
        if controls.is_empty() {
            return Err(ControllerError::InvalidConfig(
                "plan must have at least one entry".into(),
            ));
        }
        if let Some(u) = controls.iter().find(|u| !bounds.contains(**u)) {
            return Err(ControllerError::InvalidConfig(format!(
                "plan entry {u:?} outside control bounds"
            )));
        }
        Ok(ControlPlan { controls })
    }

    pub fn constant(u: ControlInput, horizon: usize) -> Self {
        ControlPlan {
            controls: vec![u; horizon],
        }
    }

    pub fn controls(&self) -> &[ControlInput] {
        &self.controls
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn first(&self) -> ControlInput {
        self.controls[0]
    }

    /// Warm start: drop the first entry and repeat the last.
    pub fn shifted(&self) -> Self {
        let mut controls = self.controls[1..].to_vec();
        controls.push(*self.controls.last().expect("plan is non-empty"));
        ControlPlan { controls }
    }
}

/// One perturbed control sequence: the clamped controls that are rolled out
/// and the unclamped `v + eps` that enter the control cost.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSample {
    pub applied: Vec<ControlInput>,
    pub raw: Vec<ControlInput>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch {
    pub samples: Vec<Vec<ControlInput>>,
    /// Total cost per sample, `f64::INFINITY` for invalid rollouts.
    pub costs: Vec<f64>,
}

/// Draws one perturbed sequence `clamp(v_k + L z_k)`, `L L' = Sigma_eps`.
pub fn sample_sequence(
    plan: &ControlPlan,
    factor: &Matrix2<f64>,
    bounds: &ControlBounds,
    rng: &mut Stream,
) -> ControlSample {
    let k = plan.horizon();
    let mut applied = Vec::with_capacity(k);
    let mut raw = Vec::with_capacity(k);
    for v in plan.controls() {
        let z = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        let eps = factor * z;
        let u = ControlInput::new(v.steer + eps[0], v.throttle + eps[1]);
        raw.push(u);
        applied.push(bounds.clamp(u));
    }
    ControlSample { applied, raw }
}

/// Lower-triangular factor of a 2x2 PSD covariance.
pub fn sampling_factor(cov: &Matrix2<f64>) -> Result<Matrix2<f64>, ControllerError> {
    let l = psd_cholesky(&DMatrix::from_column_slice(2, 2, cov.as_slice()))
        .ok_or_else(|| ControllerError::InvalidConfig("sampling covariance is not PSD".into()))?;
    Ok(Matrix2::new(l[(0, 0)], 0.0, l[(1, 0)], l[(1, 1)]))
}

/// Inverse of the sampling covariance, pseudo-inverse if singular.
pub fn sampling_precision(cov: &Matrix2<f64>) -> Matrix2<f64> {
    cov.try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .unwrap_or_else(|| {
            cov.pseudo_inverse(1e-12)
                .unwrap_or_else(|_| Matrix2::zeros())
        })
}

/// `M` perturbed sequences around `plan`; sample `m` draws from its own
/// substream so the batch does not depend on evaluation order.
pub fn sample_controls(
    plan: &ControlPlan,
    sampling_cov: &Matrix2<f64>,
    bounds: &ControlBounds,
    samples: usize,
    seed: u64,
    iteration: u64,
) -> Result<Vec<ControlSample>, ControllerError> {
    let factor = sampling_factor(sampling_cov)?;
    Ok((0..samples)
        .map(|m| {
            let mut rng = substream(seed, &[domain::CONTROL_SAMPLES, iteration, m as u64]);
            sample_sequence(plan, &factor, bounds, &mut rng)
        })
        .collect())
}

/// `gamma sum_k v_k' Sigma_eps^-1 u_k`.
pub fn control_cost(
    plan: &ControlPlan,
    raw: &[ControlInput],
    precision: &Matrix2<f64>,
    gamma: f64,
) -> f64 {
    if gamma == 0.0 {
        return 0.0;
    }
    let mut c = 0.0;
    for (v, u) in plan.controls().iter().zip(raw) {
        let v = Vector2::new(v.steer, v.throttle);
        let u = Vector2::new(u.steer, u.throttle);
        c += v.dot(&(precision * u));
    }
    gamma * c
}

/// Unnormalized importance weights `exp(-(S_m - min S) / lambda)`; invalid
/// rollouts get weight 0 and the best sample gets exactly 1.
pub fn importance_weights(costs: &[f64], temperature: f64) -> Result<Vec<f64>, ControllerError> {
    let baseline = costs
        .iter()
        .copied()
        .filter(|c| c.is_finite())
        .fold(f64::INFINITY, f64::min);
    if !baseline.is_finite() {
        return Err(ControllerError::AllRolloutsInvalid);
    }
    Ok(costs
        .iter()
        .map(|&c| {
            if c.is_finite() {
                (-(c - baseline) / temperature).exp()
            } else {
                0.0
            }
        })
        .collect())
}

/// Cost-weighted average of the sampled sequences, clamped to bounds.
pub fn mppi_update(
    batch: &RolloutBatch,
    temperature: f64,
    bounds: &ControlBounds,
) -> Result<ControlPlan, ControllerError> {
    if batch.samples.is_empty() || batch.samples.len() != batch.costs.len() {
        return Err(ControllerError::InvalidConfig(format!(
            "batch has {} sequences and {} costs",
            batch.samples.len(),
            batch.costs.len()
        )));
    }
    let w = importance_weights(&batch.costs, temperature)?;
    let total: f64 = w.iter().sum();
    let horizon = batch.samples[0].len();
    let mut acc = vec![[0.0f64; 2]; horizon];
    for (seq, &wm) in batch.samples.iter().zip(&w) {
        if wm == 0.0 {
            continue;
        }
        for (a, u) in acc.iter_mut().zip(seq) {
            a[0] += wm * u.steer;
            a[1] += wm * u.throttle;
        }
    }
    let controls = acc
        .iter()
        .map(|a| bounds.clamp(ControlInput::new(a[0] / total, a[1] / total)))
        .collect();
    Ok(ControlPlan { controls })
}

/// Read-only data shared by all rollouts of one control step.
#[derive(Clone, Copy)]
pub struct RolloutContext<'a> {
    /// Rollout dynamics; its noise model is used only for belief propagation.
    pub model: &'a VehicleModel,
    pub cost: &'a CostSpec,
}

fn deterministic_cost(
    x0: &VehicleState,
    controls: &[ControlInput],
    ctx: &RolloutContext,
    shield: bool,
) -> f64 {
    let cost = ctx.cost;
    let barrier = cost.barrier();
    let mut x = *x0;
    let mut h_prev = barrier.value(x.lateral_error, 0.0);
    let mut total = 0.0;
    for u in controls {
        total += cost.running(&x);
        x = match ctx.model.step_nominal(&x, u) {
            Ok(next) => next,
            Err(_) => return f64::INFINITY,
        };
        if shield {
            let h = barrier.value(x.lateral_error, 0.0);
            total += violation_cost(
                residual(h, h_prev, cost.safety.cbf_rate),
                cost.safety.weight,
            );
            h_prev = h;
        }
    }
    total += cost.terminal(&x);
    if total.is_nan() {
        f64::INFINITY
    } else {
        total
    }
}

/// State cost of a deterministic rollout: `sum_k q(x_k) + phi(x_K)`.
/// `f64::INFINITY` if the rollout leaves the curvilinear frame.
pub fn rollout_mppi(x0: &VehicleState, controls: &[ControlInput], ctx: &RolloutContext) -> f64 {
    deterministic_cost(x0, controls, ctx, false)
}

/// [`rollout_mppi`] plus the barrier-condition penalty on every step, with
/// the barrier evaluated at zero lateral uncertainty.
pub fn rollout_smppi(x0: &VehicleState, controls: &[ControlInput], ctx: &RolloutContext) -> f64 {
    deterministic_cost(x0, controls, ctx, true)
}

/// Belief-space rollout: the belief is propagated by Monte Carlo with
/// `inner_samples` particles per step, the running cost is charged on the
/// mean and the barrier penalty on the (current, previous) belief pair.
pub fn rollout_bss(
    belief0: &BeliefState,
    controls: &[ControlInput],
    inner_samples: usize,
    ctx: &RolloutContext,
    rng: &mut Stream,
    scratch: &mut Scratch,
) -> f64 {
    let cost = ctx.cost;
    let barrier = cost.barrier();
    let h_of =
        |b: &BeliefState| lateral_std(b).map(|s| barrier.value(b.mean()[idx::LATERAL_ERROR], s));
    let mut h_prev = match h_of(belief0) {
        Ok(h) => h,
        Err(_) => return f64::INFINITY,
    };
    let mut belief = belief0.clone();
    let mut total = 0.0;
    for u in controls {
        total += cost.running(&belief.mean_state());
        belief = match propagate_mc_with(&belief, u, inner_samples, rng, ctx.model, scratch) {
            Ok(b) => b,
            Err(_) => return f64::INFINITY,
        };
        let mean = belief.mean_state();
        let kappa = ctx.model.track.curvature(mean.progress);
        if !(1.0 - kappa * mean.lateral_error > 0.0) {
            return f64::INFINITY;
        }
        let h = match h_of(&belief) {
            Ok(h) => h,
            Err(_) => return f64::INFINITY,
        };
        total += violation_cost(
            residual(h, h_prev, cost.safety.cbf_rate),
            cost.safety.weight,
        );
        h_prev = h;
    }
    total += cost.terminal(&belief.mean_state());
    if total.is_nan() {
        f64::INFINITY
    } else {
        total
    }
}

/// Result of one receding-horizon iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// First entry of the optimized plan, to be executed.
    pub control: ControlInput,
    /// Optimized plan (before the warm-start shift).
    pub optimized: ControlPlan,
    /// Plan used as the nominal at the next iteration.
    pub next_plan: ControlPlan,
    /// Lowest sampled cost.
    pub best_cost: f64,
    /// Number of rollouts with finite cost.
    pub valid_rollouts: usize,
}

/// A controller instance with its warm-start plan and RNG position.
#[derive(Clone, Debug)]
pub struct Controller {
    config: MppiConfig,
    cost: CostSpec,
    model: VehicleModel,
    seed: u64,
    iteration: u64,
    plan: ControlPlan,
    factor: Matrix2<f64>,
    precision: Matrix2<f64>,
}

impl Controller {
    /// `model` describes the rollout dynamics (integration and, for the
    /// belief-space controller, the process noise).
    pub fn new(
        config: MppiConfig,
        cost: CostSpec,
        model: VehicleModel,
        seed: u64,
    ) -> Result<Self, ControllerError> {
        config.validate()?;
        cost.validate()?;
        let factor = sampling_factor(&config.sampling_cov)?;
        let precision = sampling_precision(&config.sampling_cov);
        let plan = ControlPlan::constant(
            config.bounds.clamp(ControlInput::new(0.0, 0.0)),
            config.horizon,
        );
        Ok(Controller {
            config,
            cost,
            model,
            seed,
            iteration: 0,
            plan,
            factor,
            precision,
        })
    }

    pub fn config(&self) -> &MppiConfig {
        &self.config
    }

    pub fn cost(&self) -> &CostSpec {
        &self.cost
    }

    pub fn model(&self) -> &VehicleModel {
        &self.model
    }

    pub fn plan(&self) -> &ControlPlan {
        &self.plan
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn set_plan(&mut self, plan: ControlPlan) -> Result<(), ControllerError> {
        if plan.horizon() != self.config.horizon {
            return Err(ControllerError::InvalidConfig(format!(
                "plan horizon {} differs from configured {}",
                plan.horizon(),
                self.config.horizon
            )));
        }
        self.plan = ControlPlan::new(plan.controls, &self.config.bounds)?;
        Ok(())
    }

    /// Belief with the given state as mean and zero covariance.
    pub fn point_belief(&self, x: &VehicleState) -> BeliefState {
        BeliefState::deterministic(
            nalgebra::DVector::from_row_slice(&x.to_array()),
            self.config.cov_subset.clone(),
        )
    }

    /// Samples, rolls out and averages around the current plan; returns the
    /// control to execute and advances the warm start. The deterministic
    /// controllers use only the belief mean.
    pub fn control_step(&mut self, belief: &BeliefState) -> Result<StepOutcome, ControllerError> {
        if belief.mean().len() != STATE_DIM {
            return Err(BeliefError::DimensionMismatch(format!(
                "belief mean has {} entries",
                belief.mean().len()
            ))
            .into());
        }
        let ctx = RolloutContext {
            model: &self.model,
            cost: &self.cost,
        };
        let x0 = belief.mean_state();
        let kind = self.config.kind;
        let n = self.config.inner_samples;
        let (seed, iteration) = (self.seed, self.iteration);
        let plan = &self.plan;
        let (factor, precision, gamma, bounds) = (
            &self.factor,
            &self.precision,
            self.config.control_cost,
            &self.config.bounds,
        );

        let results: Vec<(Vec<ControlInput>, f64)> = (0..self.config.samples)
            .into_par_iter()
            .map_init(Scratch::default, |scratch, m| {
                let mut rng = substream(seed, &[domain::CONTROL_SAMPLES, iteration, m as u64]);
                let sample = sample_sequence(plan, factor, bounds, &mut rng);
                let state_cost = match kind {
                    ControllerKind::Mppi => rollout_mppi(&x0, &sample.applied, &ctx),
                    ControllerKind::ShieldMppi => rollout_smppi(&x0, &sample.applied, &ctx),
                    ControllerKind::BssMppi => {
                        // Common random numbers: every sample sees the same particle
                        // draws, so cost differences come from the controls.
                        let mut brng = substream(seed, &[domain::BELIEF_PROPAGATION, iteration]);
                        rollout_bss(belief, &sample.applied, n, &ctx, &mut brng, scratch)
                    }
                };
                let total = state_cost + control_cost(plan, &sample.raw, precision, gamma);
                (
                    sample.applied,
                    if total.is_finite() {
                        total
                    } else {
                        f64::INFINITY
                    },
                )
            })
            .collect();

        let (samples, costs): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        let batch = RolloutBatch { samples, costs };
        let optimized = mppi_update(&batch, self.config.temperature, &self.config.bounds)?;
        let best_cost = batch.costs.iter().copied().fold(f64::INFINITY, f64::min);
        let valid_rollouts = batch.costs.iter().filter(|c| c.is_finite()).count();
        let next_plan = optimized.shifted();
        self.plan = next_plan.clone();
        self.iteration += 1;
        Ok(StepOutcome {
            control: optimized.first(),
            optimized,
            next_plan,
            best_cost,
            valid_rollouts,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{make_test_track, stadium, NoiseModel, VehicleParams};
    use std::sync::Arc;

    fn model() -> VehicleModel {
        VehicleModel::new(
            VehicleParams::default(),
            Arc::new(stadium(20.0, 6.0, 2.0).unwrap()),
            NoiseModel::none(),
        )
    }

    fn batch(costs: Vec<f64>) -> RolloutBatch {
        let samples = (0..costs.len())
            .map(|m| vec![ControlInput::new(0.01 * m as f64, -0.1 * m as f64); 3])
            .collect();
        RolloutBatch { samples, costs }
    }

    #[test]
    fn zero_sampling_covariance_returns_nominal() {
        let plan = ControlPlan::constant(ControlInput::new(0.1, 0.2), 5);
        let s =
            sample_controls(&plan, &Matrix2::zeros(), &ControlBounds::default(), 4, 1, 0).unwrap();
        assert!(s.iter().all(|x| x.applied == plan.controls()));
    }

    #[test]
    fn clamping_at_upper_bound() {
        let b = ControlBounds::default();
        let plan = ControlPlan::constant(ControlInput::new(b.steer_max, b.throttle_max), 50);
        let s = sample_controls(
            &plan,
            &Matrix2::from_diagonal(&Vector2::new(0.01, 0.01)),
            &b,
            8,
            2,
            0,
        )
        .unwrap();
        for x in &s {
            for (a, r) in x.applied.iter().zip(&x.raw) {
                assert!(a.steer <= b.steer_max && a.throttle <= b.throttle_max);
                if r.steer > b.steer_max {
                    assert_eq!(a.steer, b.steer_max);
                }
            }
        }
    }

    #[test]
    fn two_sample_weights() {
        let lambda = 0.7;
        let w = importance_weights(&[0.0, lambda * 2f64.ln()], lambda).unwrap();
        let total: f64 = w.iter().sum();
        assert!((w[0] / total - 2.0 / 3.0).abs() < 1e-15);
        assert!((w[1] / total - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn equal_costs_give_mean() {
        let b = batch(vec![3.0; 4]);
        let plan = mppi_update(&b, 1.0, &ControlBounds::default()).unwrap();
        assert!((plan.first().steer - 0.015).abs() < 1e-15);
        assert!((plan.first().throttle + 0.15).abs() < 1e-15);
    }

    #[test]
    fn invalid_rollouts() {
        let b = batch(vec![f64::INFINITY; 3]);
        assert_eq!(
            mppi_update(&b, 1.0, &ControlBounds::default()),
            Err(ControllerError::AllRolloutsInvalid)
        );
        let b = batch(vec![f64::INFINITY, 2.0, f64::INFINITY]);
        let plan = mppi_update(&b, 1.0, &ControlBounds::default()).unwrap();
        assert_eq!(plan.first(), ControlInput::new(0.01, -0.1));
    }

    #[test]
    fn single_step_on_target_is_terminal_only() {
        let m = model();
        let mut weights = [0.0; STATE_DIM];
        weights[idx::LATERAL_ERROR] = 1.0;
        let mut cost = CostSpec {
            weights,
            ..CostSpec::default()
        };
        let x0 = VehicleState::rolling(0.0, 0.0, &m.params);
        let ctx = RolloutContext {
            model: &m,
            cost: &cost,
        };
        let u = [ControlInput::new(0.0, 0.0)];
        let x1 = m.step_nominal(&x0, &u[0]).unwrap();
        assert_eq!(rollout_mppi(&x0, &u, &ctx), cost.terminal(&x1));
        cost.weights = [0.0; STATE_DIM];
        let ctx = RolloutContext {
            model: &m,
            cost: &cost,
        };
        assert_eq!(rollout_mppi(&x0, &u, &ctx), 0.0);
    }

    #[test]
    fn off_track_accumulates_indicator() {
        let m = VehicleModel::new(
            VehicleParams::default(),
            Arc::new(
                make_test_track(
                    &[
                        (200.0, 0.0),
                        (std::f64::consts::PI * 10.0, 0.1),
                        (200.0, 0.0),
                        (std::f64::consts::PI * 10.0, 0.1),
                    ],
                    2.0,
                )
                .unwrap(),
            ),
            NoiseModel::none(),
        );
        let cost = CostSpec::default();
        let x0 = VehicleState {
            lateral_error: 2.5,
            ..VehicleState::rolling(1.0, 5.0, &m.params)
        };
        let ctx = RolloutContext {
            model: &m,
            cost: &cost,
        };
        let k = 10;
        let c = rollout_mppi(&x0, &vec![ControlInput::new(0.0, 0.0); k], &ctx);
        assert!(c >= k as f64 * cost.collision_penalty);
    }

    #[test]
    fn shield_reductions() {
        let m = model();
        let mut cost = CostSpec::default();
        let x0 = VehicleState::rolling(5.0, 0.0, &m.params);
        let u = vec![ControlInput::new(0.0, 0.1); 15];
        let ctx = RolloutContext {
            model: &m,
            cost: &cost,
        };
        // Straight along the center line: h stays at w_T^2, residual beta h > 0.
        assert_eq!(rollout_smppi(&x0, &u, &ctx), rollout_mppi(&x0, &u, &ctx));
        cost.safety.weight = 0.0;
        let ctx = RolloutContext {
            model: &m,
            cost: &cost,
        };
        let steer = vec![ControlInput::new(0.2, 0.3); 15];
        assert_eq!(
            rollout_smppi(&x0, &steer, &ctx),
            rollout_mppi(&x0, &steer, &ctx)
        );
    }

    #[test]
    fn single_step_penalty_value() {
        assert!((violation_cost(residual(0.4, 1.0, 0.5), 1000.0) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn bss_matches_shield_without_noise() {
        let m = model();
        let cost = CostSpec::default();
        let x0 = VehicleState {
            lateral_error: 0.8,
            vy: 0.1,
            ..VehicleState::rolling(5.0, 15.0, &m.params)
        };
        let ctx = RolloutContext {
            model: &m,
            cost: &cost,
        };
        let plan = ControlPlan::constant(ControlInput::new(0.05, 0.2), 20);
        let samples = sample_controls(
            &plan,
            &Matrix2::from_diagonal(&Vector2::new(0.01, 0.09)),
            &ControlBounds::default(),
            16,
            4,
            0,
        )
        .unwrap();
        let belief = BeliefState::deterministic(
            nalgebra::DVector::from_row_slice(&x0.to_array()),
            CovSubset::default_vehicle(),
        );
        for s in &samples {
            let a = rollout_smppi(&x0, &s.applied, &ctx);
            let b = rollout_bss(
                &belief,
                &s.applied,
                2,
                &ctx,
                &mut substream(0, &[]),
                &mut Scratch::default(),
            );
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn bss_penalty_appears_with_uncertainty() {
        let m = model();
        let mut cost = CostSpec {
            backoff: 2.0,
            ..CostSpec::default()
        };
        cost.weights = [0.0; STATE_DIM];
        let b = cost.barrier();
        // Fixed mean e_y = 1.2: the margin reaches zero at sigma = 0.4.
        assert!(b.value(1.2, 0.39) > 0.0);
        assert!(b.value(1.2, 0.41) < 0.0);
        let _ = m;
    }

    #[test]
    fn single_sample_zero_noise_control_step() {
        let m = model();
        let config = MppiConfig {
            kind: ControllerKind::Mppi,
            samples: 1,
            sampling_cov: Matrix2::zeros(),
            ..MppiConfig::default()
        };
        let mut c = Controller::new(config, CostSpec::default(), m.clone(), 3).unwrap();
        let plan = ControlPlan::constant(ControlInput::new(0.12, 0.4), 20);
        c.set_plan(plan.clone()).unwrap();
        let x0 = VehicleState::rolling(3.0, 0.0, &m.params);
        let out = c.control_step(&c.point_belief(&x0)).unwrap();
        assert_eq!(out.control, plan.first());
    }

    #[test]
    fn seeded_control_steps_repeat() {
        let m = model();
        let config = MppiConfig {
            kind: ControllerKind::BssMppi,
            samples: 32,
            inner_samples: 4,
            ..MppiConfig::default()
        };
        let noisy = VehicleModel {
            noise: NoiseModel::velocity([0.05, 0.05, 0.1]),
            ..m.clone()
        };
        let run = || {
            let mut c =
                Controller::new(config.clone(), CostSpec::default(), noisy.clone(), 11).unwrap();
            let x0 = VehicleState::rolling(3.0, 0.0, &m.params);
            (0..3)
                .map(|_| c.control_step(&c.point_belief(&x0)).unwrap().control)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn warm_start_shift() {
        let plan = ControlPlan {
            controls: vec![
                ControlInput::new(0.1, 0.0),
                ControlInput::new(0.2, 0.0),
                ControlInput::new(0.3, 0.0),
            ],
        };
        let s = plan.shifted();
        assert_eq!(
            s.controls(),
            &[
                ControlInput::new(0.2, 0.0),
                ControlInput::new(0.3, 0.0),
                ControlInput::new(0.3, 0.0)
            ]
        );
    }

    #[test]
    fn config_validation() {
        assert!(MppiConfig {
            samples: 0,
            ..MppiConfig::default()
        }
        .validate()
        .is_err());
        assert!(MppiConfig {
            temperature: 0.0,
            ..MppiConfig::default()
        }
        .validate()
        .is_err());
        assert!(MppiConfig {
            inner_samples: 1,
            ..MppiConfig::default()
        }
        .validate()
        .is_err());
        assert!(MppiConfig {
            kind: ControllerKind::Mppi,
            inner_samples: 1,
            ..MppiConfig::default()
        }
        .validate()
        .is_ok());
        let mut cost = CostSpec::default();
        cost.weights[0] = -1.0;
        assert!(cost.validate().is_err());
    }
}
