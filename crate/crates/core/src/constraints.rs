//! Chance-constraint tightening and the discrete-time barrier penalty.
//!
//! A chance constraint `Pr(c_i(x) >= 0) <= p_i` is replaced by the tightened
//! deterministic margin `h_i = -c_i(mean) - nu_i * sqrt(eta' Sigma eta)` with
//! `eta` the constraint gradient at the mean. The overall heuristic is the
//! minimum over constraints; the safety condition between two consecutive
//! beliefs is `h(cur) - (1 - beta) h(prev) >= 0`, and its violation is
//! charged linearly with weight `C`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::belief::{AugmentedBeliefState, BeliefState};
use crate::dynamics::idx;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConstraintError {
    #[error("failure budget must lie in (0, 1], got {0}")]
    InvalidBudget(f64),
    #[error("probability {0} outside the admissible range")]
    InvalidProbability(f64),
    #[error("state component {0} is not tracked by the belief covariance")]
    UntrackedComponent(usize),
    #[error("invalid safety parameters: {0}")]
    InvalidParams(String),
}

/// Splits a joint failure budget evenly over `count` constraints.
///
/// The last entry absorbs rounding so the entries sum to `p_fail`.
/// Default joint failure budget, shared by the two lateral boundaries.
pub const DEFAULT_P_FAIL: f64 = 0.05;

pub fn allocate_budget(p_fail: f64, count: usize) -> Result<Vec<f64>, ConstraintError> {
    if !(p_fail > 0.0 && p_fail <= 1.0) {
        return Err(ConstraintError::InvalidBudget(p_fail));
    }
    if count == 0 {
        return Err(ConstraintError::InvalidBudget(p_fail));
    }
    let share = p_fail / count as f64;
    let mut budgets = vec![share; count];
    let head: f64 = budgets[..count - 1].iter().sum();
    budgets[count - 1] = p_fail - head;
    Ok(budgets)
}

/// Distribution-free back-off `sqrt((1 - p) / p)`.
pub fn backoff_cantelli(p: f64) -> Result<f64, ConstraintError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(ConstraintError::InvalidProbability(p));
    }
    Ok(((1.0 - p) / p).sqrt())
}

/// Gaussian back-off: the standard-normal upper `p` quantile,
/// `sqrt(2) erfinv(1 - 2p)`.
pub fn backoff_gaussian(p: f64) -> Result<f64, ConstraintError> {
    if !(p > 0.0 && p <= 0.5) {
        return Err(ConstraintError::InvalidProbability(p));
    }
    Ok(-normal_quantile(p))
}

/// Inverse error function on `(-1, 1)`.
pub fn inverse_erf(y: f64) -> f64 {
    if y <= -1.0 {
        return f64::NEG_INFINITY;
    }
    if y >= 1.0 {
        return f64::INFINITY;
    }
    normal_quantile(0.5 * (y + 1.0)) / std::f64::consts::SQRT_2
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard-normal quantile: Acklam's rational approximation followed by one
/// Newton step on the exact CDF.
pub fn normal_quantile(q: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    if q <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if q >= 1.0 {
        return f64::INFINITY;
    }
    let low = 0.024_25;
    let x = if q < low {
        let t = (-2.0 * q.ln()).sqrt();
        (((((C[0] * t + C[1]) * t + C[2]) * t + C[3]) * t + C[4]) * t + C[5])
            / ((((D[0] * t + D[1]) * t + D[2]) * t + D[3]) * t + 1.0)
    } else if q <= 1.0 - low {
        let t = q - 0.5;
        let r = t * t;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * t
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let t = (-2.0 * (1.0 - q).ln()).sqrt();
        -(((((C[0] * t + C[1]) * t + C[2]) * t + C[3]) * t + C[4]) * t + C[5])
            / ((((D[0] * t + D[1]) * t + D[2]) * t + D[3]) * t + 1.0)
    };
    if x == 0.0 {
        return 0.0;
    }
    let density = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    x - (normal_cdf(x) - q) / density
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackoffMode {
    Cantelli,
    #[default]
    Gaussian,
}

impl BackoffMode {
    pub fn coefficient(self, p: f64) -> Result<f64, ConstraintError> {
        match self {
            BackoffMode::Cantelli => backoff_cantelli(p),
            BackoffMode::Gaussian => backoff_gaussian(p),
        }
    }
}

impl fmt::Display for BackoffMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackoffMode::Cantelli => "cantelli",
            BackoffMode::Gaussian => "gaussian",
        })
    }
}

/// Relative step for central-difference gradients.
pub const FD_RELATIVE_STEP: f64 = 1e-5;

/// A scalar state constraint; the feasible side is `value < 0`.
pub trait StateConstraint: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;

    /// Analytic gradient, when available.
    fn gradient(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// Gradient of `c` at `x`: analytic if offered, central differences otherwise.
pub fn constraint_gradient(c: &dyn StateConstraint, x: &[f64]) -> Vec<f64> {
    if let Some(g) = c.gradient(x) {
        return g;
    }
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = FD_RELATIVE_STEP * x[i].abs().max(1.0);
            probe[i] = x[i] + h;
            let up = c.value(&probe);
            probe[i] = x[i] - h;
            let down = c.value(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `e_Y - w_T < 0`: stay inside the left (upper) boundary.
#[derive(Clone, Copy, Debug)]
pub struct UpperLateralBound {
    pub half_width: f64,
}

/// `-e_Y - w_T < 0`: stay inside the right (lower) boundary.
#[derive(Clone, Copy, Debug)]
pub struct LowerLateralBound {
    pub half_width: f64,
}

impl StateConstraint for UpperLateralBound {
    fn value(&self, x: &[f64]) -> f64 {
        x[idx::LATERAL_ERROR] - self.half_width
    }

    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        let mut g = vec![0.0; x.len()];
        g[idx::LATERAL_ERROR] = 1.0;
        Some(g)
    }
}

impl StateConstraint for LowerLateralBound {
    fn value(&self, x: &[f64]) -> f64 {
        -x[idx::LATERAL_ERROR] - self.half_width
    }

    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        let mut g = vec![0.0; x.len()];
        g[idx::LATERAL_ERROR] = -1.0;
        Some(g)
    }
}

/// Constraint functions with their individual risk budgets.
#[derive(Clone)]
pub struct ChanceConstraintSpec {
    pub constraints: Vec<Arc<dyn StateConstraint>>,
    pub budgets: Vec<f64>,
    pub p_fail: f64,
    pub mode: BackoffMode,
}

impl fmt::Debug for ChanceConstraintSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChanceConstraintSpec")
            .field("constraints", &self.constraints.len())
            .field("budgets", &self.budgets)
            .field("p_fail", &self.p_fail)
            .field("mode", &self.mode)
            .finish()
    }
}

impl ChanceConstraintSpec {
    /// Uniform split of `p_fail` over the constraints.
    pub fn uniform(
        constraints: Vec<Arc<dyn StateConstraint>>,
        p_fail: f64,
        mode: BackoffMode,
    ) -> Result<Self, ConstraintError> {
        let budgets = allocate_budget(p_fail, constraints.len())?;
        Self::with_budgets(constraints, budgets, p_fail, mode)
    }

    pub fn with_budgets(
        constraints: Vec<Arc<dyn StateConstraint>>,
        budgets: Vec<f64>,
        p_fail: f64,
        mode: BackoffMode,
    ) -> Result<Self, ConstraintError> {
        if !(p_fail > 0.0 && p_fail <= 1.0) {
            return Err(ConstraintError::InvalidBudget(p_fail));
        }
        if budgets.len() != constraints.len() || budgets.is_empty() {
            return Err(ConstraintError::InvalidParams(format!(
                "{} budgets for {} constraints",
                budgets.len(),
                constraints.len()
            )));
        }
        if let Some(&p) = budgets.iter().find(|p| !(**p > 0.0 && **p <= 0.5)) {
            return Err(ConstraintError::InvalidProbability(p));
        }
        let total: f64 = budgets.iter().sum();
        if total > p_fail * (1.0 + 1e-12) {
            return Err(ConstraintError::InvalidBudget(total));
        }
        Ok(ChanceConstraintSpec {
            constraints,
            budgets,
            p_fail,
            mode,
        })
    }

    /// The symmetric pair of lateral track-boundary constraints.
    pub fn track(half_width: f64, p_fail: f64, mode: BackoffMode) -> Result<Self, ConstraintError> {
        Self::uniform(
            vec![
                Arc::new(UpperLateralBound { half_width }),
                Arc::new(LowerLateralBound { half_width }),
            ],
            p_fail,
            mode,
        )
    }

    pub fn backoffs(&self) -> Result<Vec<f64>, ConstraintError> {
        self.budgets
            .iter()
            .map(|&p| self.mode.coefficient(p))
            .collect()
    }
}

/// Tightened margin of a single constraint in belief space.
pub fn heuristic_h_i(belief: &BeliefState, constraint: &dyn StateConstraint, nu: f64) -> f64 {
    let mean = belief.mean();
    let grad = constraint_gradient(constraint, mean.as_slice());
    let subset = belief.subset().indices();
    let cov = belief.cov();
    let mut quad = 0.0;
    for (a, &ia) in subset.iter().enumerate() {
        for (b, &ib) in subset.iter().enumerate() {
            quad += grad[ia] * cov[(a, b)] * grad[ib];
        }
    }
    -constraint.value(mean.as_slice()) - nu * quad.max(0.0).sqrt()
}

/// Minimum of the per-constraint margins.
pub fn heuristic_h(
    belief: &BeliefState,
    spec: &ChanceConstraintSpec,
    backoffs: &[f64],
) -> Result<f64, ConstraintError> {
    if backoffs.len() != spec.constraints.len() {
        return Err(ConstraintError::InvalidParams(format!(
            "{} back-off values for {} constraints",
            backoffs.len(),
            spec.constraints.len()
        )));
    }
    Ok(spec
        .constraints
        .iter()
        .zip(backoffs)
        .map(|(c, &nu)| heuristic_h_i(belief, c.as_ref(), nu))
        .fold(f64::INFINITY, f64::min))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DcbfForm {
    /// `(w_T - nu sigma)^2 - e^2`.
    #[default]
    Squared,
    /// `w_T - nu sigma - |e|`.
    Linear,
}

/// Track-boundary barrier in belief space from mean lateral error and its std.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackBarrier {
    pub half_width: f64,
    pub backoff: f64,
    pub form: DcbfForm,
}

impl TrackBarrier {
    /// The tightened half width is clamped at zero: once `nu sigma >= w_T`
    /// no safe interior remains and only `e = 0` scores zero.
    #[inline]
    pub fn value(&self, mean_lateral: f64, lateral_std: f64) -> f64 {
        let margin = (self.half_width - self.backoff * lateral_std).max(0.0);
        match self.form {
            DcbfForm::Squared => margin * margin - mean_lateral * mean_lateral,
            DcbfForm::Linear => margin - mean_lateral.abs(),
        }
    }

    pub fn evaluate(&self, belief: &BeliefState) -> Result<f64, ConstraintError> {
        let sigma = crate::belief::lateral_std(belief)
            .map_err(|_| ConstraintError::UntrackedComponent(idx::LATERAL_ERROR))?;
        Ok(self.value(belief.mean()[idx::LATERAL_ERROR], sigma))
    }
}

/// Squared-form track barrier `(w_T - nu sigma_y)^2 - e_y^2`.
pub fn track_dcbf(belief: &BeliefState, half_width: f64, nu: f64) -> Result<f64, ConstraintError> {
    TrackBarrier {
        half_width,
        backoff: nu,
        form: DcbfForm::Squared,
    }
    .evaluate(belief)
}

/// Linear-form track barrier `w_T - nu sigma_y - |e_y|`.
pub fn track_dcbf_linear(
    belief: &BeliefState,
    half_width: f64,
    nu: f64,
) -> Result<f64, ConstraintError> {
    TrackBarrier {
        half_width,
        backoff: nu,
        form: DcbfForm::Linear,
    }
    .evaluate(belief)
}

/// Class-kappa rate and penalty weight of the safety condition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetyParams {
    /// `beta` in `h(cur) - (1 - beta) h(prev) >= 0`, within (0, 1).
    pub cbf_rate: f64,
    /// Penalty weight `C` on the violation (cost units), `>= 0`.
    pub weight: f64,
}

impl Default for SafetyParams {
    fn default() -> Self {
        SafetyParams {
            cbf_rate: 0.1,
            weight: 1000.0,
        }
    }
}

impl SafetyParams {
    pub fn validate(&self) -> Result<(), ConstraintError> {
        if !(self.cbf_rate > 0.0 && self.cbf_rate < 1.0) {
            return Err(ConstraintError::InvalidParams(format!(
                "cbf_rate must lie in (0, 1), got {}",
                self.cbf_rate
            )));
        }
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(ConstraintError::InvalidParams(format!(
                "safety weight must be >= 0, got {}",
                self.weight
            )));
        }
        Ok(())
    }
}

/// `h_cur - (1 - beta) h_prev`.
#[inline]
pub fn residual(h_current: f64, h_previous: f64, cbf_rate: f64) -> f64 {
    h_current - (1.0 - cbf_rate) * h_previous
}

/// `C max(-residual, 0)`.
#[inline]
pub fn violation_cost(residual: f64, weight: f64) -> f64 {
    if weight == 0.0 {
        return 0.0;
    }
    weight * (-residual).max(0.0)
}

/// Safety residual of an augmented belief; nonnegative iff the condition holds.
pub fn safety_residual<H>(z: &AugmentedBeliefState, h: H, cbf_rate: f64) -> f64
where
    H: Fn(&BeliefState) -> f64,
{
    residual(h(&z.current), h(&z.previous), cbf_rate)
}

/// Penalty charged for violating the safety condition.
pub fn safety_cost<H>(z: &AugmentedBeliefState, h: H, params: &SafetyParams) -> f64
where
    H: Fn(&BeliefState) -> f64,
{
    violation_cost(safety_residual(z, h, params.cbf_rate), params.weight)
}
