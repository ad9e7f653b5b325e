//! Planar single-track vehicle in road-aligned coordinates.

use serde::{Deserialize, Serialize};

use super::track::{normalize_angle, Track};
use super::DynamicsError;

pub const STATE_DIM: usize = 8;
pub const GRAVITY: f64 = 9.81;

/// Component indices of [`VehicleState::to_array`].
pub mod idx {
    pub const VX: usize = 0;
    pub const VY: usize = 1;
    pub const YAW_RATE: usize = 2;
    pub const OMEGA_FRONT: usize = 3;
    pub const OMEGA_REAR: usize = 4;
    pub const HEADING_ERROR: usize = 5;
    pub const LATERAL_ERROR: usize = 6;
    pub const PROGRESS: usize = 7;
}

/// Body velocities, wheel speeds and the pose relative to the centerline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Longitudinal velocity (m/s).
    pub vx: f64,
    /// Lateral velocity (m/s).
    pub vy: f64,
    /// Yaw rate (rad/s).
    pub yaw_rate: f64,
    /// Front wheel speed (rad/s).
    pub omega_front: f64,
    /// Rear wheel speed (rad/s).
    pub omega_rear: f64,
    /// Heading relative to the centerline tangent (rad).
    pub heading_error: f64,
    /// Signed lateral offset from the centerline, left positive (m).
    pub lateral_error: f64,
    /// Arc-length progress along the centerline (m).
    pub progress: f64,
}

impl VehicleState {
    pub fn to_array(&self) -> [f64; STATE_DIM] {
        [
            self.vx,
            self.vy,
            self.yaw_rate,
            self.omega_front,
            self.omega_rear,
            self.heading_error,
            self.lateral_error,
            self.progress,
        ]
    }

    pub fn from_array(a: &[f64]) -> Self {
        VehicleState {
            vx: a[0],
            vy: a[1],
            yaw_rate: a[2],
            omega_front: a[3],
            omega_rear: a[4],
            heading_error: a[5],
            lateral_error: a[6],
            progress: a[7],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Forward driving at `speed` with rolling wheels, on the centerline at `s`.
    pub fn rolling(speed: f64, s: f64, params: &VehicleParams) -> Self {
        VehicleState {
            vx: speed,
            omega_front: speed / params.wheel_radius,
            omega_rear: speed / params.wheel_radius,
            progress: s,
            ..Default::default()
        }
    }
}

/// Front steering angle and normalized throttle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    /// Steering angle at the front wheel (rad).
    pub steer: f64,
    /// Throttle command, negative values brake.
    pub throttle: f64,
}

impl ControlInput {
    pub fn new(steer: f64, throttle: f64) -> Self {
        ControlInput { steer, throttle }
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.steer, self.throttle]
    }

    pub fn from_array(a: [f64; 2]) -> Self {
        ControlInput {
            steer: a[0],
            throttle: a[1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBounds {
    pub steer_max: f64,
    pub throttle_min: f64,
    pub throttle_max: f64,
}

impl Default for ControlBounds {
    fn default() -> Self {
        ControlBounds {
            steer_max: 0.35,
            throttle_min: -1.0,
            throttle_max: 1.0,
        }
    }
}

impl ControlBounds {
    pub fn clamp(&self, u: ControlInput) -> ControlInput {
        ControlInput {
            steer: u.steer.clamp(-self.steer_max, self.steer_max),
            throttle: u.throttle.clamp(self.throttle_min, self.throttle_max),
        }
    }

    pub fn contains(&self, u: ControlInput) -> bool {
        u.steer.abs() <= self.steer_max
            && u.throttle >= self.throttle_min
            && u.throttle <= self.throttle_max
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.steer_max > 0.0 && self.steer_max.is_finite()) {
            return Err(DynamicsError::InvalidParams(format!(
                "steer_max must be positive, got {}",
                self.steer_max
            )));
        }
        if !(self.throttle_min < self.throttle_max)
            || !self.throttle_min.is_finite()
            || !self.throttle_max.is_finite()
        {
            return Err(DynamicsError::InvalidParams(format!(
                "throttle bounds must satisfy min < max, got [{}, {}]",
                self.throttle_min, self.throttle_max
            )));
        }
        Ok(())
    }
}

/// Magic-formula coefficients for one axle, used for both slip directions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TireParams {
    /// Stiffness factor B.
    pub stiffness: f64,
    /// Shape factor C.
    pub shape: f64,
    /// Peak factor D (N).
    pub peak: f64,
    /// Longitudinal semi-axis of the friction ellipse (N).
    pub fx_max: f64,
    /// Lateral semi-axis of the friction ellipse (N).
    pub fy_max: f64,
}

impl TireParams {
    pub fn with_peak(peak: f64) -> Self {
        TireParams {
            stiffness: 4.0,
            shape: 1.3,
            peak,
            fx_max: peak,
            fy_max: peak,
        }
    }

    /// Pure-slip magic formula `D sin(C atan(B x))`.
    #[inline]
    pub fn magic(&self, slip: f64) -> f64 {
        self.peak * (self.shape * (self.stiffness * slip).atan()).sin()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Euler,
    Rk4,
}

/// How one call to [`step`] advances time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Integration {
    pub scheme: Scheme,
    /// Total time advanced per step (s).
    pub dt: f64,
    /// Number of equal sub-intervals `dt` is split into.
    pub substeps: usize,
}

impl Integration {
    /// Explicit Euler over the full control period, used inside rollouts.
    pub fn rollout(dt: f64) -> Self {
        Integration {
            scheme: Scheme::Euler,
            dt,
            substeps: 1,
        }
    }

    /// RK4 with 10 ms substeps, used for the simulated plant.
    pub fn plant(dt: f64) -> Self {
        let substeps = (dt / 0.01).round().max(1.0) as usize;
        Integration {
            scheme: Scheme::Rk4,
            dt,
            substeps,
        }
    }
}

/// Physical parameters of a 1:5 scale race car.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    /// Mass (kg).
    pub mass: f64,
    /// Yaw moment of inertia (kg m^2).
    pub yaw_inertia: f64,
    /// CG to front axle (m).
    pub lf: f64,
    /// CG to rear axle (m).
    pub lr: f64,
    /// Wheel radius (m).
    pub wheel_radius: f64,
    /// Effective spin inertia per wheel including reflected drivetrain (kg m^2).
    pub wheel_inertia: f64,
    pub front_tire: TireParams,
    pub rear_tire: TireParams,
    /// Rear-axle torque per unit throttle (N m).
    pub drive_gain: f64,
    /// Rolling resistance as a fraction of weight.
    pub rolling_resistance: f64,
    /// Speed floor for slip denominators (m/s).
    pub min_slip_speed: f64,
    pub integration: Integration,
}

impl Default for VehicleParams {
    fn default() -> Self {
        let mass = 22.0;
        let mu = 0.6;
        let axle_peak = mu * mass * GRAVITY / 2.0;
        VehicleParams {
            mass,
            yaw_inertia: 1.2,
            lf: 0.25,
            lr: 0.25,
            wheel_radius: 0.095,
            wheel_inertia: 0.15,
            front_tire: TireParams::with_peak(axle_peak),
            rear_tire: TireParams::with_peak(axle_peak),
            drive_gain: 12.0,
            rolling_resistance: 0.02,
            min_slip_speed: 0.3,
            integration: Integration::rollout(0.05),
        }
    }
}

impl VehicleParams {
    pub fn wheelbase(&self) -> f64 {
        self.lf + self.lr
    }

    pub fn with_integration(mut self, integration: Integration) -> Self {
        self.integration = integration;
        self
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let positive = [
            ("mass", self.mass),
            ("yaw_inertia", self.yaw_inertia),
            ("lf", self.lf),
            ("lr", self.lr),
            ("wheel_radius", self.wheel_radius),
            ("wheel_inertia", self.wheel_inertia),
            ("drive_gain", self.drive_gain),
            ("min_slip_speed", self.min_slip_speed),
            ("integration.dt", self.integration.dt),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(DynamicsError::InvalidParams(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        for (axle, t) in [
            ("front_tire", &self.front_tire),
            ("rear_tire", &self.rear_tire),
        ] {
            for (name, v) in [
                ("stiffness", t.stiffness),
                ("shape", t.shape),
                ("peak", t.peak),
                ("fx_max", t.fx_max),
                ("fy_max", t.fy_max),
            ] {
                if !(v.is_finite() && v > 0.0) {
                    return Err(DynamicsError::InvalidParams(format!(
                        "{axle}.{name} must be positive, got {v}"
                    )));
                }
            }
        }
        if !(self.rolling_resistance.is_finite() && self.rolling_resistance >= 0.0) {
            return Err(DynamicsError::InvalidParams(format!(
                "rolling_resistance must be non-negative, got {}",
                self.rolling_resistance
            )));
        }
        if self.integration.substeps == 0 {
            return Err(DynamicsError::InvalidParams(
                "integration.substeps must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Tire force in the wheel frame (N).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TireForce {
    pub fx: f64,
    pub fy: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AxleForces {
    pub front: TireForce,
    pub rear: TireForce,
}

#[inline]
fn combined_slip(tire: &TireParams, slip_ratio: f64, slip_angle: f64) -> TireForce {
    let fx = tire.magic(slip_ratio).clamp(-tire.fx_max, tire.fx_max);
    let fy0 = tire.magic(slip_angle).clamp(-tire.fy_max, tire.fy_max);
    let used = fx / tire.fx_max;
    let fy = fy0 * (1.0 - used * used).max(0.0).sqrt();
    TireForce { fx, fy }
}

/// Front and rear tire forces from the magic formula with friction-ellipse
/// coupling.
#[inline]
pub fn tire_forces(
    state: &VehicleState,
    control: &ControlInput,
    params: &VehicleParams,
) -> AxleForces {
    let floor = params.min_slip_speed;
    let (sd, cd) = control.steer.sin_cos();
    let front_lateral = state.vy + params.lf * state.yaw_rate;
    let rear_lateral = state.vy - params.lr * state.yaw_rate;
    let vx_ref = state.vx.abs().max(floor);

    let alpha_front = control.steer - front_lateral.atan2(vx_ref);
    let alpha_rear = -rear_lateral.atan2(vx_ref);

    let front_rolling = state.vx * cd + front_lateral * sd;
    let kappa_front =
        (state.omega_front * params.wheel_radius - front_rolling) / front_rolling.abs().max(floor);
    let kappa_rear =
        (state.omega_rear * params.wheel_radius - state.vx) / state.vx.abs().max(floor);

    AxleForces {
        front: combined_slip(&params.front_tire, kappa_front, alpha_front),
        rear: combined_slip(&params.rear_tire, kappa_rear, alpha_rear),
    }
}

/// Continuous-time state derivative at curvature `kappa`.
#[inline]
pub fn derivatives(
    state: &VehicleState,
    control: &ControlInput,
    params: &VehicleParams,
    kappa: f64,
) -> Result<[f64; STATE_DIM], DynamicsError> {
    let scale = 1.0 - kappa * state.lateral_error;
    if !(scale > 0.0) {
        return Err(DynamicsError::CurvilinearSingularity {
            s: state.progress,
            lateral_error: state.lateral_error,
            curvature: kappa,
        });
    }
    let forces = tire_forces(state, control, params);
    let (sd, cd) = control.steer.sin_cos();
    let front_x = forces.front.fx * cd - forces.front.fy * sd;
    let front_y = forces.front.fx * sd + forces.front.fy * cd;
    // tanh saturates to exactly +-1 in double precision beyond |x| ~ 19.1.
    let ratio = state.vx / 0.1;
    let sat = if ratio.abs() > 20.0 {
        ratio.signum()
    } else {
        ratio.tanh()
    };
    let rolling = params.rolling_resistance * params.mass * GRAVITY * sat;

    let vx_dot = (front_x + forces.rear.fx - rolling) / params.mass + state.vy * state.yaw_rate;
    let vy_dot = (front_y + forces.rear.fy) / params.mass - state.vx * state.yaw_rate;
    let r_dot = (params.lf * front_y - params.lr * forces.rear.fy) / params.yaw_inertia;
    let omega_f_dot = -params.wheel_radius * forces.front.fx / params.wheel_inertia;
    let omega_r_dot = (params.drive_gain * control.throttle - params.wheel_radius * forces.rear.fx)
        / params.wheel_inertia;

    let (se, ce) = state.heading_error.sin_cos();
    let s_dot = (state.vx * ce - state.vy * se) / scale;
    let e_y_dot = state.vx * se + state.vy * ce;
    let e_psi_dot = state.yaw_rate - kappa * s_dot;

    Ok([
        vx_dot,
        vy_dot,
        r_dot,
        omega_f_dot,
        omega_r_dot,
        e_psi_dot,
        e_y_dot,
        s_dot,
    ])
}

#[inline]
fn offset(state: &VehicleState, d: &[f64; STATE_DIM], h: f64) -> VehicleState {
    let a = state.to_array();
    let mut out = [0.0; STATE_DIM];
    for i in 0..STATE_DIM {
        out[i] = a[i] + h * d[i];
    }
    VehicleState::from_array(&out)
}

#[inline]
fn rhs(
    state: &VehicleState,
    control: &ControlInput,
    params: &VehicleParams,
    track: &Track,
) -> Result<[f64; STATE_DIM], DynamicsError> {
    derivatives(state, control, params, track.curvature(state.progress))
}

/// Advances the vehicle by `params.integration.dt`, then adds `disturbance`
/// (a full-state additive vector; zero entries leave channels untouched).
///
/// `s` is wrapped onto the track and `e_psi` onto `(-pi, pi]`.
pub fn step(
    state: &VehicleState,
    control: &ControlInput,
    disturbance: &[f64; STATE_DIM],
    params: &VehicleParams,
    track: &Track,
) -> Result<VehicleState, DynamicsError> {
    let integ = params.integration;
    let h = integ.dt / integ.substeps as f64;
    let mut x = *state;
    for _ in 0..integ.substeps {
        x = match integ.scheme {
            Scheme::Euler => {
                let k1 = rhs(&x, control, params, track)?;
                offset(&x, &k1, h)
            }
            Scheme::Rk4 => {
                let k1 = rhs(&x, control, params, track)?;
                let k2 = rhs(&offset(&x, &k1, 0.5 * h), control, params, track)?;
                let k3 = rhs(&offset(&x, &k2, 0.5 * h), control, params, track)?;
                let k4 = rhs(&offset(&x, &k3, h), control, params, track)?;
                let mut d = [0.0; STATE_DIM];
                for i in 0..STATE_DIM {
                    d[i] = (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0;
                }
                offset(&x, &d, h)
            }
        };
    }
    let mut a = x.to_array();
    for (v, w) in a.iter_mut().zip(disturbance.iter()) {
        *v += w;
    }
    let mut next = VehicleState::from_array(&a);
    if !next.is_finite() {
        return Err(DynamicsError::NonFinite);
    }
    next.progress = track.wrap(next.progress);
    next.heading_error = normalize_angle(next.heading_error);
    let kappa = track.curvature(next.progress);
    if !(1.0 - kappa * next.lateral_error > 0.0) {
        return Err(DynamicsError::CurvilinearSingularity {
            s: next.progress,
            lateral_error: next.lateral_error,
            curvature: kappa,
        });
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::track::{make_test_track, stadium};

    const ZERO: [f64; STATE_DIM] = [0.0; STATE_DIM];

    fn straight_track() -> Track {
        // A long loop whose first 200 m are straight.
        let r = 10.0;
        make_test_track(
            &[
                (200.0, 0.0),
                (std::f64::consts::PI * r, 1.0 / r),
                (200.0, 0.0),
                (std::f64::consts::PI * r, 1.0 / r),
            ],
            2.0,
        )
        .unwrap()
    }

    #[test]
    fn zero_slip_gives_zero_force() {
        let p = VehicleParams::default();
        let x = VehicleState::rolling(4.0, 0.0, &p);
        let f = tire_forces(&x, &ControlInput::default(), &p);
        assert_eq!(f.front, TireForce { fx: 0.0, fy: 0.0 });
        assert_eq!(f.rear, TireForce { fx: 0.0, fy: 0.0 });
    }

    #[test]
    fn saturated_slip_ratio_suppresses_lateral_force() {
        let p = VehicleParams::default();
        let mut x = VehicleState::rolling(4.0, 0.0, &p);
        // Slip ratio where the magic formula peaks: C atan(B k) = pi/2.
        let t = &p.rear_tire;
        let k_peak = (std::f64::consts::FRAC_PI_2 / t.shape).tan() / t.stiffness;
        x.omega_rear = 4.0 * (1.0 + k_peak) / p.wheel_radius;
        x.vy = 0.3;
        let f = tire_forces(&x, &ControlInput::default(), &p);
        let pure = t.magic(-(0.3f64).atan2(4.0));
        assert!((f.rear.fx - t.fx_max).abs() < 1e-9);
        assert!(f.rear.fy.abs() < 1e-6 * pure.abs().max(1.0));
        let bound = (f.rear.fx / t.fx_max).powi(2) + (f.rear.fy / t.fy_max).powi(2);
        assert!(bound <= 1.0 + 1e-9);
    }

    #[test]
    fn linear_regime_slope_matches_bcd() {
        let t = VehicleParams::default().front_tire;
        let h = 1e-6;
        let fd = (t.magic(h) - t.magic(-h)) / (2.0 * h);
        let bcd = t.stiffness * t.shape * t.peak;
        assert!((fd - bcd).abs() / bcd < 1e-6);
        for i in 1..=10 {
            let a = 0.001 * i as f64;
            assert!((t.magic(a) - bcd * a).abs() / (bcd * a) < 0.02, "alpha {a}");
        }
    }

    #[test]
    fn straight_advance_is_pure_progress() {
        let p = VehicleParams::default();
        let track = straight_track();
        let x = VehicleState {
            lateral_error: 0.7,
            ..VehicleState::rolling(5.0, 10.0, &p)
        };
        let next = step(&x, &ControlInput::default(), &ZERO, &p, &track).unwrap();
        assert!((next.progress - (10.0 + 5.0 * p.integration.dt)).abs() < 1e-12);
        assert_eq!(next.lateral_error, 0.7);
    }

    #[test]
    fn zero_noise_is_deterministic() {
        let p = VehicleParams::default().with_integration(Integration::plant(0.05));
        let track = stadium(20.0, 6.0, 2.0).unwrap();
        let x = VehicleState {
            vy: 0.2,
            yaw_rate: 0.3,
            lateral_error: -0.4,
            ..VehicleState::rolling(4.0, 21.0, &p)
        };
        let u = ControlInput::new(0.1, 0.4);
        let first = step(&x, &u, &ZERO, &p, &track).unwrap();
        for _ in 0..10_000 {
            let again = step(&x, &u, &ZERO, &p, &track).unwrap();
            assert_eq!(
                again.to_array().map(f64::to_bits),
                first.to_array().map(f64::to_bits)
            );
        }
    }

    #[test]
    fn steady_cornering_heading_error_settles() {
        // Constant-curvature loop; steer near the kinematic angle for R = 8 m.
        let r = 8.0;
        let track = make_test_track(&[(2.0 * std::f64::consts::PI * r, 1.0 / r)], 2.0).unwrap();
        // High grip keeps the tires well inside the linear region.
        let peak = 0.9 * 22.0 * GRAVITY / 2.0;
        let p = VehicleParams {
            front_tire: TireParams::with_peak(peak),
            rear_tire: TireParams::with_peak(peak),
            ..VehicleParams::default()
        };
        let mut x = VehicleState::rolling(3.0, 0.0, &p);
        let u = ControlInput::new((p.wheelbase() / r).atan() * 1.15, 0.05);
        let mut rates = Vec::new();
        for _ in 0..200 {
            let d = rhs(&x, &u, &p, &track).unwrap();
            rates.push(d[idx::HEADING_ERROR].abs());
            x = step(&x, &u, &ZERO, &p, &track).unwrap();
        }
        let early: f64 = rates[..20].iter().sum::<f64>() / 20.0;
        let late: f64 = rates[180..].iter().sum::<f64>() / 20.0;
        assert!(late < early, "late {late} early {early}");
        assert!(late < 0.05, "late {late}");
    }

    #[test]
    fn coasting_never_gains_speed() {
        let track = straight_track();
        for params in [
            VehicleParams::default(),
            VehicleParams::default().with_integration(Integration::plant(0.05)),
        ] {
            let mut x = VehicleState::rolling(6.0, 0.0, &params);
            let mut prev = x.vx;
            for _ in 0..300 {
                x = step(&x, &ControlInput::default(), &ZERO, &params, &track).unwrap();
                assert!(x.vx <= prev + 1e-12, "{} > {}", x.vx, prev);
                prev = x.vx;
            }
            assert!(x.vx < 6.0);
        }
    }

    #[test]
    fn leaving_the_frame_is_reported() {
        let r = 3.0;
        let track = make_test_track(&[(2.0 * std::f64::consts::PI * r, 1.0 / r)], 2.0).unwrap();
        let p = VehicleParams::default();
        let x = VehicleState {
            lateral_error: 3.2,
            ..VehicleState::rolling(3.0, 0.0, &p)
        };
        assert!(matches!(
            step(&x, &ControlInput::default(), &ZERO, &p, &track),
            Err(DynamicsError::CurvilinearSingularity { .. })
        ));
    }
}
