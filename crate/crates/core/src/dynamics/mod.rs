//! Single-track vehicle model, tracks and process noise.

mod noise;
mod track;
mod vehicle;

use std::sync::Arc;

use thiserror::Error;

pub use noise::{sample_noise, NoiseDistribution, NoiseModel};
pub use track::{
    make_test_track, normalize_angle, stadium, Track, CLOSURE_TOLERANCE, MAX_SAMPLE_SPACING,
};
pub use vehicle::{
    derivatives, idx, step, tire_forces, AxleForces, ControlBounds, ControlInput, Integration,
    Scheme, TireForce, TireParams, VehicleParams, VehicleState, GRAVITY, STATE_DIM,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("state left the curvilinear frame at s = {s:.3} (e_Y = {lateral_error:.3}, kappa = {curvature:.4})")]
    CurvilinearSingularity {
        s: f64,
        lateral_error: f64,
        curvature: f64,
    },
    #[error("state became non-finite")]
    NonFinite,
    #[error("track does not close: total turning {turning:.9} rad")]
    OpenLoop { turning: f64 },
    #[error("noise covariance is not positive semidefinite")]
    FactorizationFailure,
    #[error("invalid track: {0}")]
    InvalidTrack(String),
    #[error("track file: {0}")]
    TrackFormat(String),
    #[error("invalid vehicle parameters: {0}")]
    InvalidParams(String),
}

/// Everything needed to push a vehicle state forward: parameters (including
/// the integration scheme), the track and the process noise.
#[derive(Clone, Debug)]
pub struct VehicleModel {
    pub params: VehicleParams,
    pub track: Arc<Track>,
    pub noise: NoiseModel,
}

impl VehicleModel {
    pub fn new(params: VehicleParams, track: Arc<Track>, noise: NoiseModel) -> Self {
        VehicleModel {
            params,
            track,
            noise,
        }
    }

    /// Deterministic step (no disturbance).
    #[inline]
    pub fn step_nominal(
        &self,
        x: &VehicleState,
        u: &ControlInput,
    ) -> Result<VehicleState, DynamicsError> {
        step(x, u, &[0.0; STATE_DIM], &self.params, &self.track)
    }
}
