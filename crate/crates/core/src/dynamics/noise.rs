//! Additive Gaussian process noise on selected state channels.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::vehicle::{idx, STATE_DIM};
use super::DynamicsError;
use crate::linalg::psd_cholesky;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NoiseDistribution {
    #[default]
    Gaussian,
}

/// Zero-mean disturbance `w ~ N(0, Sigma_w)` on a subset of state channels.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModel {
    channels: Vec<usize>,
    covariance: DMatrix<f64>,
    factor: DMatrix<f64>,
    distribution: NoiseDistribution,
}

impl NoiseModel {
    pub fn new(channels: Vec<usize>, covariance: DMatrix<f64>) -> Result<Self, DynamicsError> {
        let n = channels.len();
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(DynamicsError::InvalidParams(format!(
                "noise covariance is {}x{} for {} channels",
                covariance.nrows(),
                covariance.ncols(),
                n
            )));
        }
        let mut seen = [false; STATE_DIM];
        for &c in &channels {
            if c >= STATE_DIM || std::mem::replace(&mut seen[c], true) {
                return Err(DynamicsError::InvalidParams(format!(
                    "bad or repeated noise channel {c}"
                )));
            }
        }
        let asym = (&covariance - covariance.transpose()).abs().max();
        if asym > 1e-10 * covariance.abs().max().max(1.0) {
            return Err(DynamicsError::FactorizationFailure);
        }
        let factor = psd_cholesky(&covariance).ok_or(DynamicsError::FactorizationFailure)?;
        Ok(NoiseModel {
            channels,
            covariance,
            factor,
            distribution: NoiseDistribution::Gaussian,
        })
    }

    /// Independent noise on the given channels with per-channel std.
    pub fn diagonal(channels: Vec<usize>, std: &[f64]) -> Result<Self, DynamicsError> {
        let var: Vec<f64> = std.iter().map(|s| s * s).collect();
        Self::new(channels, DMatrix::from_diagonal(&DVector::from_vec(var)))
    }

    /// Velocity-channel noise on `(vX, vY, yaw rate)`.
    pub fn velocity(std: [f64; 3]) -> Self {
        Self::diagonal(vec![idx::VX, idx::VY, idx::YAW_RATE], &std).expect("diagonal noise is PSD")
    }

    pub fn none() -> Self {
        Self::velocity([0.0; 3])
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn distribution(&self) -> NoiseDistribution {
        self.distribution
    }

    pub fn is_zero(&self) -> bool {
        self.covariance.iter().all(|v| *v == 0.0)
    }

    /// Same channels with the covariance multiplied by `factor >= 0`.
    pub fn scaled(&self, factor: f64) -> Result<Self, DynamicsError> {
        Self::new(self.channels.clone(), &self.covariance * factor)
    }

    /// Draws one full-state disturbance vector.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        if self.is_zero() {
            return out;
        }
        let n = self.channels.len();
        let mut z = [0.0; STATE_DIM];
        for zi in z.iter_mut().take(n) {
            *zi = rng.sample(StandardNormal);
        }
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += self.factor[(i, j)] * z[j];
            }
            out[self.channels[i]] = acc;
        }
        out
    }
}

/// Free-function form of [`NoiseModel::sample`].
pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, model: &NoiseModel) -> [f64; STATE_DIM] {
    model.sample(rng)
}
