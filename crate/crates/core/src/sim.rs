//! Closed-loop simulation, crash/collision accounting and Monte-Carlo
//! aggregation.

use std::io::{self, Write};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::belief::{lateral_std, BeliefState};
use crate::constraints::residual;
use crate::controllers::{Controller, ControllerError, ControllerKind, CostSpec, MppiConfig};
use crate::dynamics::{
    idx, stadium, step, ControlInput, Integration, NoiseModel, Track, VehicleModel, VehicleParams,
    VehicleState,
};
use crate::rng::{derive_key, domain, substream};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid experiment configuration: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

/// Everything that defines a batch of closed-loop runs.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    /// Physical vehicle; its integration setting is replaced by
    /// [`ExperimentConfig::rollout_params`] / [`ExperimentConfig::plant_params`].
    pub vehicle: VehicleParams,
    pub track: Arc<Track>,
    /// Process noise added to the plant once per control step; the
    /// belief-space controller propagates the same model.
    pub noise: NoiseModel,
    pub controller: MppiConfig,
    pub cost: CostSpec,
    pub runs: usize,
    pub seed: u64,
    pub laps: usize,
    /// `|e_Y|` above which a step counts toward a collision (m).
    pub collision_threshold: f64,
    /// `|e_Y|` above which the run is terminated as a crash (m).
    pub crash_threshold: f64,
    pub max_steps: usize,
    /// Control period (s).
    pub dt: f64,
    /// Plant integration substep (s).
    pub plant_substep: f64,
    /// Mean initial forward speed (m/s).
    pub initial_speed: f64,
    /// Std of the per-run initial jitter on (vX, e_Y).
    pub initial_jitter: [f64; 2],
    /// Std per covariance-subset component of the state estimate handed to
    /// the controller; zeros mean the state is known exactly.
    pub estimate_std: Vec<f64>,
    pub log_trajectory: bool,
}

/// Per-control-step process noise std on (vX, vY, yaw rate).
pub const DEFAULT_NOISE_STD: [f64; 3] = [0.125, 0.125, 0.25];

impl Default for ExperimentConfig {
    fn default() -> Self {
        let controller = MppiConfig::default();
        let n = controller.cov_subset.len();
        ExperimentConfig {
            vehicle: VehicleParams::default(),
            track: Arc::new(stadium(20.0, 6.0, 2.0).expect("default stadium is valid")),
            noise: NoiseModel::velocity(DEFAULT_NOISE_STD),
            controller,
            cost: CostSpec::default(),
            runs: 100,
            seed: 0,
            laps: 1,
            collision_threshold: 1.8,
            crash_threshold: 2.0,
            max_steps: 2000,
            dt: 0.05,
            plant_substep: 0.01,
            initial_speed: 2.0,
            initial_jitter: [0.1, 0.1],
            estimate_std: vec![0.0; n],
            log_trajectory: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::ConfigInvalid(m));
        self.vehicle
            .validate()
            .map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        self.controller.validate()?;
        self.cost.validate()?;
        if self.runs < 1 {
            return bad("runs must be >= 1".into());
        }
        if self.laps < 1 {
            return bad("laps must be >= 1".into());
        }
        if !(self.collision_threshold > 0.0 && self.collision_threshold < self.crash_threshold) {
            return bad(format!(
                "collision threshold {} must be positive and below the crash threshold {}",
                self.collision_threshold, self.crash_threshold
            ));
        }
        if !self.crash_threshold.is_finite() {
            return bad("crash threshold must be finite".into());
        }
        if self.max_steps < 1 {
            return bad("max_steps must be >= 1".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be > 0, got {}", self.dt));
        }
        if !(self.plant_substep > 0.0 && self.plant_substep <= self.dt) {
            return bad(format!(
                "plant_substep must lie in (0, dt], got {}",
                self.plant_substep
            ));
        }
        if !self.initial_speed.is_finite()
            || self
                .initial_jitter
                .iter()
                .any(|s| !(*s >= 0.0 && s.is_finite()))
        {
            return bad("initial speed and jitter must be finite, jitter >= 0".into());
        }
        if self.estimate_std.len() != self.controller.cov_subset.len() {
            return bad(format!(
                "estimate_std has {} entries, the covariance subset tracks {}",
                self.estimate_std.len(),
                self.controller.cov_subset.len()
            ));
        }
        if self
            .estimate_std
            .iter()
            .any(|s| !(*s >= 0.0 && s.is_finite()))
        {
            return bad("estimate_std entries must be >= 0".into());
        }
        Ok(())
    }

    /// Vehicle parameters used inside controller rollouts (Euler, one step per control period).
    pub fn rollout_params(&self) -> VehicleParams {
        self.vehicle.with_integration(Integration::rollout(self.dt))
    }

    /// Vehicle parameters of the simulated plant (RK4 substeps).
    pub fn plant_params(&self) -> VehicleParams {
        let substeps = (self.dt / self.plant_substep).round().max(1.0) as usize;
        self.vehicle.with_integration(Integration {
            substeps,
            ..Integration::plant(self.dt)
        })
    }

    fn estimate_cov(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            self.estimate_std.len(),
            self.estimate_std.iter().map(|s| s * s),
        ))
    }

    pub fn build_controller(&self, seed: u64) -> Result<Controller, SimError> {
        let model = VehicleModel::new(
            self.rollout_params(),
            self.track.clone(),
            self.noise.clone(),
        );
        Ok(Controller::new(
            self.controller.clone(),
            self.cost.clone(),
            model,
            seed,
        )?)
    }
}

/// One logged control step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub state: VehicleState,
    pub control: ControlInput,
    /// Barrier value of the realized belief.
    pub h: f64,
    /// `h_t - (1 - beta) h_{t-1}`; NaN at t = 0.
    pub residual: f64,
    pub sigma_y: f64,
}

pub const TRAJECTORY_HEADER: &str = "t,s,e_Y,e_psi,vX,vY,psi_dot,delta,T,h,residual,sigma_y";

/// Writes rows as CSV with [`TRAJECTORY_HEADER`].
pub fn write_trajectory_csv<W: Write>(rows: &[LogRow], mut out: W) -> io::Result<()> {
    writeln!(out, "{TRAJECTORY_HEADER}")?;
    for r in rows {
        let x = &r.state;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.t,
            x.progress,
            x.lateral_error,
            x.heading_error,
            x.vx,
            x.vy,
            x.yaw_rate,
            r.control.steer,
            r.control.throttle,
            r.h,
            r.residual,
            r.sigma_y
        )?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Termination {
    LapComplete,
    Crash,
    StepBudget,
}

/// Wall-clock statistics of `control_step` calls (s).
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ComputeStats {
    pub calls: usize,
    pub mean: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub termination: Termination,
    pub crashed: bool,
    pub collisions: usize,
    /// Control steps executed.
    pub steps: usize,
    /// Time to complete the laps (s), if completed.
    pub lap_time: Option<f64>,
    pub mean_speed: f64,
    pub satisfaction_rate: f64,
    pub compute: ComputeStats,
    pub trajectory: Option<Vec<LogRow>>,
}

/// Number of maximal runs of consecutive `true` values.
pub fn count_intervals<I: IntoIterator<Item = bool>>(flags: I) -> usize {
    let mut count = 0;
    let mut inside = false;
    for f in flags {
        if f && !inside {
            count += 1;
        }
        inside = f;
    }
    count
}

fn initial_state(config: &ExperimentConfig, run_seed: u64) -> VehicleState {
    let mut rng = substream(run_seed, &[domain::INITIAL_CONDITION]);
    let dv: f64 = rng.sample(StandardNormal);
    let dy: f64 = rng.sample(StandardNormal);
    let speed = config.initial_speed + config.initial_jitter[0] * dv;
    VehicleState {
        lateral_error: config.initial_jitter[1] * dy,
        ..VehicleState::rolling(speed, 0.0, &config.vehicle)
    }
}

/// One closed-loop run from the seeded initial condition.
pub fn run_closed_loop(config: &ExperimentConfig, run_seed: u64) -> Result<RunRecord, SimError> {
    run_closed_loop_with(config, run_seed, |_, _| {})
}

/// [`run_closed_loop`] with a hook that may edit the plant state at the
/// start of every control step, before the crash check.
pub fn run_closed_loop_with<F>(
    config: &ExperimentConfig,
    run_seed: u64,
    mut hook: F,
) -> Result<RunRecord, SimError>
where
    F: FnMut(usize, &mut VehicleState),
{
    config.validate()?;
    let track = &config.track;
    let plant = config.plant_params();
    let mut controller =
        config.build_controller(derive_key(run_seed, &[domain::CONTROLLER_SEED]))?;
    let mut noise_rng = substream(run_seed, &[domain::PLANT_NOISE]);
    let barrier = config.cost.barrier();
    let beta = config.cost.safety.cbf_rate;
    let est_cov = config.estimate_cov();
    let subset = config.controller.cov_subset.clone();
    let target = config.laps as f64 * track.length();

    let mut x = initial_state(config, run_seed);
    let mut progress = 0.0;
    let mut over_collision = Vec::new();
    let mut speed_sum = 0.0;
    let mut h_prev: Option<f64> = None;
    let mut satisfied = 0usize;
    let mut checked = 0usize;
    let mut times = Vec::new();
    let mut log = config.log_trajectory.then(Vec::new);
    let mut termination = Termination::StepBudget;
    let mut steps = 0;

    for t in 0..config.max_steps {
        hook(t, &mut x);
        over_collision.push(x.lateral_error.abs() > config.collision_threshold);
        if x.lateral_error.abs() > config.crash_threshold || !x.is_finite() {
            termination = Termination::Crash;
            break;
        }
        if progress >= target {
            termination = Termination::LapComplete;
            break;
        }
        speed_sum += x.vx;

        let belief = BeliefState::from_vehicle(&x, est_cov.clone(), subset.clone())
            .map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        let sigma_y = lateral_std(&belief).unwrap_or(0.0);
        let h = barrier.value(x.lateral_error, sigma_y);
        let res = match h_prev {
            Some(hp) => {
                let r = residual(h, hp, beta);
                checked += 1;
                if r >= 0.0 {
                    satisfied += 1;
                }
                r
            }
            None => f64::NAN,
        };
        h_prev = Some(h);

        let started = Instant::now();
        let outcome = controller.control_step(&belief)?;
        times.push(started.elapsed().as_secs_f64());
        let u = outcome.control;

        if let Some(rows) = log.as_mut() {
            rows.push(LogRow {
                t: t as f64 * config.dt,
                state: x,
                control: u,
                h,
                residual: res,
                sigma_y,
            });
        }

        let w = config.noise.sample(&mut noise_rng);
        steps = t + 1;
        let s_before = x.progress;
        match step(&x, &u, &w, &plant, track) {
            Ok(next) => {
                let mut ds = next.progress - s_before;
                let l = track.length();
                if track.is_closed() {
                    ds -= l * (ds / l).round();
                }
                progress += ds;
                x = next;
            }
            Err(_) => {
                // Leaving the curvilinear frame means leaving the track.
                over_collision.push(true);
                termination = Termination::Crash;
                break;
            }
        }
        if steps == config.max_steps {
            if x.lateral_error.abs() > config.crash_threshold {
                over_collision.push(true);
                termination = Termination::Crash;
            } else if progress >= target {
                termination = Termination::LapComplete;
            }
        }
    }

    let n = times.len();
    let compute = ComputeStats {
        calls: n,
        mean: if n > 0 {
            times.iter().sum::<f64>() / n as f64
        } else {
            0.0
        },
        max: times.iter().copied().fold(0.0, f64::max),
    };
    Ok(RunRecord {
        seed: run_seed,
        termination,
        crashed: termination == Termination::Crash,
        collisions: count_intervals(over_collision),
        steps,
        lap_time: (termination == Termination::LapComplete).then_some(steps as f64 * config.dt),
        mean_speed: if steps > 0 {
            speed_sum / steps as f64
        } else {
            0.0
        },
        satisfaction_rate: if checked > 0 {
            satisfied as f64 / checked as f64
        } else {
            1.0
        },
        compute,
        trajectory: log,
    })
}

/// Batch statistics over independent runs.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateReport {
    pub runs: usize,
    pub crash_ratio: f64,
    /// Binomial 1-sigma half width.
    pub crash_ci: f64,
    /// Mean collisions per run (may exceed 1).
    pub collision_ratio: f64,
    /// Normal-approximation 1-sigma half width.
    pub collision_ci: f64,
    pub satisfaction_rate: f64,
    pub completed: usize,
    /// Mean lap time over completed runs (s); NaN if none completed.
    pub mean_lap_time: f64,
    pub mean_speed: f64,
    /// Control rate from the mean `control_step` wall time (Hz).
    pub mean_hz: f64,
}

impl AggregateReport {
    pub fn from_runs(records: &[RunRecord]) -> Self {
        let r = records.len();
        let rf = r as f64;
        let crashes = records.iter().filter(|x| x.crashed).count() as f64;
        let p = crashes / rf;
        let cols: Vec<f64> = records.iter().map(|x| x.collisions as f64).collect();
        let mean_c = cols.iter().sum::<f64>() / rf;
        let var_c = if r > 1 {
            cols.iter().map(|c| (c - mean_c).powi(2)).sum::<f64>() / (rf - 1.0)
        } else {
            0.0
        };
        let laps: Vec<f64> = records.iter().filter_map(|x| x.lap_time).collect();
        let calls: usize = records.iter().map(|x| x.compute.calls).sum();
        let time: f64 = records
            .iter()
            .map(|x| x.compute.mean * x.compute.calls as f64)
            .sum();
        AggregateReport {
            runs: r,
            crash_ratio: p,
            crash_ci: (p * (1.0 - p) / rf).sqrt(),
            collision_ratio: mean_c,
            collision_ci: (var_c / rf).sqrt(),
            satisfaction_rate: records.iter().map(|x| x.satisfaction_rate).sum::<f64>() / rf,
            completed: laps.len(),
            mean_lap_time: if laps.is_empty() {
                f64::NAN
            } else {
                laps.iter().sum::<f64>() / laps.len() as f64
            },
            mean_speed: records.iter().map(|x| x.mean_speed).sum::<f64>() / rf,
            mean_hz: if time > 0.0 {
                calls as f64 / time
            } else {
                f64::NAN
            },
        }
    }
}

/// Seed of run `r` under a master seed.
pub fn run_seed(master: u64, r: usize) -> u64 {
    derive_key(master, &[domain::RUN_SEED, r as u64])
}

/// `config.runs` independent runs (in parallel) and their aggregate.
pub fn monte_carlo(
    config: &ExperimentConfig,
) -> Result<(AggregateReport, Vec<RunRecord>), SimError> {
    config.validate()?;
    let records = (0..config.runs)
        .into_par_iter()
        .map(|r| run_closed_loop(config, run_seed(config.seed, r)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((AggregateReport::from_runs(&records), records))
}

/// Parameters addressable by name in sweeps and overrides.
pub const SWEEP_KEYS: &[&str] = &[
    "q_vx", "q_vy", "q_yaw", "q_epsi", "q_ey", "v_g", "C_obs", "C", "beta", "nu", "M", "N", "K",
    "lambda", "gamma",
];

/// Sets one named numeric parameter.
pub fn set_parameter(config: &mut ExperimentConfig, key: &str, value: f64) -> Result<(), SimError> {
    let count = |v: f64| -> Result<usize, SimError> {
        if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
            Ok(v as usize)
        } else {
            Err(SimError::ConfigInvalid(format!(
                "{key} must be a non-negative integer, got {v}"
            )))
        }
    };
    let c = &mut config.cost;
    match key {
        "q_vx" => c.weights[idx::VX] = value,
        "q_vy" => c.weights[idx::VY] = value,
        "q_yaw" => c.weights[idx::YAW_RATE] = value,
        "q_epsi" => c.weights[idx::HEADING_ERROR] = value,
        "q_ey" => c.weights[idx::LATERAL_ERROR] = value,
        "v_g" => c.target[idx::VX] = value,
        "C_obs" => c.collision_penalty = value,
        "C" => c.safety.weight = value,
        "beta" => c.safety.cbf_rate = value,
        "nu" => c.backoff = value,
        "M" => config.controller.samples = count(value)?,
        "N" => config.controller.inner_samples = count(value)?,
        "K" => config.controller.horizon = count(value)?,
        "lambda" => config.controller.temperature = value,
        "gamma" => config.controller.control_cost = value,
        other => {
            return Err(SimError::ConfigInvalid(format!(
                "unknown sweep parameter '{other}' (known: {})",
                SWEEP_KEYS.join(", ")
            )))
        }
    }
    Ok(())
}

/// A named list of values to sweep over.
#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub name: String,
    pub values: Vec<f64>,
}

/// Cartesian product of the axes, first axis varying slowest.
pub fn grid(axes: &[Axis]) -> Vec<Vec<(String, f64)>> {
    let mut points: Vec<Vec<(String, f64)>> = vec![Vec::new()];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push((axis.name.clone(), v));
                    q
                })
            })
            .collect();
    }
    points
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub point: Vec<(String, f64)>,
    pub report: AggregateReport,
}

/// One Monte-Carlo batch per grid point, all with the same run seeds.
pub fn sweep(config: &ExperimentConfig, axes: &[Axis]) -> Result<Vec<SweepPoint>, SimError> {
    if axes.is_empty() || axes.iter().any(|a| a.values.is_empty()) {
        return Err(SimError::ConfigInvalid("sweep axis is empty".into()));
    }
    grid(axes)
        .into_iter()
        .map(|point| {
            let mut c = config.clone();
            for (k, v) in &point {
                set_parameter(&mut c, k, *v)?;
            }
            let (report, _) = monte_carlo(&c)?;
            Ok(SweepPoint { point, report })
        })
        .collect()
}

/// Convenience for building a config for another controller kind while
/// keeping everything else (including seeds) fixed.
pub fn with_controller(
    config: &ExperimentConfig,
    kind: ControllerKind,
    samples: usize,
) -> ExperimentConfig {
    let mut c = config.clone();
    c.controller.kind = kind;
    c.controller.samples = samples;
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.controller.kind = ControllerKind::Mppi;
        c.controller.samples = 16;
        c.controller.horizon = 5;
        c.runs = 4;
        c.max_steps = 30;
        c
    }

    #[test]
    fn interval_counting() {
        let e = [0.0, 1.9, 1.95, 1.0, -1.85, 0.5];
        assert_eq!(count_intervals(e.iter().map(|v: &f64| v.abs() > 1.8)), 2);
        assert_eq!(count_intervals([true, true, true]), 1);
        assert_eq!(count_intervals(Vec::<bool>::new()), 0);
    }

    #[test]
    fn forced_excursion_crashes() {
        let c = quick();
        let rec = run_closed_loop_with(&c, 7, |t, x| {
            if t == 10 {
                x.lateral_error = 2.1;
            }
        })
        .unwrap();
        assert!(rec.crashed);
        assert_eq!(rec.steps, 10);
    }

    #[test]
    fn aggregate_arithmetic() {
        let mk = |crashed, collisions| RunRecord {
            seed: 0,
            termination: if crashed {
                Termination::Crash
            } else {
                Termination::LapComplete
            },
            crashed,
            collisions,
            steps: 1,
            lap_time: (!crashed).then_some(1.0),
            mean_speed: 1.0,
            satisfaction_rate: 1.0,
            compute: ComputeStats::default(),
            trajectory: None,
        };
        let r =
            AggregateReport::from_runs(&[mk(true, 1), mk(false, 0), mk(false, 2), mk(false, 0)]);
        assert_eq!(r.crash_ratio, 0.25);
        assert_eq!(r.collision_ratio, 0.75);
        assert!((r.crash_ci - (0.25f64 * 0.75 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn repeated_batches_agree() {
        let c = quick();
        let (a, ra) = monte_carlo(&c).unwrap();
        let (b, rb) = monte_carlo(&c).unwrap();
        assert_eq!(a.crash_ratio, b.crash_ratio);
        for (x, y) in ra.iter().zip(&rb) {
            assert_eq!(
                (x.steps, x.collisions, x.mean_speed.to_bits()),
                (y.steps, y.collisions, y.mean_speed.to_bits())
            );
        }
    }

    #[test]
    fn grid_shape() {
        let axes = [
            Axis {
                name: "M".into(),
                values: vec![128.0, 256.0, 384.0, 512.0],
            },
            Axis {
                name: "N".into(),
                values: vec![4.0, 8.0, 12.0, 16.0],
            },
        ];
        let g = grid(&axes);
        assert_eq!(g.len(), 16);
        assert_eq!(g[1], vec![("M".to_string(), 128.0), ("N".to_string(), 8.0)]);
    }

    #[test]
    fn parameter_names() {
        let mut c = quick();
        set_parameter(&mut c, "q_ey", 40.0).unwrap();
        assert_eq!(c.cost.weights[idx::LATERAL_ERROR], 40.0);
        assert!(set_parameter(&mut c, "M", 1.5).is_err());
        assert!(set_parameter(&mut c, "bogus", 1.0).is_err());
    }
}
