//! Command-line front end: TOML experiment files, `run` / `batch` / `sweep`
//! subcommands and CSV reports.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::CovSubset;
pub use crate::constraints::DEFAULT_P_FAIL;
use crate::constraints::{allocate_budget, BackoffMode, DcbfForm, SafetyParams};
use crate::controllers::{ControllerKind, CostSpec, MppiConfig};
use crate::dynamics::{
    idx, make_test_track, stadium, ControlBounds, NoiseModel, TireParams, Track, VehicleParams,
    GRAVITY, STATE_DIM,
};
use crate::sim::{
    monte_carlo, run_closed_loop, run_seed, set_parameter, sweep, write_trajectory_csv,
    AggregateReport, Axis, ExperimentConfig, RunRecord, Termination, DEFAULT_NOISE_STD,
};

/// Environment variable that takes precedence over `--out`.
pub const OUT_ENV: &str = "BELIEF_MPPI_OUT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn config_err<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Config(msg.into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleSection {
    pub mass: f64,
    pub yaw_inertia: f64,
    pub lf: f64,
    pub lr: f64,
    pub wheel_radius: f64,
    pub wheel_inertia: f64,
    /// Peak friction coefficient; each axle's peak force is `mu m g / 2`.
    pub mu: f64,
    pub tire_stiffness: f64,
    pub tire_shape: f64,
    pub drive_gain: f64,
    pub rolling_resistance: f64,
    pub min_slip_speed: f64,
}

impl Default for VehicleSection {
    fn default() -> Self {
        let p = VehicleParams::default();
        VehicleSection {
            mass: p.mass,
            yaw_inertia: p.yaw_inertia,
            lf: p.lf,
            lr: p.lr,
            wheel_radius: p.wheel_radius,
            wheel_inertia: p.wheel_inertia,
            mu: 2.0 * p.front_tire.peak / (p.mass * GRAVITY),
            tire_stiffness: p.front_tire.stiffness,
            tire_shape: p.front_tire.shape,
            drive_gain: p.drive_gain,
            rolling_resistance: p.rolling_resistance,
            min_slip_speed: p.min_slip_speed,
        }
    }
}

impl VehicleSection {
    pub fn params(&self) -> VehicleParams {
        let peak = self.mu * self.mass * GRAVITY / 2.0;
        let tire = TireParams {
            stiffness: self.tire_stiffness,
            shape: self.tire_shape,
            ..TireParams::with_peak(peak)
        };
        VehicleParams {
            mass: self.mass,
            yaw_inertia: self.yaw_inertia,
            lf: self.lf,
            lr: self.lr,
            wheel_radius: self.wheel_radius,
            wheel_inertia: self.wheel_inertia,
            front_tire: tire,
            rear_tire: tire,
            drive_gain: self.drive_gain,
            rolling_resistance: self.rolling_resistance,
            min_slip_speed: self.min_slip_speed,
            ..VehicleParams::default()
        }
    }
}

/// Track geometry: a file, explicit `(length, curvature)` segments, or the
/// default stadium.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackSection {
    pub half_width: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<[f64; 2]>>,
    pub straight: f64,
    pub radius: f64,
}

impl Default for TrackSection {
    fn default() -> Self {
        TrackSection {
            half_width: 2.0,
            file: None,
            segments: None,
            straight: 20.0,
            radius: 6.0,
        }
    }
}

impl TrackSection {
    /// Relative file paths resolve against `base`.
    pub fn build(&self, base: &Path) -> Result<Track, CliError> {
        if let Some(file) = &self.file {
            let path = if file.is_absolute() {
                file.clone()
            } else {
                base.join(file)
            };
            if !path.exists() {
                return config_err(format!("track.file: {} does not exist", path.display()));
            }
            let track =
                Track::load(&path).map_err(|e| CliError::Config(format!("track.file: {e}")))?;
            if track.half_width() != self.half_width {
                return config_err(format!(
                    "track.half_width = {} disagrees with {} in {}",
                    self.half_width,
                    track.half_width(),
                    path.display()
                ));
            }
            return Ok(track);
        }
        let built = match &self.segments {
            Some(segs) => make_test_track(
                &segs.iter().map(|s| (s[0], s[1])).collect::<Vec<_>>(),
                self.half_width,
            ),
            None => stadium(self.straight, self.radius, self.half_width),
        };
        built.map_err(|e| CliError::Config(format!("track: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    /// Per-control-step std on (vX, vY, yaw rate).
    pub std: [f64; 3],
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            std: DEFAULT_NOISE_STD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSection {
    pub kind: ControllerKind,
    #[serde(rename = "M")]
    pub samples: usize,
    #[serde(rename = "N")]
    pub inner_samples: usize,
    #[serde(rename = "K")]
    pub horizon: usize,
    pub lambda: f64,
    pub gamma: f64,
    /// Std of the (steer, throttle) perturbations.
    pub sampling_std: [f64; 2],
    pub steer_max: f64,
    pub throttle_min: f64,
    pub throttle_max: f64,
    /// State indices whose covariance is propagated.
    pub cov_subset: Vec<usize>,
}

impl Default for ControllerSection {
    fn default() -> Self {
        let c = MppiConfig::default();
        ControllerSection {
            kind: c.kind,
            samples: c.samples,
            inner_samples: c.inner_samples,
            horizon: c.horizon,
            lambda: c.temperature,
            gamma: c.control_cost,
            sampling_std: [c.sampling_cov[(0, 0)].sqrt(), c.sampling_cov[(1, 1)].sqrt()],
            steer_max: c.bounds.steer_max,
            throttle_min: c.bounds.throttle_min,
            throttle_max: c.bounds.throttle_max,
            cov_subset: c.cov_subset.indices().to_vec(),
        }
    }
}

impl ControllerSection {
    pub fn config(&self) -> Result<MppiConfig, CliError> {
        let cov_subset = CovSubset::new(self.cov_subset.clone(), STATE_DIM)
            .map_err(|e| CliError::Config(format!("controller.cov_subset: {e}")))?;
        let s = self.sampling_std;
        if s.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return config_err(format!("controller.sampling_std must be >= 0, got {s:?}"));
        }
        Ok(MppiConfig {
            kind: self.kind,
            samples: self.samples,
            horizon: self.horizon,
            temperature: self.lambda,
            control_cost: self.gamma,
            sampling_cov: Matrix2::from_diagonal(&Vector2::new(s[0] * s[0], s[1] * s[1])),
            bounds: ControlBounds {
                steer_max: self.steer_max,
                throttle_min: self.throttle_min,
                throttle_max: self.throttle_max,
            },
            inner_samples: self.inner_samples,
            cov_subset,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostsSection {
    pub q_vx: f64,
    pub q_vy: f64,
    pub q_yaw: f64,
    pub q_epsi: f64,
    pub q_ey: f64,
    pub v_g: f64,
    #[serde(rename = "C_obs")]
    pub collision_penalty: f64,
    /// Safety-violation penalty weight.
    #[serde(rename = "C")]
    pub safety_weight: f64,
    pub beta: f64,
    pub p_fail: f64,
    pub backoff_mode: BackoffMode,
    pub dcbf: DcbfForm,
    pub terminal_scale: f64,
}

impl Default for CostsSection {
    fn default() -> Self {
        let c = CostSpec::default();
        CostsSection {
            q_vx: c.weights[idx::VX],
            q_vy: c.weights[idx::VY],
            q_yaw: c.weights[idx::YAW_RATE],
            q_epsi: c.weights[idx::HEADING_ERROR],
            q_ey: c.weights[idx::LATERAL_ERROR],
            v_g: c.target_speed(),
            collision_penalty: c.collision_penalty,
            safety_weight: c.safety.weight,
            beta: c.safety.cbf_rate,
            p_fail: DEFAULT_P_FAIL,
            backoff_mode: BackoffMode::Gaussian,
            dcbf: c.dcbf_form,
            terminal_scale: c.terminal_scale,
        }
    }
}

impl CostsSection {
    /// Back-off multiplier: the budget is split evenly over the two track
    /// boundaries.
    pub fn backoff(&self) -> Result<f64, CliError> {
        let eps = allocate_budget(self.p_fail, 2)
            .map_err(|e| CliError::Config(format!("costs.p_fail: {e}")))?[0];
        self.backoff_mode
            .coefficient(eps)
            .map_err(|e| CliError::Config(format!("costs.p_fail: {e}")))
    }

    pub fn spec(&self, half_width: f64) -> Result<CostSpec, CliError> {
        let mut weights = [0.0; STATE_DIM];
        weights[idx::VX] = self.q_vx;
        weights[idx::VY] = self.q_vy;
        weights[idx::YAW_RATE] = self.q_yaw;
        weights[idx::HEADING_ERROR] = self.q_epsi;
        weights[idx::LATERAL_ERROR] = self.q_ey;
        let mut target = [0.0; STATE_DIM];
        target[idx::VX] = self.v_g;
        Ok(CostSpec {
            weights,
            target,
            collision_penalty: self.collision_penalty,
            half_width,
            terminal_scale: self.terminal_scale,
            safety: SafetyParams {
                cbf_rate: self.beta,
                weight: self.safety_weight,
            },
            backoff: self.backoff()?,
            dcbf_form: self.dcbf,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub runs: usize,
    pub seed: u64,
    pub laps: usize,
    pub collision_threshold: f64,
    pub crash_threshold: f64,
    pub max_steps: usize,
    pub dt: f64,
    pub plant_substep: f64,
    pub initial_speed: f64,
    pub initial_jitter: [f64; 2],
    pub estimate_std: Vec<f64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        ExperimentSection {
            runs: e.runs,
            seed: e.seed,
            laps: e.laps,
            collision_threshold: e.collision_threshold,
            crash_threshold: e.crash_threshold,
            max_steps: e.max_steps,
            dt: e.dt,
            plant_substep: e.plant_substep,
            initial_speed: e.initial_speed,
            initial_jitter: e.initial_jitter,
            estimate_std: e.estimate_std,
        }
    }
}

/// An extra controller row for `batch` and `sweep`: a kind plus optional
/// sample counts and dotted-key overrides applied on top of the base file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub kind: ControllerKind,
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(rename = "N", default, skip_serializing_if = "Option::is_none")]
    pub inner_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub set: Vec<String>,
}

impl Variant {
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.to_string())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub vehicle: VehicleSection,
    pub track: TrackSection,
    pub noise: NoiseSection,
    pub controller: ControllerSection,
    pub costs: CostsSection,
    pub experiment: ExperimentSection,
    #[serde(rename = "variant", skip_serializing_if = "Vec::is_empty")]
    pub variants: Vec<Variant>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn dump(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Applies a `section.key=value` override. The value is read as a TOML
    /// literal, falling back to a plain string.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), CliError> {
        let (path, raw) = spec.split_once('=').ok_or_else(|| {
            CliError::Config(format!(
                "override '{spec}' is not of the form section.key=value"
            ))
        })?;
        let path = path.trim();
        let raw = raw.trim();
        let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut doc = toml::Value::try_from(&*self).map_err(|e| CliError::Config(e.to_string()))?;
        let keys: Vec<&str> = path.split('.').collect();
        if keys.len() != 2 {
            return config_err(format!("override key '{path}' must be section.key"));
        }
        let section = doc
            .get_mut(keys[0])
            .and_then(|v| v.as_table_mut())
            .ok_or_else(|| CliError::Config(format!("unknown config section '{}'", keys[0])))?;
        section.insert(keys[1].to_string(), value);
        let updated: ConfigFile = doc
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("override '{spec}': {e}")))?;
        *self = updated;
        Ok(())
    }

    /// Resolves into a validated experiment; `base` anchors relative paths.
    pub fn experiment(&self, base: &Path) -> Result<ExperimentConfig, CliError> {
        let track = self.track.build(base)?;
        let vehicle = self.vehicle.params();
        let noise = NoiseModel::velocity(self.noise.std);
        if self.noise.std.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return config_err(format!("noise.std must be >= 0, got {:?}", self.noise.std));
        }
        let e = &self.experiment;
        let config = ExperimentConfig {
            vehicle,
            track: Arc::new(track),
            noise,
            controller: self.controller.config()?,
            cost: self.costs.spec(self.track.half_width)?,
            runs: e.runs,
            seed: e.seed,
            laps: e.laps,
            collision_threshold: e.collision_threshold,
            crash_threshold: e.crash_threshold,
            max_steps: e.max_steps,
            dt: e.dt,
            plant_substep: e.plant_substep,
            initial_speed: e.initial_speed,
            initial_jitter: e.initial_jitter,
            estimate_std: e.estimate_std.clone(),
            log_trajectory: false,
        };
        config
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(config)
    }

    /// Base configuration with `variant` applied.
    pub fn with_variant(&self, variant: &Variant) -> Result<ConfigFile, CliError> {
        let mut c = self.clone();
        c.variants.clear();
        c.controller.kind = variant.kind;
        if let Some(m) = variant.samples {
            c.controller.samples = m;
        }
        if let Some(n) = variant.inner_samples {
            c.controller.inner_samples = n;
        }
        for s in &variant.set {
            c.apply_override(s)?;
        }
        Ok(c)
    }

    /// `(label, configuration)` rows: one per variant, or the base alone.
    pub fn rows(&self) -> Result<Vec<(String, ConfigFile)>, CliError> {
        if self.variants.is_empty() {
            return Ok(vec![(self.controller.kind.to_string(), self.clone())]);
        }
        self.variants
            .iter()
            .map(|v| Ok((v.label(), self.with_variant(v)?)))
            .collect()
    }
}

/// Parses `name=v1,v2,...` or `name=start:stop:step` (inclusive stop).
pub fn parse_axis(spec: &str) -> Result<Axis, CliError> {
    let (name, values) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("axis '{spec}' is not of the form name=values")))?;
    let name = name.trim();
    if name.is_empty() {
        return config_err(format!("axis '{spec}' has no name"));
    }
    let num = |s: &str| -> Result<f64, CliError> {
        s.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| CliError::Config(format!("axis '{name}': '{s}' is not a number")))
    };
    let values = values.trim();
    let parts: Vec<&str> = values.split(':').collect();
    let list = if parts.len() == 3 {
        let (start, stop, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if !(step > 0.0) || stop < start {
            return config_err(format!(
                "axis '{name}': range needs start <= stop and step > 0"
            ));
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        (0..count).map(|i| start + i as f64 * step).collect()
    } else if values.is_empty() {
        Vec::new()
    } else {
        values.split(',').map(num).collect::<Result<Vec<_>, _>>()?
    };
    if list.is_empty() {
        return config_err(format!("axis '{name}' has no values"));
    }
    Ok(Axis {
        name: name.to_string(),
        values: list,
    })
}

/// Whitespace-separated axes, e.g. `"M=128:512:128 N=4:16:4"`.
pub fn parse_axes(specs: &[String]) -> Result<Vec<Axis>, CliError> {
    let axes: Vec<Axis> = specs
        .iter()
        .flat_map(|s| s.split_whitespace())
        .map(parse_axis)
        .collect::<Result<_, _>>()?;
    if axes.is_empty() {
        return config_err("sweep axis is empty");
    }
    Ok(axes)
}

pub const AGGREGATE_HEADER: &str =
    "controller,runs,crash_ratio,crash_ci,collision_ratio,collision_ci,satisfaction_rate,completed,mean_lap_time,mean_speed";
pub const RUNS_HEADER: &str = "controller,run,seed,termination,crashed,collisions,steps,lap_time,mean_speed,satisfaction_rate";

fn termination_name(t: Termination) -> &'static str {
    match t {
        Termination::LapComplete => "lap",
        Termination::Crash => "crash",
        Termination::StepBudget => "timeout",
    }
}

fn aggregate_row(label: &str, r: &AggregateReport) -> String {
    format!(
        "{label},{},{},{},{},{},{},{},{},{}",
        r.runs,
        r.crash_ratio,
        r.crash_ci,
        r.collision_ratio,
        r.collision_ci,
        r.satisfaction_rate,
        r.completed,
        r.mean_lap_time,
        r.mean_speed
    )
}

fn run_row(label: &str, i: usize, r: &RunRecord) -> String {
    format!(
        "{label},{i},{},{},{},{},{},{},{},{}",
        r.seed,
        termination_name(r.termination),
        r.crashed as u8,
        r.collisions,
        r.steps,
        r.lap_time.unwrap_or(f64::NAN),
        r.mean_speed,
        r.satisfaction_rate
    )
}

/// Plain-text table with crash ratio, collision ratio and control rate.
pub fn summary_table(rows: &[(String, AggregateReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>5} {:>12} {:>10} {:>14} {:>10} {:>10} {:>9}",
        "controller",
        "runs",
        "crash_ratio",
        "crash_ci",
        "collision_ratio",
        "coll_ci",
        "sat_rate",
        "hz"
    );
    for (label, r) in rows {
        let _ = writeln!(
            out,
            "{:<12} {:>5} {:>12} {:>10.4} {:>14} {:>10.4} {:>10.4} {:>9.1}",
            label,
            r.runs,
            r.crash_ratio,
            r.crash_ci,
            r.collision_ratio,
            r.collision_ci,
            r.satisfaction_rate,
            r.mean_hz
        );
    }
    out
}

#[derive(Parser, Debug)]
#[command(
    name = "belief-mppi",
    version,
    about = "Sampling-based stochastic MPC experiments on a simulated race car"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// One closed-loop lap with a full trajectory log.
    Run(CommonArgs),
    /// Monte-Carlo batch for each configured controller.
    Batch(CommonArgs),
    /// Monte-Carlo batches over a parameter grid.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Axis such as "q_ey=0.1,1,10,40" or "M=128:512:128 N=4:16:4"; repeatable.
        #[arg(long = "axis", required = true)]
        axis: Vec<String>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding experiment.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for rollouts and runs.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory; BELIEF_MPPI_OUT takes precedence.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override "section.key=value"; repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
    /// Controller kind: mppi, smppi or bss.
    #[arg(long)]
    pub controller: Option<String>,
    /// Number of sampled control sequences.
    #[arg(long = "M")]
    pub samples: Option<usize>,
    /// Belief propagation samples.
    #[arg(long = "N")]
    pub inner_samples: Option<usize>,
}

impl CommonArgs {
    /// Loads the file and applies overrides in order: `--set`, then the
    /// dedicated flags.
    pub fn load(&self) -> Result<(ConfigFile, PathBuf), CliError> {
        let (mut cfg, base) = match &self.config {
            Some(p) => {
                if !p.exists() {
                    return config_err(format!("config file {} does not exist", p.display()));
                }
                (
                    ConfigFile::load(p)?,
                    p.parent().map(Path::to_path_buf).unwrap_or_default(),
                )
            }
            None => (ConfigFile::default(), PathBuf::from(".")),
        };
        for s in &self.set {
            cfg.apply_override(s)?;
        }
        if let Some(kind) = &self.controller {
            cfg.controller.kind = kind.parse().map_err(CliError::Config)?;
        }
        if let Some(m) = self.samples {
            cfg.controller.samples = m;
        }
        if let Some(n) = self.inner_samples {
            cfg.controller.inner_samples = n;
        }
        if let Some(seed) = self.seed {
            cfg.experiment.seed = seed;
        }
        if self.controller.is_some() || self.samples.is_some() || self.inner_samples.is_some() {
            // Explicit controller flags select a single row.
            cfg.variants.clear();
        }
        Ok((cfg, base))
    }

    pub fn out_dir(&self) -> PathBuf {
        std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .or_else(|| self.out.clone())
            .unwrap_or_else(|| PathBuf::from("results"))
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| CliError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn install_workers(workers: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = workers {
        if n == 0 {
            return config_err("--workers must be >= 1");
        }
        // Fails only if a pool already exists (repeated in-process calls); the
        // results do not depend on the worker count, so that is harmless.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

fn cmd_run(args: &CommonArgs) -> Result<i32, CliError> {
    let (cfg, base) = args.load()?;
    let mut exp = cfg.experiment(&base)?;
    exp.log_trajectory = true;
    let seed = run_seed(exp.seed, 0);
    let record = run_closed_loop(&exp, seed).map_err(|e| CliError::Config(e.to_string()))?;
    let out = args.out_dir();
    let mut csv = Vec::new();
    write_trajectory_csv(record.trajectory.as_deref().unwrap_or(&[]), &mut csv)
        .expect("in-memory write");
    write_file(
        &out.join("trajectory.csv"),
        &String::from_utf8(csv).expect("ascii csv"),
    )?;
    let mut summary = String::new();
    let _ = writeln!(
        summary,
        "controller {} M {} N {} K {}",
        exp.controller.kind,
        exp.controller.samples,
        exp.controller.inner_samples,
        exp.controller.horizon
    );
    let _ = writeln!(summary, "seed {seed}");
    let _ = writeln!(
        summary,
        "termination {}",
        termination_name(record.termination)
    );
    let _ = writeln!(summary, "steps {}", record.steps);
    let _ = writeln!(summary, "collisions {}", record.collisions);
    let _ = writeln!(summary, "lap_time {}", record.lap_time.unwrap_or(f64::NAN));
    let _ = writeln!(summary, "mean_speed {}", record.mean_speed);
    let _ = writeln!(summary, "satisfaction_rate {}", record.satisfaction_rate);
    let _ = writeln!(
        summary,
        "hz {:.1}",
        1.0 / record.compute.mean.max(f64::MIN_POSITIVE)
    );
    write_file(&out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(match record.termination {
        Termination::LapComplete => 0,
        Termination::Crash => 2,
        Termination::StepBudget => 3,
    })
}

fn cmd_batch(args: &CommonArgs) -> Result<i32, CliError> {
    let (cfg, base) = args.load()?;
    let rows = cfg.rows()?;
    let experiments = rows
        .iter()
        .map(|(label, c)| Ok((label.clone(), c.experiment(&base)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let mut aggregate = format!("{AGGREGATE_HEADER}\n");
    let mut runs = format!("{RUNS_HEADER}\n");
    let mut reports = Vec::new();
    for (label, exp) in &experiments {
        let (report, records) =
            monte_carlo(exp).map_err(|e| CliError::Config(format!("{label}: {e}")))?;
        aggregate.push_str(&aggregate_row(label, &report));
        aggregate.push('\n');
        for (i, r) in records.iter().enumerate() {
            runs.push_str(&run_row(label, i, r));
            runs.push('\n');
        }
        reports.push((label.clone(), report));
    }
    let out = args.out_dir();
    write_file(&out.join("aggregate.csv"), &aggregate)?;
    write_file(&out.join("runs.csv"), &runs)?;
    let table = summary_table(&reports);
    write_file(&out.join("summary.txt"), &table)?;
    print!("{table}");
    Ok(0)
}

fn cmd_sweep(args: &CommonArgs, axis: &[String]) -> Result<i32, CliError> {
    let axes = parse_axes(axis)?;
    let (cfg, base) = args.load()?;
    let rows = cfg.rows()?;
    let mut probe = ExperimentConfig::default();
    for a in &axes {
        set_parameter(&mut probe, &a.name, a.values[0])
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let names: Vec<&str> = axes.iter().map(|a| a.name.as_str()).collect();
    let mut csv = format!(
        "controller,{},crash_ratio,crash_ci,collision_ratio,collision_ci,hz\n",
        names.join(",")
    );
    let mut table = Vec::new();
    for (label, c) in &rows {
        let exp = c.experiment(&base)?;
        let points = sweep(&exp, &axes).map_err(|e| CliError::Config(format!("{label}: {e}")))?;
        for p in points {
            let values: Vec<String> = p.point.iter().map(|(_, v)| v.to_string()).collect();
            let r = &p.report;
            let _ = writeln!(
                csv,
                "{label},{},{},{},{},{},{}",
                values.join(","),
                r.crash_ratio,
                r.crash_ci,
                r.collision_ratio,
                r.collision_ci,
                r.mean_hz
            );
            let tag: Vec<String> = p.point.iter().map(|(k, v)| format!("{k}={v}")).collect();
            table.push((format!("{label} {}", tag.join(" ")), p.report));
        }
    }
    let out = args.out_dir();
    write_file(&out.join("sweep.csv"), &csv)?;
    print!("{}", summary_table(&table));
    Ok(0)
}

/// Parses arguments and runs a subcommand; returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let common = match &cli.command {
        Command::Run(a) | Command::Batch(a) => a,
        Command::Sweep { common, .. } => common,
    };
    if let Err(e) = install_workers(common.workers) {
        eprintln!("error: {e}");
        return 1;
    }
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Batch(a) => cmd_batch(a),
        Command::Sweep { common, axis } => cmd_sweep(common, axis),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let c = ConfigFile::default();
        let text = c.dump();
        assert_eq!(ConfigFile::parse(&text).unwrap(), c);
    }

    #[test]
    fn variants_round_trip() {
        let mut c = ConfigFile::default();
        c.variants.push(Variant {
            name: None,
            kind: ControllerKind::Mppi,
            samples: Some(2048),
            inner_samples: None,
            set: vec![],
        });
        c.variants.push(Variant {
            name: Some("bss-c0".into()),
            kind: ControllerKind::BssMppi,
            samples: None,
            inner_samples: Some(8),
            set: vec!["costs.C=0".into()],
        });
        assert_eq!(ConfigFile::parse(&c.dump()).unwrap(), c);
        let rows = c.rows().unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].1.costs.safety_weight, 0.0);
        assert_eq!(rows[1].1.controller.inner_samples, 8);
    }

    #[test]
    fn overrides() {
        let mut c = ConfigFile::default();
        c.apply_override("costs.q_ey=40").unwrap();
        assert_eq!(c.costs.q_ey, 40.0);
        c.apply_override("controller.kind=mppi").unwrap();
        assert_eq!(c.controller.kind, ControllerKind::Mppi);
        c.apply_override("controller.M=64").unwrap();
        assert_eq!(c.controller.samples, 64);
        assert!(c.apply_override("nosuch.key=1").is_err());
        assert!(c.apply_override("costs.bogus=1").is_err());
        assert!(c.apply_override("costs.q_ey").is_err());
    }

    #[test]
    fn axis_syntax() {
        assert_eq!(
            parse_axis("q_ey=0.1,1,10,40").unwrap().values,
            vec![0.1, 1.0, 10.0, 40.0]
        );
        assert_eq!(
            parse_axis("M=128:512:128").unwrap().values,
            vec![128.0, 256.0, 384.0, 512.0]
        );
        let grid = parse_axes(&["M=128:512:128 N=4:16:4".into()]).unwrap();
        assert_eq!(grid.len(), 2);
        assert_eq!(grid[1].values, vec![4.0, 8.0, 12.0, 16.0]);
        assert!(parse_axis("q_ey=").is_err());
        assert!(parse_axes(&[" ".into()]).is_err());
        assert!(parse_axis("M=5:1:1").is_err());
    }

    #[test]
    fn backoff_from_budget() {
        let c = CostsSection {
            p_fail: 0.0455,
            ..CostsSection::default()
        };
        assert!((c.backoff().unwrap() - 2.0).abs() < 1e-3);
        let c = CostsSection {
            p_fail: 0.2,
            backoff_mode: BackoffMode::Cantelli,
            ..CostsSection::default()
        };
        assert!((c.backoff().unwrap() - 3.0).abs() < 1e-12);
    }
}
