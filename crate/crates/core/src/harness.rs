//! Scenario configuration, initial conditions, closed-loop orchestration,
//! metrics and run directories.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::{FullStateController, MeasurementNoise, Observer, ObserverController, ObserverState, Saturation, VslLaw};
use crate::error::{Error, Result, StageExt};
use crate::grid::Grid;
use crate::kernels::{control_kernels_cached, observer_kernels_cached, KernelSettings, ResidualReport};
use crate::model::{
    compute_steady_state_with, linearize, GivenState, LaneMaxRule, LinearCoeffs, ModelParams, PressureNorm,
    SteadyMode, SteadyOptions, SteadyState, TrafficField, KMH, PER_KM,
};
use crate::pde_sim::{
    run_closed_loop, Controller, OpenLoop, Outlet, Plant, PlantKind, SimConfig, Trace,
};

/// Times reported with the original two-lane experiments (s). They are kept
/// as reference metadata only.
pub const REPORTED_T_F: f64 = 260.0;
pub const REPORTED_T_O: f64 = 310.0;
pub const REPORTED_T_OUT: f64 = 570.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Sinusoidal oscillation around the equilibrium.
    #[default]
    StopAndGo,
    /// Dense slow traffic downstream of a smooth front, plus a dense pulse
    /// entering the fast lane.
    Bottleneck,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// No VSL action; the outlet holds the equilibrium outflow.
    OpenLoop,
    #[default]
    FullState,
    /// Open-loop plant with the observer running alongside.
    Observer,
    OutputFeedback,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObserverInit {
    /// Uniform equilibrium, i.e. no knowledge of the initial state.
    #[default]
    Steady,
    /// Exact initial state.
    Truth,
}

/// Initial-condition knobs. Amplitudes are relative, positions and widths
/// are fractions of the segment length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub amplitude: f64,
    pub wavenumber: u32,
    pub shock_position: f64,
    pub shock_width: f64,
    /// Relative slow-lane density offset downstream of the front.
    pub downstream_rise: f64,
    /// Relative slow-lane density offset upstream of the front (subtracted).
    pub upstream_drop: f64,
    pub pulse_amplitude: f64,
    pub pulse_position: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::StopAndGo,
            amplitude: 0.1,
            wavenumber: 1,
            shock_position: 0.7,
            shock_width: 0.1,
            downstream_rise: 0.25,
            upstream_drop: 0.10,
            pulse_amplitude: 0.2,
            pulse_position: 0.3,
        }
    }
}

/// Fully resolved run configuration, SI units throughout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub model: ModelParams,
    /// Slow-lane equilibrium density (veh/m).
    pub rho_star_slow: f64,
    pub steady: SteadyOptions,
    pub scenario: ScenarioSpec,
    pub mode: Mode,
    pub plant: PlantKind,
    pub sim: SimConfig,
    pub seed: u64,
    /// Relative deviation below which a run counts as converged; defaults
    /// per plant when absent.
    pub convergence_threshold: Option<f64>,
    pub observer_init: ObserverInit,
    pub kernels: KernelSettings,
    pub kernel_cache: Option<PathBuf>,
    /// Command bound (m/s).
    pub saturation: Option<f64>,
    /// Half-width of uniform density measurement noise (veh/m).
    pub noise: f64,
    pub out_dir: Option<PathBuf>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        RawConfig::default().resolve().expect("defaults are valid")
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.rho_star_slow.is_finite() && self.rho_star_slow > 0.0) {
            return Err(Error::invalid("steady.rho_star_slow_veh_per_km", "must be positive"));
        }
        let s = &self.scenario;
        if !(0.0..=0.5).contains(&s.amplitude) {
            return Err(Error::invalid("scenario.amplitude", format!("must lie in [0, 0.5], got {}", s.amplitude)));
        }
        if s.wavenumber == 0 {
            return Err(Error::invalid("scenario.wavenumber", "must be at least 1"));
        }
        for (name, v) in [
            ("scenario.shock_position", s.shock_position),
            ("scenario.shock_width", s.shock_width),
            ("scenario.pulse_position", s.pulse_position),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::invalid(name, format!("must lie in (0, 1), got {v}")));
            }
        }
        for (name, v) in [
            ("scenario.downstream_rise", s.downstream_rise),
            ("scenario.upstream_drop", s.upstream_drop),
            ("scenario.pulse_amplitude", s.pulse_amplitude),
        ] {
            if !(0.0..=0.5).contains(&v) {
                return Err(Error::invalid(name, format!("must lie in [0, 0.5], got {v}")));
            }
        }
        if (self.sim.grid.length - self.model.seg_length).abs() > 1e-9 * self.model.seg_length {
            return Err(Error::invalid("run.n_cells", "grid length must equal the segment length"));
        }
        self.sim.validate()?;
        if self.sim.scheme != self.plant.default_scheme() {
            return Err(Error::invalid(
                "run.scheme",
                format!("{:?} does not fit the {:?} plant", self.sim.scheme, self.plant),
            ));
        }
        self.kernels.validate()?;
        if let Some(t) = self.convergence_threshold {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::invalid("run.convergence_threshold", format!("must lie in (0, 1), got {t}")));
            }
        }
        if let Some(b) = self.saturation {
            Saturation::new(b)?;
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::invalid("control.noise_veh_per_km", "must be non-negative"));
        }
        Ok(())
    }

    pub fn threshold(&self) -> f64 {
        self.convergence_threshold.unwrap_or(match self.plant {
            PlantKind::Linearized => 0.01,
            PlantKind::Nonlinear => 0.05,
        })
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&RawConfig::from_resolved(self)).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

// On-disk form: sectioned key/value file with unit-suffixed keys.

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawConfig {
    model: RawModel,
    steady: RawSteady,
    scenario: ScenarioSpec,
    run: RawRun,
    kernels: RawKernels,
    control: RawControl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawModel {
    gamma: f64,
    v_max_kmh: f64,
    rho_max_equiv_veh_per_km: f64,
    length_m: f64,
    t_pref_slow_s: f64,
    t_pref_fast_s: f64,
    t_relax_slow_s: f64,
    t_relax_fast_s: f64,
}

impl Default for RawModel {
    fn default() -> Self {
        let p = ModelParams::table1();
        Self {
            gamma: p.gamma,
            v_max_kmh: p.v_max / KMH,
            rho_max_equiv_veh_per_km: p.rho_max_equiv / PER_KM,
            length_m: p.seg_length,
            t_pref_slow_s: p.t_pref_slow,
            t_pref_fast_s: p.t_pref_fast,
            t_relax_slow_s: p.t_relax_slow,
            t_relax_fast_s: p.t_relax_fast,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawSteadyMode {
    #[default]
    Consistent,
    AsGiven,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawSteady {
    rho_star_slow_veh_per_km: f64,
    mode: RawSteadyMode,
    pressure: PressureNorm,
    lane_max: LaneMaxRule,
    given_rho_fast_veh_per_km: f64,
    given_v_slow_kmh: f64,
    given_v_fast_kmh: f64,
    given_rho_max_slow_veh_per_km: f64,
    given_rho_max_fast_veh_per_km: f64,
}

impl Default for RawSteady {
    fn default() -> Self {
        let g = GivenState::table1();
        Self {
            rho_star_slow_veh_per_km: 180.0,
            mode: RawSteadyMode::Consistent,
            pressure: PressureNorm::default(),
            lane_max: LaneMaxRule::default(),
            given_rho_fast_veh_per_km: g.rho_fast / PER_KM,
            given_v_slow_kmh: g.v_slow / KMH,
            given_v_fast_kmh: g.v_fast / KMH,
            given_rho_max_slow_veh_per_km: g.rho_max_slow / PER_KM,
            given_rho_max_fast_veh_per_km: g.rho_max_fast / PER_KM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawRun {
    mode: Mode,
    plant: PlantKind,
    n_cells: usize,
    cfl: f64,
    t_end_s: f64,
    record_every: usize,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    convergence_threshold: Option<f64>,
    observer_init: ObserverInit,
    #[serde(skip_serializing_if = "Option::is_none")]
    out_dir: Option<PathBuf>,
}

impl Default for RawRun {
    fn default() -> Self {
        Self {
            mode: Mode::FullState,
            plant: PlantKind::Linearized,
            n_cells: 200,
            cfl: 0.8,
            t_end_s: 600.0,
            record_every: 10,
            seed: 0,
            convergence_threshold: None,
            observer_init: ObserverInit::Steady,
            out_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawKernels {
    n: usize,
    tol: f64,
    max_iter: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    cache_dir: Option<PathBuf>,
}

impl Default for RawKernels {
    fn default() -> Self {
        let k = KernelSettings::default();
        Self {
            n: k.n,
            tol: k.tol,
            max_iter: k.max_iter,
            cache_dir: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawControl {
    #[serde(skip_serializing_if = "Option::is_none")]
    saturation_kmh: Option<f64>,
    noise_veh_per_km: f64,
}

impl RawConfig {
    fn resolve(&self) -> Result<ScenarioConfig> {
        let m = &self.model;
        let model = ModelParams {
            gamma: m.gamma,
            v_max: m.v_max_kmh * KMH,
            rho_max_equiv: m.rho_max_equiv_veh_per_km * PER_KM,
            seg_length: m.length_m,
            t_pref_slow: m.t_pref_slow_s,
            t_pref_fast: m.t_pref_fast_s,
            t_relax_slow: m.t_relax_slow_s,
            t_relax_fast: m.t_relax_fast_s,
        };
        let st = &self.steady;
        let mode = match st.mode {
            RawSteadyMode::Consistent => SteadyMode::Consistent,
            RawSteadyMode::AsGiven => SteadyMode::AsGiven(GivenState {
                rho_fast: st.given_rho_fast_veh_per_km * PER_KM,
                v_slow: st.given_v_slow_kmh * KMH,
                v_fast: st.given_v_fast_kmh * KMH,
                rho_max_slow: st.given_rho_max_slow_veh_per_km * PER_KM,
                rho_max_fast: st.given_rho_max_fast_veh_per_km * PER_KM,
            }),
        };
        let r = &self.run;
        let grid = Grid::new(r.n_cells, m.length_m).map_err(|e| rename_field(e, "run.n_cells"))?;
        let cfg = ScenarioConfig {
            model,
            rho_star_slow: st.rho_star_slow_veh_per_km * PER_KM,
            steady: SteadyOptions {
                pressure: st.pressure,
                lane_max: st.lane_max,
                mode,
            },
            scenario: self.scenario.clone(),
            mode: r.mode,
            plant: r.plant,
            sim: SimConfig {
                grid,
                cfl: r.cfl,
                t_end: r.t_end_s,
                record_every: r.record_every,
                scheme: r.plant.default_scheme(),
            },
            seed: r.seed,
            convergence_threshold: r.convergence_threshold,
            observer_init: r.observer_init,
            kernels: KernelSettings {
                n: self.kernels.n,
                tol: self.kernels.tol,
                max_iter: self.kernels.max_iter,
            },
            kernel_cache: self.kernels.cache_dir.clone(),
            saturation: self.control.saturation_kmh.map(|b| b * KMH),
            noise: self.control.noise_veh_per_km * PER_KM,
            out_dir: r.out_dir.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_resolved(c: &ScenarioConfig) -> Self {
        let m = &c.model;
        let g = match &c.steady.mode {
            SteadyMode::AsGiven(g) => g.clone(),
            SteadyMode::Consistent => GivenState::table1(),
        };
        Self {
            model: RawModel {
                gamma: m.gamma,
                v_max_kmh: m.v_max / KMH,
                rho_max_equiv_veh_per_km: m.rho_max_equiv / PER_KM,
                length_m: m.seg_length,
                t_pref_slow_s: m.t_pref_slow,
                t_pref_fast_s: m.t_pref_fast,
                t_relax_slow_s: m.t_relax_slow,
                t_relax_fast_s: m.t_relax_fast,
            },
            steady: RawSteady {
                rho_star_slow_veh_per_km: c.rho_star_slow / PER_KM,
                mode: match c.steady.mode {
                    SteadyMode::Consistent => RawSteadyMode::Consistent,
                    SteadyMode::AsGiven(_) => RawSteadyMode::AsGiven,
                },
                pressure: c.steady.pressure,
                lane_max: c.steady.lane_max,
                given_rho_fast_veh_per_km: g.rho_fast / PER_KM,
                given_v_slow_kmh: g.v_slow / KMH,
                given_v_fast_kmh: g.v_fast / KMH,
                given_rho_max_slow_veh_per_km: g.rho_max_slow / PER_KM,
                given_rho_max_fast_veh_per_km: g.rho_max_fast / PER_KM,
            },
            scenario: c.scenario.clone(),
            run: RawRun {
                mode: c.mode,
                plant: c.plant,
                n_cells: c.sim.grid.n_cells,
                cfl: c.sim.cfl,
                t_end_s: c.sim.t_end,
                record_every: c.sim.record_every,
                seed: c.seed,
                convergence_threshold: c.convergence_threshold,
                observer_init: c.observer_init,
                out_dir: c.out_dir.clone(),
            },
            kernels: RawKernels {
                n: c.kernels.n,
                tol: c.kernels.tol,
                max_iter: c.kernels.max_iter,
                cache_dir: c.kernel_cache.clone(),
            },
            control: RawControl {
                saturation_kmh: c.saturation.map(|b| b / KMH),
                noise_veh_per_km: c.noise / PER_KM,
            },
        }
    }
}

fn rename_field(e: Error, field: &str) -> Error {
    match e {
        Error::Invalid { reason, .. } => Error::invalid(field, reason),
        other => other,
    }
}

/// Parse configuration text. Omitted keys take the reference defaults.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    raw.resolve()
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Initial traffic state of the configured scenario.
pub fn make_initial_condition(cfg: &ScenarioConfig, ss: &SteadyState) -> Result<TrafficField> {
    let grid = cfg.sim.grid;
    let len = grid.length;
    let s = &cfg.scenario;
    // Relative density offsets per lane; speeds move the opposite way.
    let offset: Box<dyn Fn(usize, f64) -> f64> = match s.kind {
        ScenarioKind::StopAndGo => {
            let (a, k) = (s.amplitude, s.wavenumber as f64);
            Box::new(move |_, x| a * (2.0 * std::f64::consts::PI * k * x / len).sin())
        }
        ScenarioKind::Bottleneck => {
            let (x0, w) = (s.shock_position * len, s.shock_width * len);
            let (rise, drop) = (s.downstream_rise, s.upstream_drop);
            let (xp, pulse) = (s.pulse_position * len, s.pulse_amplitude);
            Box::new(move |lane, x| {
                if lane == 0 {
                    let front = 0.5 * (1.0 + ((x - x0) / w).tanh());
                    -drop + (rise + drop) * front
                } else {
                    pulse / ((x - xp) / w).cosh().powi(2)
                }
            })
        }
    };
    let mut f = TrafficField::steady(grid, ss);
    for i in 0..2 {
        for (j, x) in grid.nodes().into_iter().enumerate() {
            let d = offset(i, x);
            f.rho[i][j] = ss.rho_star[i] * (1.0 + d);
            f.v[i][j] = ss.v_star[i] * (1.0 - d);
            if !(f.rho[i][j] > 0.0 && f.rho[i][j] < ss.rho_max[i]) {
                return Err(Error::invalid(
                    "scenario",
                    format!("density {:.4} veh/km at x = {x} m leaves the lane range", f.rho[i][j] / PER_KM),
                ));
            }
            if !(f.v[i][j] > 0.0 && f.v[i][j] < cfg.model.v_max) {
                return Err(Error::invalid(
                    "scenario",
                    format!("speed {:.4} km/h at x = {x} m leaves the admissible range", f.v[i][j] / KMH),
                ));
            }
        }
    }
    Ok(f)
}

/// Finite-time bounds from the transport speeds (s).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    /// `L/eps_1 + L/mu_2 + L/mu_1`.
    pub t_f: f64,
    /// `L/eps_1 + L/eps_2 + L/mu_2`.
    pub t_o: f64,
    pub t_out: f64,
}

impl Bounds {
    pub fn new(lc: &LinearCoeffs) -> Self {
        let len = lc.length;
        let t_f = len / lc.eps[0] + len / lc.mu[1] + len / lc.mu[0];
        let t_o = len / lc.eps[0] + len / lc.eps[1] + len / lc.mu[1];
        Self { t_f, t_o, t_out: t_o + t_f }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSummary {
    pub iterations: usize,
    pub residual: Option<ResidualReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub bounds: Bounds,
    /// Reported reference values, not derived here.
    pub reported_bounds: Bounds,
    pub threshold: f64,
    pub initial_deviation: f64,
    pub final_deviation: f64,
    /// Combined deviation relative to its initial value at the end of the run.
    pub final_ratio: f64,
    /// First time after which the combined deviation stays below
    /// `threshold` times its initial value.
    pub convergence_time: Option<f64>,
    /// Per-lane deviation norms at the snapshot times.
    pub lane_deviation: Vec<[f64; 2]>,
    pub initial_estimation_error: Option<f64>,
    pub final_estimation_error: Option<f64>,
    pub estimation_convergence_time: Option<f64>,
    pub steps: usize,
    pub saturated_steps: usize,
    pub control_kernels: Option<KernelSummary>,
    pub observer_kernels: Option<KernelSummary>,
    pub config_hash: String,
    pub version: String,
}

/// Combined relative deviation of one lane.
pub fn lane_deviation(f: &TrafficField, ss: &SteadyState, lane: usize) -> f64 {
    let w = f.grid.trapezoid_weights();
    let mut acc = 0.0;
    for (j, wj) in w.iter().enumerate() {
        let dr = f.rho[lane][j] / ss.rho_star[lane] - 1.0;
        let dv = f.v[lane][j] / ss.v_star[lane] - 1.0;
        acc += wj * (dr * dr + dv * dv);
    }
    (acc / f.grid.length).sqrt()
}

/// First time after which `series / series[0]` stays below `threshold`.
pub fn settle_time(times: &[f64], series: &[f64], threshold: f64) -> Option<f64> {
    let first = *series.first()?;
    if first == 0.0 {
        return Some(0.0);
    }
    let last_above = series.iter().rposition(|&v| v / first >= threshold);
    match last_above {
        None => Some(times[0]),
        Some(k) if k + 1 < series.len() => Some(times[k + 1]),
        Some(_) => None,
    }
}

/// Value of `series` at the first step time at or after `t`, relative to
/// its initial value.
pub fn ratio_at(times: &[f64], series: &[f64], t: f64) -> Option<f64> {
    let k = times.iter().position(|&s| s >= t - 1e-9)?;
    Some(series[k] / series[0])
}

pub struct RunOutput {
    pub config: ScenarioConfig,
    pub steady: SteadyState,
    pub coeffs: LinearCoeffs,
    pub trace: Trace,
    pub metrics: Metrics,
}

/// Steady state, coefficients and initial condition for `cfg`.
pub fn prepare(cfg: &ScenarioConfig) -> Result<(SteadyState, LinearCoeffs, TrafficField)> {
    cfg.validate()?;
    let ss = compute_steady_state_with(&cfg.model, cfg.rho_star_slow, &cfg.steady).stage("steady state")?;
    let lc = linearize(&cfg.model, &ss).stage("linearize")?;
    let init = make_initial_condition(cfg, &ss).stage("initial condition")?;
    Ok((ss, lc, init))
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutput> {
    let (ss, lc, init) = prepare(cfg)?;
    let grid = cfg.sim.grid;
    let cache = cfg.kernel_cache.as_deref();
    let sat = cfg.saturation.map(Saturation::new).transpose()?;
    let needs_law = matches!(cfg.mode, Mode::FullState | Mode::OutputFeedback);
    let needs_observer = matches!(cfg.mode, Mode::Observer | Mode::OutputFeedback);

    let ks = if needs_law {
        Some(control_kernels_cached(&lc, &cfg.kernels, cache).stage("controller kernels")?)
    } else {
        None
    };
    let oks = if needs_observer {
        Some(observer_kernels_cached(&lc, &cfg.kernels, cache).stage("observer kernels")?)
    } else {
        None
    };
    let law = ks.as_ref().map(|k| VslLaw::new(k, &lc, grid)).transpose().stage("control law")?;

    let outlet = match cfg.mode {
        Mode::OpenLoop | Mode::Observer => Outlet::ConstantFlux,
        Mode::FullState | Mode::OutputFeedback => Outlet::SpeedLimit,
    };
    let plant = Plant::new(cfg.plant, &init, &cfg.model, &ss, &lc).stage("plant")?.with_outlet(outlet);
    let mut controller: Box<dyn Controller> = match cfg.mode {
        Mode::OpenLoop => Box::new(OpenLoop),
        Mode::FullState => Box::new(FullStateController::new(law.clone().expect("law built"), sat)),
        Mode::Observer | Mode::OutputFeedback => {
            let observer = Observer::new(oks.as_ref().expect("observer kernels built"), &lc, grid).stage("observer")?;
            let est = match cfg.observer_init {
                ObserverInit::Steady => ObserverState::steady(grid),
                ObserverInit::Truth => ObserverState::from_physical(&init, &ss, &lc)?,
            };
            let noise = (cfg.noise > 0.0).then(|| MeasurementNoise::new(cfg.noise, cfg.seed)).transpose()?;
            let law = if cfg.mode == Mode::OutputFeedback { law.clone() } else { None };
            Box::new(
                ObserverController::new(observer, est, law, &ss, &lc)?
                    .with_saturation(sat)
                    .with_noise(noise),
            )
        }
    };
    let trace = run_closed_loop(plant, controller.as_mut(), &cfg.sim, &ss, &lc).stage("simulation")?;
    let metrics = compute_metrics(cfg, &ss, &lc, &trace, ks.as_ref().map(summary_c), oks.as_ref().map(summary_o));
    Ok(RunOutput {
        config: cfg.clone(),
        steady: ss,
        coeffs: lc,
        trace,
        metrics,
    })
}

fn summary_c(k: &crate::kernels::KernelSet) -> KernelSummary {
    KernelSummary {
        iterations: k.iterations(),
        residual: k.residual.clone(),
    }
}

fn summary_o(k: &crate::kernels::ObserverKernelSet) -> KernelSummary {
    KernelSummary {
        iterations: k.iterations(),
        residual: k.residual.clone(),
    }
}

pub fn compute_metrics(
    cfg: &ScenarioConfig,
    ss: &SteadyState,
    lc: &LinearCoeffs,
    trace: &Trace,
    control_kernels: Option<KernelSummary>,
    observer_kernels: Option<KernelSummary>,
) -> Metrics {
    let threshold = cfg.threshold();
    let initial = trace.deviation[0];
    let last = *trace.deviation.last().expect("trace holds t = 0");
    let est = &trace.estimation_error;
    Metrics {
        bounds: Bounds::new(lc),
        reported_bounds: Bounds {
            t_f: REPORTED_T_F,
            t_o: REPORTED_T_O,
            t_out: REPORTED_T_OUT,
        },
        threshold,
        initial_deviation: initial,
        final_deviation: last,
        final_ratio: if initial > 0.0 { last / initial } else { 0.0 },
        convergence_time: settle_time(&trace.step_times, &trace.deviation, threshold),
        lane_deviation: trace
            .snapshots
            .iter()
            .map(|f| [lane_deviation(f, ss, 0), lane_deviation(f, ss, 1)])
            .collect(),
        initial_estimation_error: est.first().copied(),
        final_estimation_error: est.last().copied(),
        estimation_convergence_time: if est.is_empty() {
            None
        } else {
            settle_time(&trace.step_times, est, threshold)
        },
        steps: trace.commands.len(),
        saturated_steps: trace.saturated_steps,
        control_kernels,
        observer_kernels,
        config_hash: cfg.hash(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    }
}

/// Field CSV: header `t_s,<x_0>,...`, one row per snapshot.
fn field_csv(path: &Path, grid: &Grid, times: &[f64], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["t_s".to_string()];
    header.extend(grid.nodes().iter().map(|x| format!("{x}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (t, row) in times.iter().zip(rows) {
        let mut rec = vec![format!("{t}")];
        rec.extend(row.iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

const FIELDS: [(&str, usize, bool); 4] = [("rho_slow", 0, true), ("v_slow", 0, false), ("rho_fast", 1, true), ("v_fast", 1, false)];

/// Write the run directory: one CSV per field (and per estimated field),
/// `commands.csv`, `norms.csv`, `metrics.json` and `config.resolved.json`.
pub fn write_trace(out: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let trace = &out.trace;
    let mut written = Vec::new();
    let sets: [(&str, &[TrafficField]); 2] = [("", &trace.snapshots), ("_est", &trace.estimates)];
    for (suffix, snaps) in sets {
        if snaps.is_empty() {
            continue;
        }
        for (name, lane, is_rho) in FIELDS {
            let path = dir.join(format!("{name}{suffix}.csv"));
            let rows = snaps.iter().map(|f| if is_rho { f.rho[lane].clone() } else { f.v[lane].clone() });
            field_csv(&path, &trace.grid, &trace.times, rows)?;
            written.push(path);
        }
    }

    let path = dir.join("commands.csv");
    let mut text = String::from("t_s,u_slow_mps,u_fast_mps\n");
    for (t, c) in trace.step_times.iter().zip(&trace.commands) {
        let _ = writeln!(text, "{t},{},{}", c.u_slow, c.u_fast);
    }
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);

    let path = dir.join("norms.csv");
    let mut text = String::from("t_s,deviation,estimation_error\n");
    for (k, (t, d)) in trace.step_times.iter().zip(&trace.deviation).enumerate() {
        match trace.estimation_error.get(k) {
            Some(e) => writeln!(text, "{t},{d},{e}"),
            None => writeln!(text, "{t},{d},"),
        }
        .expect("writing to a string");
    }
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);

    let path = dir.join("metrics.json");
    let json = serde_json::to_string_pretty(&out.metrics).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    written.push(path);

    #[derive(Serialize)]
    struct Resolved<'a> {
        hash: String,
        outlet: Outlet,
        config: &'a ScenarioConfig,
    }
    let path = dir.join("config.resolved.json");
    let json = serde_json::to_string_pretty(&Resolved {
        hash: out.config.hash(),
        outlet: trace.outlet,
        config: &out.config,
    })
    .map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

/// Run and write every config in parallel, one worker per config. Each
/// config needs its own output directory.
pub fn run_batch(configs: &[ScenarioConfig]) -> Result<Vec<Result<Metrics>>> {
    use rayon::prelude::*;
    let mut seen = std::collections::BTreeSet::new();
    for (k, c) in configs.iter().enumerate() {
        let dir = c
            .out_dir
            .as_ref()
            .ok_or_else(|| Error::invalid("run.out_dir", format!("config {k} has no output directory")))?;
        if !seen.insert(dir.clone()) {
            return Err(Error::invalid("run.out_dir", format!("{} is used by more than one config", dir.display())));
        }
    }
    Ok(configs
        .par_iter()
        .map(|c| {
            let out = run_scenario(c)?;
            write_trace(&out, c.out_dir.as_deref().expect("checked above")).stage("write trace")?;
            Ok(out.metrics)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_reference_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c.model, ModelParams::table1());
        assert!((c.rho_star_slow - 0.18).abs() < 1e-15);
        assert!((c.model.v_max - 40.0).abs() < 1e-12);
        assert_eq!(c.model.seg_length, 1000.0);
        assert_eq!((c.model.t_pref_slow, c.model.t_pref_fast), (50.0, 25.0));
        assert_eq!((c.model.t_relax_slow, c.model.t_relax_fast), (200.0, 100.0));
        assert_eq!(c.model.gamma, 0.8);
    }

    #[test]
    fn bad_values_name_their_field() {
        let e = parse_config("[run]\ncfl = 1.5\n").unwrap_err();
        assert!(e.to_string().contains("cfl"), "{e}");
        let e = parse_config("[run]\nbogus = 1\n").unwrap_err();
        assert!(matches!(e, Error::Config(_)), "{e}");
        assert!(e.to_string().contains("bogus"), "{e}");
        let e = parse_config("[scenario]\nshock_width = 0.0\n").unwrap_err();
        assert!(e.to_string().contains("shock_width"), "{e}");
    }

    #[test]
    fn parse_errors_carry_a_line() {
        let e = parse_config("[run]\n\ncfl = = 2\n").unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
    }

    #[test]
    fn save_load_round_trip() {
        let mut c = parse_config("[run]\nmode = \"output_feedback\"\nplant = \"nonlinear\"\n[control]\nsaturation_kmh = 20.0\n").unwrap();
        c.steady.mode = SteadyMode::AsGiven(GivenState::table1());
        c.scenario.kind = ScenarioKind::Bottleneck;
        let back = parse_config(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn settle_time_semantics() {
        let t = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(settle_time(&t, &[1.0, 0.5, 0.001, 0.02, 0.001], 0.01), Some(4.0));
        assert_eq!(settle_time(&t, &[1.0, 0.5, 0.4, 0.3, 0.2], 0.01), None);
        assert_eq!(ratio_at(&t, &[2.0, 1.0, 0.5, 0.25, 0.1], 1.5), Some(0.25));
    }
}
