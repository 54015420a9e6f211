//! Explicit time stepping of the nonlinear two-lane plant and of the scaled
//! linearized plant, plus the closed-loop runner.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::{
    characteristic_to_physical, equilibrium_speed_unchecked, physical_to_characteristic, pressure_unchecked, CharField,
    LinearCoeffs, Mat2, ModelParams, SteadyState, TrafficField,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// First-order upwind on characteristic variables (linearized plant).
    Upwind,
    /// Local Lax-Friedrichs (Rusanov) on conservative variables (nonlinear plant).
    LaxFriedrichs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    Nonlinear,
    Linearized,
}

impl PlantKind {
    pub fn default_scheme(self) -> Scheme {
        match self {
            PlantKind::Nonlinear => Scheme::LaxFriedrichs,
            PlantKind::Linearized => Scheme::Upwind,
        }
    }
}

/// Outlet boundary condition of the plant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outlet {
    /// Outlet speed set by the VSL: `v(L) = v* + U`.
    #[default]
    SpeedLimit,
    /// Outgoing flow held at `q*`; the VSL input is ignored. This is the
    /// uncontrolled segment.
    ConstantFlux,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub grid: Grid,
    pub cfl: f64,
    pub t_end: f64,
    /// Keep every `record_every`-th step as a snapshot (the last step is always kept).
    pub record_every: usize,
    pub scheme: Scheme,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(Error::invalid("cfl", format!("must lie in (0, 1], got {}", self.cfl)));
        }
        if !(self.t_end.is_finite() && self.t_end > 0.0) {
            return Err(Error::invalid("t_end", format!("must be positive, got {}", self.t_end)));
        }
        if self.record_every == 0 {
            return Err(Error::invalid("record_every", "must be at least 1"));
        }
        Ok(())
    }
}

/// Outlet speed-limit deviations `U_s`, `U_f` (m/s).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundaryInput {
    pub u_slow: f64,
    pub u_fast: f64,
}

impl BoundaryInput {
    pub fn new(u_slow: f64, u_fast: f64) -> Self {
        Self { u_slow, u_fast }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.u_slow, self.u_fast]
    }

    pub fn from_array(u: [f64; 2]) -> Self {
        Self::new(u[0], u[1])
    }
}

/// `cfl * dx / max(eps_2, mu_1)`.
pub fn cfl_dt(grid: &Grid, lc: &LinearCoeffs, cfl: f64) -> Result<f64> {
    speed_dt(grid.dx(), lc.max_speed(), cfl)
}

fn speed_dt(dx: f64, speed: f64, cfl: f64) -> Result<f64> {
    if !(cfl > 0.0 && cfl <= 1.0) {
        return Err(Error::invalid("cfl", format!("must lie in (0, 1], got {cfl}")));
    }
    if !(speed.is_finite() && speed > 0.0) {
        return Err(Error::Domain(format!("characteristic speed {speed} gives no time step")));
    }
    Ok(cfl * dx / speed)
}

/// Output injection added to the linear step: `P(x) e` and `Q(x) e`.
pub struct Injection<'a> {
    pub p: &'a [Mat2],
    pub q: &'a [Mat2],
    pub error: [f64; 2],
}

/// Upwind stepper of the scaled linearized system with coefficients cached
/// at the grid nodes.
#[derive(Clone, Debug)]
pub struct LinearStepper {
    grid: Grid,
    eps: [f64; 2],
    mu: [f64; 2],
    k: [f64; 2],
    l: [f64; 2],
    ww: Mat2,
    wv: Vec<Mat2>,
    vw: Vec<Mat2>,
    vv: Vec<Mat2>,
    outlet: Outlet,
}

impl LinearStepper {
    pub fn new(grid: Grid, lc: &LinearCoeffs) -> Result<Self> {
        if (grid.length - lc.length).abs() > 1e-9 * lc.length {
            return Err(Error::GridMismatch(format!(
                "grid length {} differs from segment length {}",
                grid.length, lc.length
            )));
        }
        let x = grid.nodes();
        Ok(Self {
            grid,
            eps: lc.eps,
            mu: lc.mu,
            k: lc.k,
            l: lc.l,
            ww: lc.bar_ww(),
            wv: x.iter().map(|&x| lc.bar_wv(x)).collect(),
            vw: x.iter().map(|&x| lc.bar_vw(x)).collect(),
            vv: x.iter().map(|&x| lc.bar_vv(x)).collect(),
            outlet: Outlet::SpeedLimit,
        })
    }

    pub fn with_outlet(mut self, outlet: Outlet) -> Self {
        self.outlet = outlet;
        self
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn step(&self, c: &CharField, bi: BoundaryInput, dt: f64, inj: Option<&Injection>, t: f64) -> Result<CharField> {
        let n = self.grid.n_cells;
        for i in 0..2 {
            self.grid.check_len("w", c.w[i].len())?;
            self.grid.check_len("vbar", c.vbar[i].len())?;
        }
        if let Some(inj) = inj {
            self.grid.check_len("injection gain", inj.p.len())?;
            self.grid.check_len("injection gain", inj.q.len())?;
        }
        let r = dt / self.grid.dx();
        let mut out = c.clone();
        for i in 0..2 {
            let (ce, cm) = (self.eps[i] * r, self.mu[i] * r);
            for j in 0..=n {
                let w_src = self.ww[i][0] * c.w[0][j]
                    + self.ww[i][1] * c.w[1][j]
                    + self.wv[j][i][0] * c.vbar[0][j]
                    + self.wv[j][i][1] * c.vbar[1][j];
                let v_src = self.vw[j][i][0] * c.w[0][j]
                    + self.vw[j][i][1] * c.w[1][j]
                    + self.vv[j][i][0] * c.vbar[0][j]
                    + self.vv[j][i][1] * c.vbar[1][j];
                let (w_inj, v_inj) = match inj {
                    Some(inj) => (
                        inj.p[j][i][0] * inj.error[0] + inj.p[j][i][1] * inj.error[1],
                        inj.q[j][i][0] * inj.error[0] + inj.q[j][i][1] * inj.error[1],
                    ),
                    None => (0.0, 0.0),
                };
                if j > 0 {
                    out.w[i][j] = c.w[i][j] - ce * (c.w[i][j] - c.w[i][j - 1]) + dt * (w_src + w_inj);
                }
                if j < n {
                    out.vbar[i][j] = c.vbar[i][j] + cm * (c.vbar[i][j + 1] - c.vbar[i][j]) + dt * (v_src + v_inj);
                }
            }
        }
        let u = bi.as_array();
        for i in 0..2 {
            out.vbar[i][n] = match self.outlet {
                Outlet::SpeedLimit => self.l[i] * u[i],
                // Linearized rho v = q*: the speed deviation is -(eps/mu) w.
                Outlet::ConstantFlux => -self.l[i] * self.eps[i] / self.mu[i] * out.w[i][n],
            };
            out.w[i][0] = self.k[i] * out.vbar[i][0];
        }
        for i in 0..2 {
            for (j, (&w, &v)) in out.w[i].iter().zip(&out.vbar[i]).enumerate() {
                if !(w.is_finite() && v.is_finite()) {
                    return Err(Error::BlowUp {
                        time: t + dt,
                        node: j,
                        detail: format!("non-finite characteristic state in lane {i}"),
                    });
                }
            }
        }
        Ok(out)
    }
}

/// One upwind step of the scaled linearized system.
pub fn step_linear(c: &CharField, bi: BoundaryInput, lc: &LinearCoeffs, dt: f64) -> Result<CharField> {
    LinearStepper::new(c.grid, lc)?.step(c, bi, dt, None, 0.0)
}

/// Rusanov finite-volume stepper of the nonlinear plant on the node grid.
#[derive(Clone, Debug)]
pub struct NonlinearStepper {
    grid: Grid,
    params: ModelParams,
    pressure_ref: [f64; 2],
    rho_star: [f64; 2],
    v_star: [f64; 2],
    q_star: [f64; 2],
    rho_cap: [f64; 2],
    outlet: Outlet,
}

impl NonlinearStepper {
    pub fn new(grid: Grid, params: &ModelParams, ss: &SteadyState) -> Result<Self> {
        if (grid.length - params.seg_length).abs() > 1e-9 * params.seg_length {
            return Err(Error::GridMismatch(format!(
                "grid length {} differs from segment length {}",
                grid.length, params.seg_length
            )));
        }
        Ok(Self {
            grid,
            params: params.clone(),
            pressure_ref: ss.pressure_ref,
            rho_star: ss.rho_star,
            v_star: ss.v_star,
            q_star: ss.q_star,
            rho_cap: [2.0 * ss.rho_max[0], 2.0 * ss.rho_max[1]],
            outlet: Outlet::SpeedLimit,
        })
    }

    pub fn with_outlet(mut self, outlet: Outlet) -> Self {
        self.outlet = outlet;
        self
    }

    fn p(&self, i: usize, rho: f64) -> f64 {
        pressure_unchecked(rho.max(0.0), self.pressure_ref[i], self.params.gamma, self.params.v_max)
    }

    /// Largest local wave speed `max(|v|, |v - gamma p|)`.
    pub fn max_speed(&self, f: &TrafficField) -> f64 {
        let g = self.params.gamma;
        let mut s = 0.0_f64;
        for i in 0..2 {
            for (&r, &v) in f.rho[i].iter().zip(&f.v[i]) {
                s = s.max(v.abs()).max((v - g * self.p(i, r)).abs());
            }
        }
        s
    }

    pub fn step(&self, f: &TrafficField, bi: BoundaryInput, dt: f64, t: f64) -> Result<TrafficField> {
        let n = self.grid.n_cells;
        for i in 0..2 {
            self.grid.check_len("density", f.rho[i].len())?;
            self.grid.check_len("speed", f.v[i].len())?;
        }
        let prm = &self.params;
        let g = prm.gamma;
        let r = dt / self.grid.dx();
        let t_pref = [prm.t_pref_slow, prm.t_pref_fast];
        let t_relax = [prm.t_relax_slow, prm.t_relax_fast];

        // Conservative state (rho, y = rho (v + p)) and fluxes per lane.
        let mut y = [vec![0.0; n + 1], vec![0.0; n + 1]];
        let mut gp = [vec![0.0; n + 1], vec![0.0; n + 1]];
        for i in 0..2 {
            for j in 0..=n {
                let p = self.p(i, f.rho[i][j]);
                gp[i][j] = g * p;
                y[i][j] = f.rho[i][j] * (f.v[i][j] + p);
            }
        }
        let mut out = f.clone();
        for i in 0..2 {
            let o = 1 - i;
            let mut flux = vec![[0.0; 2]; n];
            for (j, fl) in flux.iter_mut().enumerate() {
                let (a, b) = (j, j + 1);
                let speed = |k: usize| f.v[i][k].abs().max((f.v[i][k] - gp[i][k]).abs());
                let s = speed(a).max(speed(b));
                let fa = [f.rho[i][a] * f.v[i][a], y[i][a] * f.v[i][a]];
                let fb = [f.rho[i][b] * f.v[i][b], y[i][b] * f.v[i][b]];
                fl[0] = 0.5 * (fa[0] + fb[0]) - 0.5 * s * (f.rho[i][b] - f.rho[i][a]);
                fl[1] = 0.5 * (fa[1] + fb[1]) - 0.5 * s * (y[i][b] - y[i][a]);
            }
            for j in 1..n {
                let (rho, v) = (f.rho[i][j], f.v[i][j]);
                let (rho_o, v_o) = (f.rho[o][j], f.v[o][j]);
                let s_rho = rho_o / t_pref[o] - rho / t_pref[i];
                let relax = rho * (equilibrium_speed_unchecked(rho, prm) - v) / t_relax[i];
                let exchange = rho_o * (v_o - v) / t_pref[o];
                let w = v + gp[i][j] / g;
                let s_y = exchange + relax + (gp[i][j] + w) * s_rho;
                let rho_new = rho - r * (flux[j][0] - flux[j - 1][0]) + dt * s_rho;
                let y_new = y[i][j] - r * (flux[j][1] - flux[j - 1][1]) + dt * s_y;
                out.rho[i][j] = rho_new;
                out.v[i][j] = y_new / rho_new - self.p(i, rho_new);
            }
        }
        let u = bi.as_array();
        for i in 0..2 {
            out.v[i][0] = out.v[i][1];
            out.rho[i][0] = self.q_star[i] / out.v[i][0];
            out.rho[i][n] = out.rho[i][n - 1];
            out.v[i][n] = match self.outlet {
                Outlet::SpeedLimit => self.v_star[i] + u[i],
                Outlet::ConstantFlux => self.q_star[i] / out.rho[i][n],
            };
        }
        for i in 0..2 {
            for j in 0..=n {
                let (rho, v) = (out.rho[i][j], out.v[i][j]);
                let ok_rho = rho > 1e-6 * self.rho_star[i].min(1.0) && rho < self.rho_cap[i];
                let ok_v = v > 1e-6 && v < 2.0 * prm.v_max;
                if !(ok_rho && ok_v) {
                    return Err(Error::BlowUp {
                        time: t + dt,
                        node: j,
                        detail: format!("lane {i}: rho = {rho:.6e} veh/m, v = {v:.6e} m/s"),
                    });
                }
            }
        }
        Ok(out)
    }
}

/// One step of the nonlinear plant.
pub fn step_nonlinear(
    f: &TrafficField,
    bi: BoundaryInput,
    params: &ModelParams,
    ss: &SteadyState,
    dt: f64,
) -> Result<TrafficField> {
    NonlinearStepper::new(f.grid, params, ss)?.step(f, bi, dt, 0.0)
}

/// Combined relative L2 deviation from the steady state,
/// `sqrt(sum_i mean_x[(rho_i/rho_i* - 1)^2 + (v_i/v_i* - 1)^2])`.
pub fn deviation_norm(f: &TrafficField, ss: &SteadyState) -> f64 {
    let w = f.grid.trapezoid_weights();
    let len = f.grid.length;
    let mut acc = 0.0;
    for i in 0..2 {
        for j in 0..w.len() {
            let dr = f.rho[i][j] / ss.rho_star[i] - 1.0;
            let dv = f.v[i][j] / ss.v_star[i] - 1.0;
            acc += w[j] * (dr * dr + dv * dv);
        }
    }
    (acc / len).sqrt()
}

/// Combined relative L2 distance between two fields, normalized like
/// [`deviation_norm`].
pub fn difference_norm(a: &TrafficField, b: &TrafficField, ss: &SteadyState) -> f64 {
    let w = a.grid.trapezoid_weights();
    let mut acc = 0.0;
    for i in 0..2 {
        for j in 0..w.len() {
            let dr = (a.rho[i][j] - b.rho[i][j]) / ss.rho_star[i];
            let dv = (a.v[i][j] - b.v[i][j]) / ss.v_star[i];
            acc += w[j] * (dr * dr + dv * dv);
        }
    }
    (acc / a.grid.length).sqrt()
}

/// The plant being simulated.
#[derive(Clone, Debug)]
pub enum Plant {
    Linear { stepper: LinearStepper, state: CharField },
    Nonlinear { stepper: NonlinearStepper, state: TrafficField },
}

/// What a controller sees of the plant at the start of a step.
#[derive(Clone, Debug)]
pub struct PlantView {
    pub physical: TrafficField,
    pub chars: CharField,
}

impl Plant {
    pub fn new(
        kind: PlantKind,
        init: &TrafficField,
        params: &ModelParams,
        ss: &SteadyState,
        lc: &LinearCoeffs,
    ) -> Result<Self> {
        init.validate()?;
        Ok(match kind {
            PlantKind::Linearized => Plant::Linear {
                stepper: LinearStepper::new(init.grid, lc)?,
                state: physical_to_characteristic(init, ss, lc)?,
            },
            PlantKind::Nonlinear => Plant::Nonlinear {
                stepper: NonlinearStepper::new(init.grid, params, ss)?,
                state: init.clone(),
            },
        })
    }

    pub fn with_outlet(self, outlet: Outlet) -> Self {
        match self {
            Plant::Linear { stepper, state } => Plant::Linear {
                stepper: stepper.with_outlet(outlet),
                state,
            },
            Plant::Nonlinear { stepper, state } => Plant::Nonlinear {
                stepper: stepper.with_outlet(outlet),
                state,
            },
        }
    }

    pub fn outlet(&self) -> Outlet {
        match self {
            Plant::Linear { stepper, .. } => stepper.outlet,
            Plant::Nonlinear { stepper, .. } => stepper.outlet,
        }
    }

    pub fn kind(&self) -> PlantKind {
        match self {
            Plant::Linear { .. } => PlantKind::Linearized,
            Plant::Nonlinear { .. } => PlantKind::Nonlinear,
        }
    }

    pub fn view(&self, ss: &SteadyState, lc: &LinearCoeffs) -> Result<PlantView> {
        Ok(match self {
            Plant::Linear { state, .. } => PlantView {
                physical: characteristic_to_physical(state, ss, lc)?,
                chars: state.clone(),
            },
            Plant::Nonlinear { state, .. } => PlantView {
                physical: state.clone(),
                chars: physical_to_characteristic(state, ss, lc)?,
            },
        })
    }

    fn step(&mut self, bi: BoundaryInput, dt: f64, t: f64) -> Result<()> {
        match self {
            Plant::Linear { stepper, state } => *state = stepper.step(state, bi, dt, None, t)?,
            Plant::Nonlinear { stepper, state } => *state = stepper.step(state, bi, dt, t)?,
        }
        Ok(())
    }

    fn next_dt(&self, cfg: &SimConfig, lc: &LinearCoeffs) -> Result<f64> {
        match self {
            Plant::Linear { .. } => cfl_dt(&cfg.grid, lc, cfg.cfl),
            // The observer shares the step, so the linear bound applies too.
            Plant::Nonlinear { stepper, state } => {
                speed_dt(cfg.grid.dx(), stepper.max_speed(state).max(lc.max_speed()), cfg.cfl)
            }
        }
    }
}

/// Boundary feedback queried once per step by [`run_closed_loop`].
pub trait Controller {
    /// Command applied over the coming step.
    fn command(&mut self, t: f64, view: &PlantView) -> Result<BoundaryInput>;

    /// Called after the plant step. `held` is the input that was in force at
    /// the start of the step (the outlet value the measurement saw) and
    /// `applied` the command just issued.
    fn advance(&mut self, _dt: f64, _before: &PlantView, _held: BoundaryInput, _applied: BoundaryInput) -> Result<()> {
        Ok(())
    }

    /// Current physical state estimate, if the controller keeps one.
    fn estimate(&self) -> Result<Option<TrafficField>> {
        Ok(None)
    }

    fn saturated_steps(&self) -> usize {
        0
    }
}

/// Zero speed-limit deviation.
pub struct OpenLoop;

impl Controller for OpenLoop {
    fn command(&mut self, _t: f64, _view: &PlantView) -> Result<BoundaryInput> {
        Ok(BoundaryInput::default())
    }
}

/// Time history of a closed-loop run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub grid: Grid,
    pub plant: PlantKind,
    pub scheme: Scheme,
    pub outlet: Outlet,
    /// Snapshot times (s).
    pub times: Vec<f64>,
    pub snapshots: Vec<TrafficField>,
    /// Estimates at snapshot times; empty without an observer.
    pub estimates: Vec<TrafficField>,
    /// Time of every step boundary, starting at 0.
    pub step_times: Vec<f64>,
    /// Deviation norm at every step boundary.
    pub deviation: Vec<f64>,
    /// Estimation error norm at every step boundary; empty without an observer.
    pub estimation_error: Vec<f64>,
    /// Command issued at `step_times[k]`, one per step.
    pub commands: Vec<BoundaryInput>,
    pub saturated_steps: usize,
}

impl Trace {
    pub fn final_snapshot(&self) -> &TrafficField {
        self.snapshots.last().expect("trace holds the initial snapshot")
    }

    pub fn final_time(&self) -> f64 {
        *self.step_times.last().expect("trace holds t = 0")
    }
}

/// Run `plant` under `controller` until `cfg.t_end`.
///
/// Each step: read the plant, ask for a command, advance the plant, then let
/// the controller advance its own state with the measurement taken before
/// the step and the input that was in force during it.
pub fn run_closed_loop(
    mut plant: Plant,
    controller: &mut dyn Controller,
    cfg: &SimConfig,
    ss: &SteadyState,
    lc: &LinearCoeffs,
) -> Result<Trace> {
    cfg.validate()?;
    let kind = plant.kind();
    if cfg.scheme != kind.default_scheme() {
        return Err(Error::invalid(
            "scheme",
            format!("{:?} is not available for the {:?} plant", cfg.scheme, kind),
        ));
    }
    let mut view = plant.view(ss, lc)?;
    view.physical.grid.check_len("plant", cfg.grid.n_nodes())?;
    let n = cfg.grid.n_cells;
    let outlet_speed = |f: &TrafficField| BoundaryInput::new(f.v[0][n] - ss.v_star[0], f.v[1][n] - ss.v_star[1]);
    let mut held = outlet_speed(&view.physical);
    let outlet = plant.outlet();

    let fixed_steps = match kind {
        PlantKind::Linearized => {
            let dt = plant.next_dt(cfg, lc)?;
            Some((cfg.t_end / dt * (1.0 - 1e-12)).ceil().max(1.0) as usize)
        }
        PlantKind::Nonlinear => None,
    };

    let mut trace = Trace {
        grid: cfg.grid,
        plant: kind,
        scheme: cfg.scheme,
        outlet: plant.outlet(),
        times: Vec::new(),
        snapshots: Vec::new(),
        estimates: Vec::new(),
        step_times: vec![0.0],
        deviation: vec![deviation_norm(&view.physical, ss)],
        estimation_error: Vec::new(),
        commands: Vec::new(),
        saturated_steps: 0,
    };
    let record = |trace: &mut Trace, t: f64, view: &PlantView, est: Option<TrafficField>| {
        trace.times.push(t);
        trace.snapshots.push(view.physical.clone());
        if let Some(e) = est {
            trace.estimates.push(e);
        }
    };
    let est0 = controller.estimate()?;
    if let Some(e) = &est0 {
        trace.estimation_error.push(difference_norm(e, &view.physical, ss));
    }
    record(&mut trace, 0.0, &view, est0);

    let mut t = 0.0;
    let mut step = 0usize;
    loop {
        let dt = match fixed_steps {
            Some(total) => {
                if step == total {
                    break;
                }
                cfg.t_end / total as f64
            }
            None => {
                let remaining = cfg.t_end - t;
                if remaining <= 1e-9 * cfg.t_end {
                    break;
                }
                plant.next_dt(cfg, lc)?.min(remaining)
            }
        };
        let cmd = controller.command(t, &view)?;
        plant.step(cmd, dt, t)?;
        let next = plant.view(ss, lc)?;
        // What the outlet actually did over the step: the command under VSL
        // control, the flux-holding speed otherwise.
        let applied = match outlet {
            Outlet::SpeedLimit => cmd,
            Outlet::ConstantFlux => outlet_speed(&next.physical),
        };
        controller.advance(dt, &view, held, applied)?;
        held = applied;
        step += 1;
        t = match fixed_steps {
            Some(total) if step == total => cfg.t_end,
            Some(total) => cfg.t_end * step as f64 / total as f64,
            None => t + dt,
        };
        view = next;
        trace.commands.push(cmd);
        trace.step_times.push(t);
        trace.deviation.push(deviation_norm(&view.physical, ss));
        let est = controller.estimate()?;
        if let Some(e) = &est {
            trace.estimation_error.push(difference_norm(e, &view.physical, ss));
        }
        let last = match fixed_steps {
            Some(total) => step == total,
            None => cfg.t_end - t <= 1e-9 * cfg.t_end,
        };
        if step.is_multiple_of(cfg.record_every) || last {
            record(&mut trace, t, &view, est);
        }
    }
    trace.saturated_steps = controller.saturated_steps();
    Ok(trace)
}
