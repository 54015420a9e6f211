//! Outlet VSL feedback: full-state law, collocated observer and the
//! output-feedback composition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::kernels::{sample_edge, KernelSet, ObserverKernelSet};
use crate::model::{
    characteristic_to_physical, physical_to_characteristic, CharField, Lane, LinearCoeffs, Mat2, SteadyState,
    TrafficField,
};
use crate::pde_sim::{BoundaryInput, Controller, Injection, LinearStepper, PlantView};

/// Commanded outlet speed deviations `U_s`, `U_f` (m/s).
pub type VslCommand = BoundaryInput;

/// Outlet density measurement and its Riemann reconstruction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    /// `rho_i(L) - rho_i*` (veh/m).
    pub y: [f64; 2],
    /// `Y_i = (gamma p_i* / rho_i*) y_i + U_i` (m/s).
    pub yy: [f64; 2],
}

impl Measurement {
    pub fn new(y: [f64; 2], ss: &SteadyState, cmd: VslCommand) -> Self {
        let u = cmd.as_array();
        let yy = std::array::from_fn(|i| ss.riemann_scale(Lane::BOTH[i]) * y[i] + u[i]);
        Self { y, yy }
    }
}

/// Outlet measurement of `f` while `cmd` is the speed deviation in force.
pub fn measure_outlet(f: &TrafficField, ss: &SteadyState, cmd: VslCommand) -> Measurement {
    let n = f.grid.n_cells;
    Measurement::new([f.rho[0][n] - ss.rho_star[0], f.rho[1][n] - ss.rho_star[1]], ss, cmd)
}

/// The backstepping law as quadrature weights on a simulation grid:
/// `U_i = sum_j sum_x (wk_ij(x) w_j(x) + wl_ij(x) vbar_j(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct VslLaw {
    grid: Grid,
    wk: [[Vec<f64>; 2]; 2],
    wl: [[Vec<f64>; 2]; 2],
}

impl VslLaw {
    /// Outlet kernel rows interpolated to `grid` and folded with trapezoid
    /// weights and `1 / l_i`.
    pub fn new(ks: &KernelSet, lc: &LinearCoeffs, grid: Grid) -> Result<Self> {
        if (grid.length - ks.mesh.length).abs() > 1e-9 * grid.length {
            return Err(Error::GridMismatch(format!(
                "kernel mesh length {} differs from grid length {}",
                ks.mesh.length, grid.length
            )));
        }
        let x = grid.nodes();
        let tw = grid.trapezoid_weights();
        let row = |c: usize, i: usize| -> Vec<f64> {
            let edge = ks.outlet_row(c);
            x.iter()
                .zip(&tw)
                .map(|(&x, &w)| w * sample_edge(&edge, ks.mesh.length, x) / lc.l[i])
                .collect()
        };
        Ok(Self {
            grid,
            wk: [[row(0, 0), row(1, 0)], [row(2, 1), row(3, 1)]],
            wl: [[row(4, 0), row(5, 0)], [row(6, 1), row(7, 1)]],
        })
    }

    /// Law with explicit weights; mostly for tests.
    pub fn from_weights(grid: Grid, wk: [[Vec<f64>; 2]; 2], wl: [[Vec<f64>; 2]; 2]) -> Result<Self> {
        for row in wk.iter().chain(&wl) {
            for w in row {
                grid.check_len("law weights", w.len())?;
            }
        }
        Ok(Self { grid, wk, wl })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn apply(&self, c: &CharField) -> Result<VslCommand> {
        for i in 0..2 {
            self.grid.check_len("w", c.w[i].len())?;
            self.grid.check_len("vbar", c.vbar[i].len())?;
        }
        let mut u = [0.0; 2];
        for (i, ui) in u.iter_mut().enumerate() {
            for j in 0..2 {
                *ui += dot(&self.wk[i][j], &c.w[j]) + dot(&self.wl[i][j], &c.vbar[j]);
            }
        }
        Ok(VslCommand::from_array(u))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full-state VSL command for the physical field `f`.
pub fn full_state_vsl(f: &TrafficField, ss: &SteadyState, lc: &LinearCoeffs, law: &VslLaw) -> Result<VslCommand> {
    law.apply(&physical_to_characteristic(f, ss, lc)?)
}

/// Observer estimates of the scaled Riemann variables on the plant grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObserverState {
    pub field: CharField,
}

impl ObserverState {
    /// Estimate sitting at the steady state.
    pub fn steady(grid: Grid) -> Self {
        Self {
            field: CharField::zeros(grid),
        }
    }

    pub fn from_physical(f: &TrafficField, ss: &SteadyState, lc: &LinearCoeffs) -> Result<Self> {
        Ok(Self {
            field: physical_to_characteristic(f, ss, lc)?,
        })
    }
}

/// Collocated observer: a copy of the scaled linear plant driven by the
/// outlet output error through the gains `P`, `Q`.
#[derive(Clone, Debug)]
pub struct Observer {
    stepper: LinearStepper,
    p: Vec<Mat2>,
    q: Vec<Mat2>,
}

impl Observer {
    pub fn new(oks: &ObserverKernelSet, lc: &LinearCoeffs, grid: Grid) -> Result<Self> {
        if (grid.length - oks.mesh.length).abs() > 1e-9 * grid.length {
            return Err(Error::GridMismatch(format!(
                "observer mesh length {} differs from grid length {}",
                oks.mesh.length, grid.length
            )));
        }
        let resample = |gain: &[Mat2]| -> Vec<Mat2> {
            let comp = |a: usize, b: usize| gain.iter().map(|m| m[a][b]).collect::<Vec<_>>();
            let cols = [[comp(0, 0), comp(0, 1)], [comp(1, 0), comp(1, 1)]];
            grid.nodes()
                .iter()
                .map(|&x| std::array::from_fn(|a| std::array::from_fn(|b| sample_edge(&cols[a][b], grid.length, x))))
                .collect()
        };
        Self::with_gains(lc, grid, resample(&oks.p_gain), resample(&oks.q_gain))
    }

    /// Observer with gains already sampled on `grid`.
    pub fn with_gains(lc: &LinearCoeffs, grid: Grid, p: Vec<Mat2>, q: Vec<Mat2>) -> Result<Self> {
        grid.check_len("P gain", p.len())?;
        grid.check_len("Q gain", q.len())?;
        Ok(Self {
            stepper: LinearStepper::new(grid, lc)?,
            p,
            q,
        })
    }

    pub fn grid(&self) -> Grid {
        self.stepper.grid()
    }

    pub fn p_gain(&self) -> &[Mat2] {
        &self.p
    }

    pub fn q_gain(&self) -> &[Mat2] {
        &self.q
    }

    /// One explicit step. `meas` is the outlet measurement at the start of
    /// the step and `cmd` the input applied at the outlet during it.
    pub fn step(&self, est: &ObserverState, meas: &Measurement, cmd: VslCommand, dt: f64, t: f64) -> Result<ObserverState> {
        let n = self.grid().n_cells;
        let error = [meas.yy[0] - est.field.w[0][n], meas.yy[1] - est.field.w[1][n]];
        let inj = Injection {
            p: &self.p,
            q: &self.q,
            error,
        };
        Ok(ObserverState {
            field: self.stepper.step(&est.field, cmd, dt, Some(&inj), t)?,
        })
    }
}

/// One observer step with gains taken from `oks`.
pub fn observer_step(
    est: &ObserverState,
    meas: &Measurement,
    cmd: VslCommand,
    lc: &LinearCoeffs,
    oks: &ObserverKernelSet,
    dt: f64,
) -> Result<ObserverState> {
    Observer::new(oks, lc, est.field.grid)?.step(est, meas, cmd, dt, 0.0)
}

pub fn estimates_to_physical(est: &ObserverState, ss: &SteadyState, lc: &LinearCoeffs) -> Result<TrafficField> {
    characteristic_to_physical(&est.field, ss, lc)
}

/// The full-state law applied to the estimates.
pub fn output_feedback_vsl(est: &ObserverState, law: &VslLaw) -> Result<VslCommand> {
    law.apply(&est.field)
}

/// Symmetric clamp on both commands.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Saturation {
    /// Largest allowed `|U_i|` (m/s).
    pub bound: f64,
}

impl Saturation {
    pub fn new(bound: f64) -> Result<Self> {
        if !(bound.is_finite() && bound > 0.0) {
            return Err(Error::invalid("saturation", format!("bound must be positive, got {bound}")));
        }
        Ok(Self { bound })
    }

    /// Clamped command and whether clamping changed it.
    pub fn apply(&self, cmd: VslCommand) -> (VslCommand, bool) {
        let u = cmd.as_array();
        let c = u.map(|v| v.clamp(-self.bound, self.bound));
        (VslCommand::from_array(c), c != u)
    }
}

fn saturate(sat: Option<Saturation>, cmd: VslCommand, count: &mut usize) -> VslCommand {
    match sat {
        Some(s) => {
            let (c, hit) = s.apply(cmd);
            if hit {
                *count += 1;
            }
            c
        }
        None => cmd,
    }
}

/// Full-state backstepping feedback on the plant's own state.
pub struct FullStateController {
    law: VslLaw,
    saturation: Option<Saturation>,
    saturated: usize,
}

impl FullStateController {
    pub fn new(law: VslLaw, saturation: Option<Saturation>) -> Self {
        Self {
            law,
            saturation,
            saturated: 0,
        }
    }
}

impl Controller for FullStateController {
    fn command(&mut self, _t: f64, view: &PlantView) -> Result<BoundaryInput> {
        let cmd = self.law.apply(&view.chars)?;
        Ok(saturate(self.saturation, cmd, &mut self.saturated))
    }

    fn saturated_steps(&self) -> usize {
        self.saturated
    }
}

/// Additive uniform noise on the density measurement.
#[derive(Clone, Debug)]
pub struct MeasurementNoise {
    /// Half-width of the uniform distribution (veh/m).
    pub amplitude: f64,
    rng: ChaCha8Rng,
}

impl MeasurementNoise {
    pub fn new(amplitude: f64, seed: u64) -> Result<Self> {
        if !(amplitude.is_finite() && amplitude >= 0.0) {
            return Err(Error::invalid("noise", format!("amplitude must be non-negative, got {amplitude}")));
        }
        Ok(Self {
            amplitude,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn perturb(&mut self, y: [f64; 2]) -> [f64; 2] {
        if self.amplitude == 0.0 {
            return y;
        }
        y.map(|v| v + self.rng.gen_range(-self.amplitude..=self.amplitude))
    }
}

/// Observer running alongside the plant, optionally closing the loop through
/// the full-state law on its estimates. Without a law the plant stays open
/// loop and only the estimates are produced.
pub struct ObserverController {
    observer: Observer,
    est: ObserverState,
    law: Option<VslLaw>,
    ss: SteadyState,
    lc: LinearCoeffs,
    saturation: Option<Saturation>,
    noise: Option<MeasurementNoise>,
    saturated: usize,
}

impl ObserverController {
    pub fn new(observer: Observer, init: ObserverState, law: Option<VslLaw>, ss: &SteadyState, lc: &LinearCoeffs) -> Result<Self> {
        let g = observer.grid();
        g.check_len("observer w", init.field.w[0].len())?;
        g.check_len("observer vbar", init.field.vbar[0].len())?;
        if let Some(l) = &law {
            if l.grid() != g {
                return Err(Error::GridMismatch("law and observer grids differ".into()));
            }
        }
        Ok(Self {
            observer,
            est: init,
            law,
            ss: ss.clone(),
            lc: lc.clone(),
            saturation: None,
            noise: None,
            saturated: 0,
        })
    }

    pub fn with_saturation(mut self, sat: Option<Saturation>) -> Self {
        self.saturation = sat;
        self
    }

    pub fn with_noise(mut self, noise: Option<MeasurementNoise>) -> Self {
        self.noise = noise;
        self
    }

    pub fn state(&self) -> &ObserverState {
        &self.est
    }
}

impl Controller for ObserverController {
    fn command(&mut self, _t: f64, _view: &PlantView) -> Result<BoundaryInput> {
        match &self.law {
            Some(law) => {
                let cmd = output_feedback_vsl(&self.est, law)?;
                Ok(saturate(self.saturation, cmd, &mut self.saturated))
            }
            None => Ok(BoundaryInput::default()),
        }
    }

    fn advance(&mut self, dt: f64, before: &PlantView, held: BoundaryInput, applied: BoundaryInput) -> Result<()> {
        let mut meas = measure_outlet(&before.physical, &self.ss, held);
        if let Some(noise) = &mut self.noise {
            meas = Measurement::new(noise.perturb(meas.y), &self.ss, held);
        }
        self.est = self.observer.step(&self.est, &meas, applied, dt, 0.0)?;
        Ok(())
    }

    fn estimate(&self) -> Result<Option<TrafficField>> {
        estimates_to_physical(&self.est, &self.ss, &self.lc).map(Some)
    }

    fn saturated_steps(&self) -> usize {
        self.saturated
    }
}
