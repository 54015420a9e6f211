//! Two-lane Aw-Rascle-Zhang physics.
//!
//! Lane index convention everywhere in the crate: `0` is the slow lane and
//! `1` the fast lane, matching the `(s, f)` ordering of the linearized
//! `(w_s, w_f, v_s, v_f)` system. All quantities are SI (m, s, veh/m).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// m/s per km/h.
pub const KMH: f64 = 1.0 / 3.6;
/// veh/m per veh/km.
pub const PER_KM: f64 = 1.0e-3;

pub type Mat2 = [[f64; 2]; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lane {
    Slow,
    Fast,
}

impl Lane {
    pub const BOTH: [Lane; 2] = [Lane::Slow, Lane::Fast];

    pub fn idx(self) -> usize {
        match self {
            Lane::Slow => 0,
            Lane::Fast => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Lane::Slow => "slow",
            Lane::Fast => "fast",
        }
    }
}

/// Physical constants of the two-lane model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Pressure exponent.
    pub gamma: f64,
    /// Maximum speed (m/s).
    pub v_max: f64,
    /// Equivalent single-lane jam density (veh/m).
    pub rho_max_equiv: f64,
    /// Segment length (m).
    pub seg_length: f64,
    /// Lane-preference times (s).
    pub t_pref_slow: f64,
    pub t_pref_fast: f64,
    /// Relaxation times (s).
    pub t_relax_slow: f64,
    pub t_relax_fast: f64,
}

impl ModelParams {
    /// Reference parameter set of the two-lane experiments.
    ///
    /// The equivalent jam density is not tabulated; 190 veh/km places the
    /// consistent slow-lane equilibrium at 32.2 km/h for 180 veh/km.
    pub fn table1() -> Self {
        Self {
            gamma: 0.8,
            v_max: 144.0 * KMH,
            rho_max_equiv: 190.0 * PER_KM,
            seg_length: 1000.0,
            t_pref_slow: 50.0,
            t_pref_fast: 25.0,
            t_relax_slow: 200.0,
            t_relax_fast: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("gamma", self.gamma),
            ("v_max", self.v_max),
            ("rho_max_equiv", self.rho_max_equiv),
            ("seg_length", self.seg_length),
            ("t_pref_slow", self.t_pref_slow),
            ("t_pref_fast", self.t_pref_fast),
            ("t_relax_slow", self.t_relax_slow),
            ("t_relax_fast", self.t_relax_fast),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::invalid(name, format!("must be positive and finite, got {value}")));
            }
        }
        Ok(())
    }

    pub fn t_pref(&self, lane: Lane) -> f64 {
        match lane {
            Lane::Slow => self.t_pref_slow,
            Lane::Fast => self.t_pref_fast,
        }
    }

    pub fn t_relax(&self, lane: Lane) -> f64 {
        match lane {
            Lane::Slow => self.t_relax_slow,
            Lane::Fast => self.t_relax_fast,
        }
    }

    /// Lane-preference ratio `T_f / T_s`.
    pub fn sigma(&self) -> f64 {
        self.t_pref_fast / self.t_pref_slow
    }
}

/// Traffic pressure `v_m (rho / lane_max)^gamma`.
pub fn pressure(rho: f64, lane_max: f64, params: &ModelParams) -> Result<f64> {
    if !(rho >= 0.0) {
        return Err(Error::Domain(format!("pressure needs rho >= 0, got {rho}")));
    }
    if !(lane_max > 0.0) {
        return Err(Error::Domain(format!("pressure needs lane_max > 0, got {lane_max}")));
    }
    Ok(pressure_unchecked(rho, lane_max, params.gamma, params.v_max))
}

#[inline]
pub(crate) fn pressure_unchecked(rho: f64, lane_max: f64, gamma: f64, v_max: f64) -> f64 {
    v_max * (rho / lane_max).powf(gamma)
}

/// Single-lane Greenshield equilibrium speed `v_m (1 - (rho / rho_m)^gamma)`.
pub fn equilibrium_speed(rho: f64, params: &ModelParams) -> Result<f64> {
    if !(0.0..=params.rho_max_equiv).contains(&rho) {
        return Err(Error::Domain(format!(
            "equilibrium speed needs 0 <= rho <= {}, got {rho}",
            params.rho_max_equiv
        )));
    }
    Ok(equilibrium_speed_unchecked(rho, params))
}

#[inline]
pub(crate) fn equilibrium_speed_unchecked(rho: f64, params: &ModelParams) -> f64 {
    params.v_max * (1.0 - (rho / params.rho_max_equiv).powf(params.gamma))
}

/// Which density normalizes the pressure of each lane.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PressureNorm {
    /// Lane-specific maximum density `rho_i^m`.
    #[default]
    LaneMax,
    /// Shared equivalent jam density `rho_m`.
    Shared,
}

/// How lane maxima are derived from `rho_m` and the ratio coefficients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneMaxRule {
    /// Zero of the lane equilibrium speed: `rho_m * r_i^(-1/gamma)`.
    #[default]
    ZeroOfLaneSpeed,
    /// `rho_m * r_i^(1/gamma)`, kept for comparison with published figures.
    PrintedRoot,
}

/// Tabulated equilibrium used verbatim by [`SteadyMode::AsGiven`] (SI units).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GivenState {
    pub rho_fast: f64,
    pub v_slow: f64,
    pub v_fast: f64,
    pub rho_max_slow: f64,
    pub rho_max_fast: f64,
}

impl GivenState {
    pub fn table1() -> Self {
        Self {
            rho_fast: 80.0 * PER_KM,
            v_slow: 32.0 * KMH,
            v_fast: 40.0 * KMH,
            rho_max_slow: 240.0 * PER_KM,
            rho_max_fast: 150.0 * PER_KM,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SteadyMode {
    /// Derive fast-lane density and both speeds from the balance equations.
    #[default]
    Consistent,
    /// Accept tabulated densities, speeds and lane maxima as they are.
    AsGiven(GivenState),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SteadyOptions {
    pub pressure: PressureNorm,
    pub lane_max: LaneMaxRule,
    pub mode: SteadyMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteadyStatus {
    Congested,
    /// At least one lane has `v* - gamma p* >= 0`; the boundary control
    /// design does not apply.
    NotCongested,
}

/// Lane-specific uniform equilibrium.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub sigma: f64,
    /// Ratio coefficients `[r_s, r_f]`.
    pub r: [f64; 2],
    pub rho_star: [f64; 2],
    pub v_star: [f64; 2],
    pub p_star: [f64; 2],
    pub q_star: [f64; 2],
    /// Lane maxima `rho_i^m`.
    pub rho_max: [f64; 2],
    /// Density normalizing the pressure of each lane.
    pub pressure_ref: [f64; 2],
    /// `-V'(rho*) rho* / (gamma p*)`; weights the relaxation term in the
    /// linearized Riemann coordinates. Exactly 1 for shared normalization.
    pub relax_weight: [f64; 2],
    pub gamma: f64,
    pub status: SteadyStatus,
    /// True when the state was derived from the balance equations.
    pub consistent: bool,
}

impl SteadyState {
    /// `gamma p_i* / rho_i*`, the density weight in the Riemann variable.
    pub fn riemann_scale(&self, lane: Lane) -> f64 {
        let i = lane.idx();
        self.gamma * self.p_star[i] / self.rho_star[i]
    }

    /// Pressure of lane `lane` at density `rho` under this state's normalization.
    pub fn lane_pressure(&self, lane: Lane, rho: f64, params: &ModelParams) -> f64 {
        pressure_unchecked(rho, self.pressure_ref[lane.idx()], params.gamma, params.v_max)
    }

    /// Relative residuals of the three uniform balance equations
    /// (lane exchange, fast-lane momentum, slow-lane momentum).
    pub fn balance_residuals(&self, params: &ModelParams) -> [f64; 3] {
        let [rs, rf] = self.rho_star;
        let [vs, vf] = self.v_star;
        let (ts, tf) = (params.t_pref_slow, params.t_pref_fast);
        let vfe = equilibrium_speed_unchecked(rf, params);
        let vse = equilibrium_speed_unchecked(rs, params);
        let rel = |terms: &[f64]| {
            let sum: f64 = terms.iter().sum();
            let scale: f64 = terms.iter().map(|t| t.abs()).sum();
            if scale == 0.0 {
                0.0
            } else {
                sum.abs() / scale
            }
        };
        [
            rel(&[rs / ts, -rf / tf]),
            rel(&[rs * vs / ts, -rf * vf / tf, rf * (vfe - vf) / params.t_relax_fast]),
            rel(&[rf * vf / tf, -rs * vs / ts, rs * (vse - vs) / params.t_relax_slow]),
        ]
    }
}

/// Ratio coefficients `[r_s, r_f]` of the lane equilibrium speeds.
pub fn ratio_coefficients(params: &ModelParams) -> [f64; 2] {
    let sigma = params.sigma();
    let g = params.gamma;
    let af = params.t_relax_fast / params.t_pref_fast;
    let as_ = params.t_relax_slow / params.t_pref_slow;
    let denom = 1.0 + af + as_;
    let r_f = (1.0 + (1.0 / sigma).powf(g) * af + as_) / denom;
    let r_s = (1.0 + af + as_ * sigma.powf(g)) / denom;
    [r_s, r_f]
}

/// Steady state with the default options (consistent mode, lane-max pressure).
pub fn compute_steady_state(params: &ModelParams, rho_star_slow: f64) -> Result<SteadyState> {
    compute_steady_state_with(params, rho_star_slow, &SteadyOptions::default())
}

pub fn compute_steady_state_with(
    params: &ModelParams,
    rho_star_slow: f64,
    opts: &SteadyOptions,
) -> Result<SteadyState> {
    params.validate()?;
    if !(rho_star_slow.is_finite() && rho_star_slow > 0.0) {
        return Err(Error::invalid("rho_star_slow", format!("must be positive, got {rho_star_slow}")));
    }
    let g = params.gamma;
    let rho_m = params.rho_max_equiv;
    let sigma = params.sigma();
    let r = ratio_coefficients(params);

    let (rho_star, v_star, rho_max) = match &opts.mode {
        SteadyMode::Consistent => {
            let rho_star = [rho_star_slow, sigma * rho_star_slow];
            let v_star = [0, 1].map(|i| params.v_max * (1.0 - r[i] * (rho_star[i] / rho_m).powf(g)));
            let rho_max = [0, 1].map(|i| match opts.lane_max {
                LaneMaxRule::ZeroOfLaneSpeed => rho_m * r[i].powf(-1.0 / g),
                LaneMaxRule::PrintedRoot => rho_m * r[i].powf(1.0 / g),
            });
            (rho_star, v_star, rho_max)
        }
        SteadyMode::AsGiven(given) => (
            [rho_star_slow, given.rho_fast],
            [given.v_slow, given.v_fast],
            [given.rho_max_slow, given.rho_max_fast],
        ),
    };

    for lane in Lane::BOTH {
        let i = lane.idx();
        if !(v_star[i] > 0.0) {
            return Err(Error::Infeasible(format!(
                "{} lane speed v* = {:.6} m/s is not positive (rho* = {:.6} veh/m)",
                lane.name(),
                v_star[i],
                rho_star[i]
            )));
        }
        if !(rho_star[i] > 0.0 && rho_max[i] > 0.0) {
            return Err(Error::Infeasible(format!("{} lane density out of range", lane.name())));
        }
    }

    let pressure_ref = match opts.pressure {
        PressureNorm::LaneMax => rho_max,
        PressureNorm::Shared => [rho_m; 2],
    };
    let p_star = [0, 1].map(|i| pressure_unchecked(rho_star[i], pressure_ref[i], g, params.v_max));
    let relax_weight = match opts.mode {
        SteadyMode::Consistent => {
            [0, 1].map(|i| params.v_max * (rho_star[i] / rho_m).powf(g) / p_star[i])
        }
        SteadyMode::AsGiven(_) => [1.0, 1.0],
    };
    let congested = (0..2).all(|i| v_star[i] - g * p_star[i] < 0.0);

    Ok(SteadyState {
        sigma,
        r,
        rho_star,
        v_star,
        p_star,
        q_star: [rho_star[0] * v_star[0], rho_star[1] * v_star[1]],
        rho_max,
        pressure_ref,
        relax_weight,
        gamma: g,
        status: if congested {
            SteadyStatus::Congested
        } else {
            SteadyStatus::NotCongested
        },
        consistent: matches!(opts.mode, SteadyMode::Consistent),
    })
}

/// Coefficients of the linearized system in Riemann coordinates
/// `(w_s, w_f, v_s, v_f)` and of its spatially scaled form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearCoeffs {
    pub a_ww: Mat2,
    pub a_wv: Mat2,
    pub a_vw: Mat2,
    pub a_vv: Mat2,
    /// Downstream speeds `[v_s*, v_f*]`.
    pub eps: [f64; 2],
    /// Upstream speed magnitudes `[gamma p_s* - v_s*, gamma p_f* - v_f*]`.
    pub mu: [f64; 2],
    /// Inlet reflection coefficients.
    pub k: [f64; 2],
    /// Outlet scaling `exp(a_vv_ii L / mu_i)`.
    pub l: [f64; 2],
    pub length: f64,
}

impl LinearCoeffs {
    /// Exponent rate of the velocity scaling, `a_vv_ii / mu_i`.
    pub fn scale_rate(&self, i: usize) -> f64 {
        self.a_vv[i][i] / self.mu[i]
    }

    /// `exp(a_vv_ii x / mu_i)`; maps `v~_i` to the scaled `v-bar_i`.
    pub fn weight(&self, i: usize, x: f64) -> f64 {
        (self.scale_rate(i) * x).exp()
    }

    pub fn bar_ww(&self) -> Mat2 {
        self.a_ww
    }

    /// Coupling of scaled velocities into the Riemann equations.
    pub fn bar_wv(&self, x: f64) -> Mat2 {
        let e = [self.weight(0, x), self.weight(1, x)];
        let a = &self.a_wv;
        [[a[0][0] / e[0], a[0][1] / e[1]], [a[1][0] / e[0], a[1][1] / e[1]]]
    }

    /// Coupling of Riemann variables into the scaled velocity equations.
    pub fn bar_vw(&self, x: f64) -> Mat2 {
        let e = [self.weight(0, x), self.weight(1, x)];
        let a = &self.a_vw;
        [[e[0] * a[0][0], e[0] * a[0][1]], [e[1] * a[1][0], e[1] * a[1][1]]]
    }

    /// Scaled velocity-velocity coupling; the diagonal vanishes identically.
    pub fn bar_vv(&self, x: f64) -> Mat2 {
        let e = [self.weight(0, x), self.weight(1, x)];
        let a = &self.a_vv;
        [[0.0, a[0][1] * e[0] / e[1]], [a[1][0] * e[1] / e[0], 0.0]]
    }

    /// `-mu_1 < -mu_2 < 0 < eps_1 < eps_2`.
    pub fn speed_ordering_holds(&self) -> bool {
        -self.mu[0] < -self.mu[1] && -self.mu[1] < 0.0 && 0.0 < self.eps[0] && self.eps[0] < self.eps[1]
    }

    /// Largest characteristic speed magnitude.
    pub fn max_speed(&self) -> f64 {
        self.eps
            .iter()
            .chain(self.mu.iter())
            .fold(0.0_f64, |m, s| m.max(s.abs()))
    }
}

/// Linearize around a congested steady state.
pub fn linearize(params: &ModelParams, ss: &SteadyState) -> Result<LinearCoeffs> {
    if ss.status != SteadyStatus::Congested {
        return Err(Error::NotCongested(format!(
            "v* - gamma p* = [{:.4}, {:.4}] m/s must be negative in both lanes",
            ss.v_star[0] - ss.gamma * ss.p_star[0],
            ss.v_star[1] - ss.gamma * ss.p_star[1]
        )));
    }
    let lc = coefficients(params, ss);
    if !lc.speed_ordering_holds() {
        return Err(Error::Domain(format!(
            "characteristic speeds violate -mu1 < -mu2 < 0 < eps1 < eps2: eps = {:?}, mu = {:?}",
            lc.eps, lc.mu
        )));
    }
    Ok(lc)
}

fn coefficients(params: &ModelParams, ss: &SteadyState) -> LinearCoeffs {
    let [vs, vf] = ss.v_star;
    let gs = ss.gamma * ss.p_star[0];
    let gf = ss.gamma * ss.p_star[1];
    let [ks, kf] = ss.relax_weight;
    let (ts, tf) = (params.t_pref_slow, params.t_pref_fast);
    let (tse, tfe) = (params.t_relax_slow, params.t_relax_fast);
    let dv = vf - vs;
    let mu = [gs - vs, gf - vf];

    let a_ww = [
        [-ks / tse - (dv + gs) / (ts * gs), (dv + gs) / (ts * gf)],
        [(gf - dv) / (tf * gs), -kf / tfe - (gf - dv) / (tf * gf)],
    ];
    let a_wv = [
        [dv / (ts * gs) + (ks - 1.0) / tse, -(mu[0] - mu[1]) / (ts * gf)],
        [-(mu[1] - mu[0]) / (tf * gs), -dv / (tf * gf) + (kf - 1.0) / tfe],
    ];
    let a_vw = [
        [-ks / tse - dv / (ts * gs), dv / (ts * gf)],
        [-dv / (tf * gs), -kf / tfe + dv / (tf * gf)],
    ];
    let a_vv = [
        [(dv - gs) / (ts * gs) + (ks - 1.0) / tse, (gf - dv) / (ts * gf)],
        [(dv + gs) / (tf * gs), -(dv + gf) / (tf * gf) + (kf - 1.0) / tfe],
    ];

    let eps = [vs, vf];
    let k = [-mu[0] / vs, -mu[1] / vf];
    let length = params.seg_length;
    let l = [(a_vv[0][0] / mu[0] * length).exp(), (a_vv[1][1] / mu[1] * length).exp()];
    LinearCoeffs {
        a_ww,
        a_wv,
        a_vw,
        a_vv,
        eps,
        mu,
        k,
        l,
        length,
    }
}

/// Densities and speeds of both lanes on a node grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficField {
    pub grid: Grid,
    pub rho: [Vec<f64>; 2],
    pub v: [Vec<f64>; 2],
}

impl TrafficField {
    pub fn steady(grid: Grid, ss: &SteadyState) -> Self {
        let n = grid.n_nodes();
        Self {
            grid,
            rho: [vec![ss.rho_star[0]; n], vec![ss.rho_star[1]; n]],
            v: [vec![ss.v_star[0]; n], vec![ss.v_star[1]; n]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..2 {
            self.grid.check_len("density", self.rho[i].len())?;
            self.grid.check_len("speed", self.v[i].len())?;
        }
        for lane in Lane::BOTH {
            let i = lane.idx();
            for (j, (&r, &v)) in self.rho[i].iter().zip(&self.v[i]).enumerate() {
                if !(r.is_finite() && r > 0.0 && v.is_finite() && v > 0.0) {
                    return Err(Error::Domain(format!(
                        "{} lane node {j}: rho = {r}, v = {v} must be positive and finite",
                        lane.name()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Riemann variables `w~_i` and scaled velocity deviations `v-bar_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharField {
    pub grid: Grid,
    pub w: [Vec<f64>; 2],
    pub vbar: [Vec<f64>; 2],
}

impl CharField {
    pub fn zeros(grid: Grid) -> Self {
        let n = grid.n_nodes();
        Self {
            grid,
            w: [vec![0.0; n], vec![0.0; n]],
            vbar: [vec![0.0; n], vec![0.0; n]],
        }
    }
}

fn check_length(grid: &Grid, lc: &LinearCoeffs) -> Result<()> {
    if (grid.length - lc.length).abs() > 1e-9 * lc.length {
        return Err(Error::GridMismatch(format!(
            "grid length {} differs from segment length {}",
            grid.length, lc.length
        )));
    }
    Ok(())
}

pub fn physical_to_characteristic(f: &TrafficField, ss: &SteadyState, lc: &LinearCoeffs) -> Result<CharField> {
    check_length(&f.grid, lc)?;
    for i in 0..2 {
        f.grid.check_len("density", f.rho[i].len())?;
        f.grid.check_len("speed", f.v[i].len())?;
    }
    let x = f.grid.nodes();
    let mut out = CharField::zeros(f.grid);
    for lane in Lane::BOTH {
        let i = lane.idx();
        let scale = ss.riemann_scale(lane);
        let rate = lc.scale_rate(i);
        for j in 0..x.len() {
            let dv = f.v[i][j] - ss.v_star[i];
            out.w[i][j] = scale * (f.rho[i][j] - ss.rho_star[i]) + dv;
            out.vbar[i][j] = (rate * x[j]).exp() * dv;
        }
    }
    Ok(out)
}

pub fn characteristic_to_physical(c: &CharField, ss: &SteadyState, lc: &LinearCoeffs) -> Result<TrafficField> {
    check_length(&c.grid, lc)?;
    for i in 0..2 {
        c.grid.check_len("w", c.w[i].len())?;
        c.grid.check_len("vbar", c.vbar[i].len())?;
    }
    let x = c.grid.nodes();
    let mut out = TrafficField::steady(c.grid, ss);
    for lane in Lane::BOTH {
        let i = lane.idx();
        let inv_scale = 1.0 / ss.riemann_scale(lane);
        let rate = lc.scale_rate(i);
        for j in 0..x.len() {
            let dv = (-rate * x[j]).exp() * c.vbar[i][j];
            out.rho[i][j] = ss.rho_star[i] + inv_scale * (c.w[i][j] - dv);
            out.v[i][j] = ss.v_star[i] + dv;
        }
    }
    Ok(out)
}

/// One sample of a fundamental diagram.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdSample {
    pub rho: f64,
    pub speed: f64,
    pub flux: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FundamentalDiagram {
    pub single: Vec<FdSample>,
    pub slow: Vec<FdSample>,
    pub fast: Vec<FdSample>,
}

/// Speed-density and flux-density curves of the single-lane reference and
/// of both lanes, `V_i(rho) = v_m (1 - r_i (rho / rho_m)^gamma)`.
pub fn fundamental_diagram_samples(params: &ModelParams, ss: &SteadyState, n: usize) -> Result<FundamentalDiagram> {
    if n < 2 {
        return Err(Error::invalid("n", "need at least 2 samples"));
    }
    let curve = |r: f64, rho_end: f64| -> Vec<FdSample> {
        (0..n)
            .map(|k| {
                let rho = if k == n - 1 {
                    rho_end
                } else {
                    rho_end * k as f64 / (n - 1) as f64
                };
                let speed = params.v_max * (1.0 - r * (rho / params.rho_max_equiv).powf(params.gamma));
                FdSample {
                    rho,
                    speed,
                    flux: rho * speed,
                }
            })
            .collect()
    };
    Ok(FundamentalDiagram {
        single: curve(1.0, params.rho_max_equiv),
        slow: curve(ss.r[0], ss.rho_max[0]),
        fast: curve(ss.r[1], ss.rho_max[1]),
    })
}
