//! Python bindings: configuration, equilibrium, linearization, kernel
//! residuals and scenario runs.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use twolane::harness::{self, Bounds, Mode, ObserverInit, RunOutput, ScenarioConfig, ScenarioKind};
use twolane::kernels::{control_kernels_cached, observer_kernels_cached};
use twolane::model::{compute_steady_state_with, fundamental_diagram_samples, linearize, SteadyStatus};
use twolane::pde_sim::PlantKind;
use twolane::Grid;

create_exception!(twolane_py, TwolaneError, PyException);

fn to_py(e: twolane::Error) -> PyErr {
    match e.kind() {
        "invalid" | "config" | "domain" => PyValueError::new_err(e.to_string()),
        "io" => PyOSError::new_err(e.to_string()),
        _ => TwolaneError::new_err(e.to_string()),
    }
}

fn parse_enum<T: serde::de::DeserializeOwned>(field: &str, value: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown {field} `{value}`")))
}

fn enum_name<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

/// Resolved run configuration (SI units).
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ScenarioConfig,
}

#[pymethods]
impl PyConfig {
    /// Reference defaults.
    #[new]
    fn new() -> PyResult<Self> {
        Self::from_toml("")
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: harness::parse_config(text).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: harness::load_config(&path).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn mode(&self) -> String {
        enum_name(&self.inner.mode)
    }

    #[setter]
    fn set_mode(&mut self, v: &str) -> PyResult<()> {
        self.inner.mode = parse_enum::<Mode>("mode", v)?;
        Ok(())
    }

    #[getter]
    fn plant(&self) -> String {
        enum_name(&self.inner.plant)
    }

    #[setter]
    fn set_plant(&mut self, v: &str) -> PyResult<()> {
        self.inner.plant = parse_enum::<PlantKind>("plant", v)?;
        self.inner.sim.scheme = self.inner.plant.default_scheme();
        Ok(())
    }

    #[getter]
    fn scenario(&self) -> String {
        enum_name(&self.inner.scenario.kind)
    }

    #[setter]
    fn set_scenario(&mut self, v: &str) -> PyResult<()> {
        self.inner.scenario.kind = parse_enum::<ScenarioKind>("scenario", v)?;
        Ok(())
    }

    #[getter]
    fn observer_init(&self) -> String {
        enum_name(&self.inner.observer_init)
    }

    #[setter]
    fn set_observer_init(&mut self, v: &str) -> PyResult<()> {
        self.inner.observer_init = parse_enum::<ObserverInit>("observer_init", v)?;
        Ok(())
    }

    #[getter]
    fn n_cells(&self) -> usize {
        self.inner.sim.grid.n_cells
    }

    #[setter]
    fn set_n_cells(&mut self, n: usize) -> PyResult<()> {
        self.inner.sim.grid = Grid::new(n, self.inner.model.seg_length).map_err(to_py)?;
        Ok(())
    }

    /// Final time (s).
    #[getter]
    fn t_end(&self) -> f64 {
        self.inner.sim.t_end
    }

    #[setter]
    fn set_t_end(&mut self, t: f64) {
        self.inner.sim.t_end = t;
    }

    #[getter]
    fn cfl(&self) -> f64 {
        self.inner.sim.cfl
    }

    #[setter]
    fn set_cfl(&mut self, c: f64) {
        self.inner.sim.cfl = c;
    }

    #[getter]
    fn amplitude(&self) -> f64 {
        self.inner.scenario.amplitude
    }

    #[setter]
    fn set_amplitude(&mut self, a: f64) {
        self.inner.scenario.amplitude = a;
    }

    #[getter]
    fn kernel_n(&self) -> usize {
        self.inner.kernels.n
    }

    #[setter]
    fn set_kernel_n(&mut self, n: usize) {
        self.inner.kernels.n = n;
    }

    #[getter]
    fn kernel_cache(&self) -> Option<PathBuf> {
        self.inner.kernel_cache.clone()
    }

    #[setter]
    fn set_kernel_cache(&mut self, dir: Option<PathBuf>) {
        self.inner.kernel_cache = dir;
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(mode={:?}, plant={:?}, scenario={:?}, n_cells={}, t_end={})",
            self.mode(),
            self.plant(),
            self.scenario(),
            self.n_cells(),
            self.t_end()
        )
    }
}

/// Uniform equilibrium of both lanes, lane order (slow, fast), SI units.
#[pyclass(name = "SteadyState", frozen)]
struct PySteadyState {
    #[pyo3(get)]
    rho_star: [f64; 2],
    #[pyo3(get)]
    v_star: [f64; 2],
    #[pyo3(get)]
    p_star: [f64; 2],
    #[pyo3(get)]
    q_star: [f64; 2],
    #[pyo3(get)]
    rho_max: [f64; 2],
    #[pyo3(get)]
    congested: bool,
    #[pyo3(get)]
    balance_residuals: [f64; 3],
}

#[pyfunction]
#[pyo3(signature = (config = None))]
fn steady_state(config: Option<PyConfig>) -> PyResult<PySteadyState> {
    let cfg = config.map(|c| c.inner).unwrap_or_default();
    let ss = compute_steady_state_with(&cfg.model, cfg.rho_star_slow, &cfg.steady).map_err(to_py)?;
    Ok(PySteadyState {
        rho_star: ss.rho_star,
        v_star: ss.v_star,
        p_star: ss.p_star,
        q_star: ss.q_star,
        rho_max: ss.rho_max,
        congested: ss.status == SteadyStatus::Congested,
        balance_residuals: ss.balance_residuals(&cfg.model),
    })
}

/// Transport speeds, boundary coefficients and finite-time bounds.
#[pyclass(name = "LinearCoeffs", frozen)]
struct PyLinearCoeffs {
    #[pyo3(get)]
    eps: [f64; 2],
    #[pyo3(get)]
    mu: [f64; 2],
    #[pyo3(get)]
    k: [f64; 2],
    #[pyo3(get)]
    l: [f64; 2],
    #[pyo3(get)]
    a_ww: [[f64; 2]; 2],
    #[pyo3(get)]
    a_wv: [[f64; 2]; 2],
    #[pyo3(get)]
    a_vw: [[f64; 2]; 2],
    #[pyo3(get)]
    a_vv: [[f64; 2]; 2],
    #[pyo3(get)]
    speed_ordering_holds: bool,
    #[pyo3(get)]
    t_f: f64,
    #[pyo3(get)]
    t_o: f64,
    #[pyo3(get)]
    t_out: f64,
}

#[pyfunction]
#[pyo3(signature = (config = None))]
fn linearize_config(config: Option<PyConfig>) -> PyResult<PyLinearCoeffs> {
    let cfg = config.map(|c| c.inner).unwrap_or_default();
    let ss = compute_steady_state_with(&cfg.model, cfg.rho_star_slow, &cfg.steady).map_err(to_py)?;
    let lc = linearize(&cfg.model, &ss).map_err(to_py)?;
    let b = Bounds::new(&lc);
    Ok(PyLinearCoeffs {
        eps: lc.eps,
        mu: lc.mu,
        k: lc.k,
        l: lc.l,
        a_ww: lc.a_ww,
        a_wv: lc.a_wv,
        a_vw: lc.a_vw,
        a_vv: lc.a_vv,
        speed_ordering_holds: lc.speed_ordering_holds(),
        t_f: b.t_f,
        t_o: b.t_o,
        t_out: b.t_out,
    })
}

/// Solve controller and observer kernels and return their residual reports
/// as JSON text.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn kernel_report(py: Python<'_>, config: Option<PyConfig>) -> PyResult<String> {
    let cfg = config.map(|c| c.inner).unwrap_or_default();
    let report = py.detach(|| -> twolane::Result<serde_json::Value> {
        let ss = compute_steady_state_with(&cfg.model, cfg.rho_star_slow, &cfg.steady)?;
        let lc = linearize(&cfg.model, &ss)?;
        let cache = cfg.kernel_cache.as_deref();
        let ks = control_kernels_cached(&lc, &cfg.kernels, cache)?;
        let oks = observer_kernels_cached(&lc, &cfg.kernels, cache)?;
        Ok(serde_json::json!({
            "n": cfg.kernels.n,
            "control": ks.residual,
            "observer": oks.residual,
        }))
    });
    Ok(report.map_err(to_py)?.to_string())
}

/// Result of a scenario run.
#[pyclass(name = "Run", frozen)]
struct PyRun {
    out: RunOutput,
}

#[pymethods]
impl PyRun {
    /// Snapshot times (s).
    #[getter]
    fn times(&self) -> Vec<f64> {
        self.out.trace.times.clone()
    }

    /// Times of the per-step norms (s).
    #[getter]
    fn step_times(&self) -> Vec<f64> {
        self.out.trace.step_times.clone()
    }

    #[getter]
    fn deviation(&self) -> Vec<f64> {
        self.out.trace.deviation.clone()
    }

    #[getter]
    fn estimation_error(&self) -> Vec<f64> {
        self.out.trace.estimation_error.clone()
    }

    /// Outlet commands `(u_slow, u_fast)` per step (m/s).
    #[getter]
    fn commands(&self) -> Vec<(f64, f64)> {
        self.out.trace.commands.iter().map(|c| (c.u_slow, c.u_fast)).collect()
    }

    #[getter]
    fn final_ratio(&self) -> f64 {
        self.out.metrics.final_ratio
    }

    #[getter]
    fn convergence_time(&self) -> Option<f64> {
        self.out.metrics.convergence_time
    }

    #[getter]
    fn x(&self) -> Vec<f64> {
        self.out.trace.grid.nodes()
    }

    /// Fields of snapshot `k` keyed `rho_slow`, `v_slow`, `rho_fast`, `v_fast`.
    fn snapshot<'py>(&self, py: Python<'py>, k: usize) -> PyResult<Bound<'py, PyDict>> {
        let f = self
            .out
            .trace
            .snapshots
            .get(k)
            .ok_or_else(|| PyValueError::new_err(format!("snapshot {k} out of range")))?;
        let d = PyDict::new(py);
        d.set_item("rho_slow", f.rho[0].clone())?;
        d.set_item("v_slow", f.v[0].clone())?;
        d.set_item("rho_fast", f.rho[1].clone())?;
        d.set_item("v_fast", f.v[1].clone())?;
        Ok(d)
    }

    fn metrics_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.out.metrics).map_err(|e| TwolaneError::new_err(e.to_string()))
    }

    /// Write the run directory; returns the written paths.
    fn write(&self, dir: PathBuf) -> PyResult<Vec<PathBuf>> {
        harness::write_trace(&self.out, &dir).map_err(to_py)
    }
}

#[pyfunction]
fn run(py: Python<'_>, config: PyConfig) -> PyResult<PyRun> {
    let cfg = config.inner;
    let out = py.detach(|| harness::run_scenario(&cfg)).map_err(to_py)?;
    Ok(PyRun { out })
}

/// `{name: [(rho, speed, flux), ...]}` for the single-lane reference and both lanes.
#[pyfunction]
#[pyo3(signature = (config = None, samples = 201))]
fn fundamental_diagram<'py>(py: Python<'py>, config: Option<PyConfig>, samples: usize) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.map(|c| c.inner).unwrap_or_default();
    let ss = compute_steady_state_with(&cfg.model, cfg.rho_star_slow, &cfg.steady).map_err(to_py)?;
    let fd = fundamental_diagram_samples(&cfg.model, &ss, samples).map_err(to_py)?;
    let d = PyDict::new(py);
    for (name, s) in [("single", &fd.single), ("slow", &fd.slow), ("fast", &fd.fast)] {
        let rows: Vec<(f64, f64, f64)> = s.iter().map(|p| (p.rho, p.speed, p.flux)).collect();
        d.set_item(name, rows)?;
    }
    Ok(d)
}

#[pymodule]
fn twolane_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("TwolaneError", m.py().get_type::<TwolaneError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PySteadyState>()?;
    m.add_class::<PyLinearCoeffs>()?;
    m.add_class::<PyRun>()?;
    m.add_function(wrap_pyfunction!(steady_state, m)?)?;
    m.add_function(wrap_pyfunction!(linearize_config, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_report, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(fundamental_diagram, m)?)?;
    Ok(())
}
