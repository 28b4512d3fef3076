//! Python bindings: scenario configs, the MES loop, single episodes, the
//! estimator laws, manipulator dynamics and the Lyapunov certificate.

use nalgebra::{DMatrix, Matrix2, Vector2};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use es_adapt::estimator::{end_of_cycle, mes_continuous_derivative, MesConfig, MesState, MesVariant};
use es_adapt::linearizer::{build_error_dynamics, ControllerGains};
use es_adapt::manipulator::{coriolis_matrix, gravity_vector, inertia_matrix, ManipulatorParams};
use es_adapt::scenario::{parse_config, render_config, ConfigError, ScenarioPreset};
use es_adapt::sim::{run_episode as core_run_episode, run_mes_loop as core_run_mes_loop, EpisodeTrace, MesRun, SimConfig, SimError};
use es_adapt::validation::run_validation;

fn config_err(e: ConfigError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn sim_err(e: SimError) -> PyErr {
    if e.is_config_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn rows2(m: &Matrix2<f64>) -> Vec<Vec<f64>> {
    (0..2).map(|i| vec![m[(i, 0)], m[(i, 1)]]).collect()
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn vec2(v: [f64; 2]) -> Vector2<f64> {
    Vector2::new(v[0], v[1])
}

fn parse_variant(name: &str) -> PyResult<MesVariant> {
    Ok(match name {
        "discrete_mes" => MesVariant::DiscreteMes,
        "discrete_dynamic" => MesVariant::DiscreteDynamic,
        "continuous_mes" => MesVariant::ContinuousMes,
        "continuous_dynamic" => MesVariant::ContinuousDynamic,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown variant `{other}` (discrete_mes, discrete_dynamic, continuous_mes, continuous_dynamic)"
            )))
        }
    })
}

/// Two-link arm parameters; defaults are the benchmark arm.
#[pyclass(name = "ManipulatorParams", module = "es_adapt_py", from_py_object)]
#[derive(Clone)]
struct PyManipulatorParams {
    inner: ManipulatorParams,
}

#[pymethods]
impl PyManipulatorParams {
    #[new]
    #[pyo3(signature = (m1=10.0, m2=5.0, l1=1.0, l2=1.0, lc1=0.5, lc2=0.5, i1=10.0/12.0, i2=5.0/12.0, g=9.8))]
    #[allow(clippy::too_many_arguments)]
    fn new(m1: f64, m2: f64, l1: f64, l2: f64, lc1: f64, lc2: f64, i1: f64, i2: f64, g: f64) -> PyResult<Self> {
        let inner = ManipulatorParams {
            m1,
            m2,
            l1,
            l2,
            lc1,
            lc2,
            i1,
            i2,
            g,
        };
        inner.validate().map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    fn inertia_matrix(&self, q: [f64; 2]) -> Vec<Vec<f64>> {
        rows2(&inertia_matrix(&self.inner, &vec2(q)))
    }

    fn coriolis_matrix(&self, q: [f64; 2], qdot: [f64; 2]) -> Vec<Vec<f64>> {
        rows2(&coriolis_matrix(&self.inner, &vec2(q), &vec2(qdot)))
    }

    fn gravity_vector(&self, q: [f64; 2]) -> [f64; 2] {
        let g = gravity_vector(&self.inner, &vec2(q));
        [g[0], g[1]]
    }

    fn __repr__(&self) -> String {
        format!("ManipulatorParams({:?})", self.inner)
    }
}

/// Fully resolved scenario configuration.
#[pyclass(name = "SimConfig", module = "es_adapt_py", from_py_object)]
#[derive(Clone)]
struct PySimConfig {
    inner: SimConfig,
}

#[pymethods]
impl PySimConfig {
    /// Preset, optionally with a TOML document and `section.key=value` overrides merged on top.
    #[staticmethod]
    #[pyo3(signature = (name, overrides=Vec::new(), document=None))]
    fn preset(name: &str, overrides: Vec<String>, document: Option<&str>) -> PyResult<Self> {
        let preset: ScenarioPreset = name.parse().map_err(config_err)?;
        let inner = parse_config(preset, document, &overrides).map_err(config_err)?;
        Ok(Self { inner })
    }

    /// Copy with further overrides applied.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        let inner = parse_config(ScenarioPreset::Nominal, Some(&render_config(&self.inner)), &overrides).map_err(config_err)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> String {
        render_config(&self.inner)
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.sim.dt
    }

    #[getter]
    fn t_f(&self) -> f64 {
        self.inner.sim.t_f
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.sim.iterations
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    #[getter]
    fn plant(&self) -> PyManipulatorParams {
        PyManipulatorParams { inner: self.inner.plant }
    }

    fn __repr__(&self) -> String {
        format!(
            "SimConfig(dt={}, t_f={}, iterations={}, channels={})",
            self.inner.sim.dt,
            self.inner.sim.t_f,
            self.inner.sim.iterations,
            self.inner.channels()
        )
    }
}

fn trace_dict<'py>(py: Python<'py>, trace: &EpisodeTrace) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    let col = |f: &dyn Fn(usize) -> f64| (0..trace.len()).map(f).collect::<Vec<f64>>();
    d.set_item("t", trace.t.clone())?;
    for j in 0..2 {
        let n = j + 1;
        d.set_item(format!("q{n}"), col(&|i| trace.q[i][j]))?;
        d.set_item(format!("qdot{n}"), col(&|i| trace.qdot[i][j]))?;
        d.set_item(format!("qd{n}"), col(&|i| trace.qd[i][j]))?;
        d.set_item(format!("qdot_d{n}"), col(&|i| trace.qdot_d[i][j]))?;
        d.set_item(format!("qddot_d{n}"), col(&|i| trace.qddot_d[i][j]))?;
        d.set_item(format!("tau{n}"), col(&|i| trace.tau[i][j]))?;
    }
    d.set_item("z_norm", trace.z_norm.clone())?;
    Ok(d)
}

/// Result of an MES run.
#[pyclass(name = "MesRun", module = "es_adapt_py")]
struct PyMesRun {
    inner: MesRun,
}

#[pymethods]
impl PyMesRun {
    /// Cost of every iteration.
    #[getter]
    fn costs(&self) -> Vec<f64> {
        self.inner.records.iter().map(|r| r.j).collect()
    }

    /// Estimate in effect during every iteration.
    #[getter]
    fn estimates(&self) -> Vec<Vec<f64>> {
        self.inner.records.iter().map(|r| r.delta_hat.clone()).collect()
    }

    /// Cycle-averaged true parameters of every iteration.
    #[getter]
    fn truths(&self) -> Vec<Vec<f64>> {
        self.inner.records.iter().map(|r| r.delta_true.clone()).collect()
    }

    #[getter]
    fn max_z(&self) -> Vec<f64> {
        self.inner.records.iter().map(|r| r.max_z).collect()
    }

    /// Estimate after the last update.
    #[getter]
    fn final_delta_hat(&self) -> Vec<f64> {
        self.inner.final_state.delta_hat.clone()
    }

    fn first_trace<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        trace_dict(py, &self.inner.first_trace)
    }

    fn last_trace<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        trace_dict(py, &self.inner.last_trace)
    }

    fn __len__(&self) -> usize {
        self.inner.records.len()
    }
}

/// Runs the outer MES iteration.
#[pyfunction]
fn run_mes_loop(py: Python<'_>, config: PySimConfig) -> PyResult<PyMesRun> {
    let inner = py.detach(|| core_run_mes_loop(&config.inner)).map_err(sim_err)?;
    Ok(PyMesRun { inner })
}

/// One tracking cycle with a frozen estimate; returns the trace as columns.
#[pyfunction]
#[pyo3(signature = (config, delta_hat, cycle=0))]
fn run_episode<'py>(py: Python<'py>, config: PySimConfig, delta_hat: Vec<f64>, cycle: usize) -> PyResult<Bound<'py, PyDict>> {
    let trace = py
        .detach(|| core_run_episode(&config.inner, &delta_hat, cycle))
        .map_err(sim_err)?;
    trace_dict(py, &trace)
}

#[pyclass(name = "MesState", module = "es_adapt_py", from_py_object)]
#[derive(Clone)]
struct PyMesState {
    inner: MesState,
}

#[pymethods]
impl PyMesState {
    #[getter]
    fn x(&self) -> Vec<f64> {
        self.inner.x.clone()
    }

    #[getter]
    fn delta_hat(&self) -> Vec<f64> {
        self.inner.delta_hat.clone()
    }

    #[getter]
    fn k(&self) -> u64 {
        self.inner.k
    }

    fn __repr__(&self) -> String {
        format!("MesState(k={}, delta_hat={:?})", self.inner.k, self.inner.delta_hat)
    }
}

/// Multiparametric extremum-seeking estimator; steps are pure.
#[pyclass(name = "MesEstimator", module = "es_adapt_py")]
struct PyMesEstimator {
    inner: MesConfig,
}

#[pymethods]
impl PyMesEstimator {
    #[new]
    #[pyo3(signature = (amplitudes, frequencies, gains, t_f, variant="discrete_mes", phase_aligned=false))]
    fn new(
        amplitudes: Vec<f64>,
        frequencies: Vec<f64>,
        gains: Vec<f64>,
        t_f: f64,
        variant: &str,
        phase_aligned: bool,
    ) -> PyResult<Self> {
        let inner = MesConfig::new(amplitudes, frequencies, gains, t_f, parse_variant(variant)?)
            .map_err(|e| PyValueError::new_err(e.to_string()))?
            .with_phase_alignment(phase_aligned);
        Ok(Self { inner })
    }

    fn initial_state(&self) -> PyMesState {
        PyMesState {
            inner: MesState::zeros(self.inner.channels()),
        }
    }

    /// End-of-cycle update with measured cost `j`.
    fn step(&self, state: PyMesState, j: f64) -> PyResult<PyMesState> {
        let inner = end_of_cycle(&state.inner, &self.inner, j).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyMesState { inner })
    }

    /// Time derivative of the continuous laws at the state's time.
    fn derivative(&self, state: PyMesState, j: f64) -> PyResult<Vec<f64>> {
        mes_continuous_derivative(&state.inner, &self.inner, j).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }
}

/// `P` solving `ÃᵀP + PÃ = −I` for the given per-output gains, with `Ã`, `B̃` and the residual.
#[pyfunction]
fn lyapunov_certificate<'py>(py: Python<'py>, gains: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
    let gains = ControllerGains::new(gains).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let dynamics = build_error_dynamics(&gains, &gains.relative_degrees()).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let d = PyDict::new(py);
    d.set_item("p", rows(&dynamics.p))?;
    d.set_item("a_tilde", rows(&dynamics.a_tilde))?;
    d.set_item("b_tilde", rows(&dynamics.b_tilde))?;
    d.set_item("residual", dynamics.lyapunov_residual())?;
    Ok(d)
}

/// Runs the invariant suite; returns `(all_passed, report_text)`.
#[pyfunction]
#[pyo3(signature = (gains=None))]
fn validate(py: Python<'_>, gains: Option<Vec<Vec<f64>>>) -> (bool, String) {
    let gains = gains.unwrap_or_else(|| vec![vec![1.0, 1.0], vec![1.0, 1.0]]);
    let report = py.detach(|| run_validation(&gains, &ManipulatorParams::default()));
    (report.all_passed(), report.to_string())
}

/// `(name, source)` of every preset.
#[pyfunction]
fn presets() -> Vec<(&'static str, &'static str)> {
    ScenarioPreset::ALL.iter().map(|p| (p.name(), p.citation())).collect()
}

#[pymodule]
fn es_adapt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyManipulatorParams>()?;
    m.add_class::<PySimConfig>()?;
    m.add_class::<PyMesRun>()?;
    m.add_class::<PyMesState>()?;
    m.add_class::<PyMesEstimator>()?;
    m.add_function(wrap_pyfunction!(run_mes_loop, m)?)?;
    m.add_function(wrap_pyfunction!(run_episode, m)?)?;
    m.add_function(wrap_pyfunction!(lyapunov_certificate, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    Ok(())
}
