//! Python bindings: interactions, model training and persistence, the
//! phase filter, closed-loop replay, the synthetic generator and the
//! file-based pipeline commands.

use std::path::PathBuf;

use bipkit::basis::BasisConfig;
use bipkit::commands;
use bipkit::config::RunConfig;
use bipkit::eval::{time_to_completion, SettleThresholds};
use bipkit::filter::{step, update, FilterState, NoiseConfig};
use bipkit::interaction::{load_interaction, save_interaction, DofLayout, PartialObservation};
use bipkit::model::Model;
use bipkit::prior::learn_prior;
use bipkit::response::{replay, LoopConfig};
use bipkit::simgen::{gen_demo_set, gen_static, gen_test, Scene, SpeedClass};
use bipkit::Error;
use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::{PyArithmeticError, PyException, PyValueError};
use pyo3::prelude::*;

create_exception!(bipkit_py, DataError, PyException, "Malformed or insufficient input data.");

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(m) => PyValueError::new_err(m),
        Error::Numerical(m) => PyArithmeticError::new_err(m),
        other => DataError::new_err(other.to_string()),
    }
}

fn speed(name: &str) -> PyResult<SpeedClass> {
    SpeedClass::ALL
        .into_iter()
        .find(|c| c.tag() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown speed {name:?}; use slow, normal, fast or none")))
}

fn scene(observed: usize, controlled: usize) -> PyResult<Scene> {
    Scene::new(observed, controlled).map_err(to_py)
}

fn run_config(config_toml: Option<&str>, seed: Option<u64>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::from_toml(config_toml.unwrap_or("")).map_err(to_py)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// A `D × T` recording; rows are DoFs, observed first.
#[pyclass(name = "Interaction", module = "bipkit_py", skip_from_py_object)]
#[derive(Clone)]
struct PyInteraction {
    inner: bipkit::interaction::Interaction,
}

#[pymethods]
impl PyInteraction {
    #[new]
    #[pyo3(signature = (rows, sample_rate, observed))]
    fn new(rows: Vec<Vec<f64>>, sample_rate: f64, observed: usize) -> PyResult<Self> {
        let d = rows.len();
        let t = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != t) {
            return Err(PyValueError::new_err("rows must have equal length"));
        }
        if observed == 0 || observed >= d {
            return Err(PyValueError::new_err("need at least one observed and one controlled DoF"));
        }
        let layout = DofLayout::generic(observed, d - observed).map_err(to_py)?;
        let data = DMatrix::from_fn(d, t, |i, j| rows[i][j]);
        let inner = bipkit::interaction::Interaction::new(data, sample_rate, layout).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_interaction(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_interaction(&self.inner, path).map_err(to_py)
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.inner.layout().dof_count()).map(|d| self.inner.dof(d)).collect()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.data().shape()
    }

    #[getter]
    fn sample_rate(&self) -> f64 {
        self.inner.sample_rate()
    }

    #[getter]
    fn observed(&self) -> usize {
        self.inner.layout().observed_count()
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.inner.layout().names().to_vec()
    }

    /// Fraction of the run before it settles for good.
    #[pyo3(signature = (window_s = 2.0))]
    fn completion_ratio(&self, window_s: f64) -> PyResult<f64> {
        Ok(time_to_completion(&self.inner, window_s, SettleThresholds::default())
            .map_err(to_py)?
            .ratio)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        let (d, t) = self.shape();
        format!("Interaction(dofs={d}, samples={t}, rate={})", self.inner.sample_rate())
    }
}

/// `(tick, phase, phase_vel, var_phase, var_phase_vel)` per sample.
type Trace = Vec<(usize, f64, f64, f64, f64)>;

/// Trained prior together with its filter noise.
#[pyclass(name = "Model", module = "bipkit_py", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (demos, basis = 15, width_factor = 1.5))]
    fn train(demos: Vec<PyRef<'_, PyInteraction>>, basis: usize, width_factor: f64) -> PyResult<Self> {
        let demos: Vec<_> = demos.iter().map(|d| d.inner.clone()).collect();
        let dofs = demos.first().map_or(0, |d| d.layout().dof_count());
        let cfg = BasisConfig::uniform_with_width(basis, width_factor).map_err(to_py)?;
        let prior = learn_prior(&demos, &vec![cfg; dofs]).map_err(to_py)?;
        let noise = NoiseConfig::from_ranges(&prior.dof_ranges);
        Ok(Self {
            inner: Model::new(prior, noise).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Model::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn weight_dim(&self) -> usize {
        self.inner.prior.weight_dim()
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.prior.state_dim()
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.inner.prior.layout.names().to_vec()
    }

    #[getter]
    fn phase_velocity(&self) -> f64 {
        self.inner.prior.phase_vel0
    }

    /// Runs the observed rows of `recording` through the closed loop.
    /// Returns the executed interaction and one
    /// `(tick, phase, phase_vel, var_phase, var_phase_vel)` tuple per sample.
    fn replay(&self, recording: &PyInteraction) -> PyResult<(PyInteraction, Trace)> {
        let out = replay(&self.inner.prior, &self.inner.noise, &recording.inner, &LoopConfig::default())
            .map_err(to_py)?;
        let trace = out
            .trace
            .iter()
            .map(|s| (s.tick, s.phase, s.phase_vel, s.var_phase, s.var_phase_vel))
            .collect();
        Ok((PyInteraction { inner: out.executed }, trace))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(dofs={}, weights={})",
            self.inner.prior.layout.dof_count(),
            self.weight_dim()
        )
    }
}

/// Running phase and weight estimate for one interaction.
#[pyclass(name = "PhaseFilter", module = "bipkit_py")]
struct PyPhaseFilter {
    model: Model,
    state: FilterState,
    ticks: usize,
}

#[pymethods]
impl PyPhaseFilter {
    #[new]
    fn new(model: &PyModel) -> Self {
        Self {
            state: FilterState::from_prior(&model.inner.prior),
            model: model.inner.clone(),
            ticks: 0,
        }
    }

    /// Consumes one sample of all DoFs. `mask` marks the entries that were
    /// measured; by default only the observed DoFs are.
    #[pyo3(signature = (values, mask = None))]
    fn observe(&mut self, values: Vec<f64>, mask: Option<Vec<bool>>) -> PyResult<(f64, f64)> {
        let p = &self.model.prior;
        let values = DVector::from_vec(values);
        let obs = match mask {
            Some(m) => PartialObservation::new(values, m),
            None => PartialObservation::observed_only(values, &p.layout),
        }
        .map_err(to_py)?;
        let noise = &self.model.noise;
        self.state = if self.ticks == 0 {
            update(&self.state, &obs, noise, &p.basis, &p.layout)
        } else {
            step(&self.state, &obs, noise, &p.basis, &p.layout)
        }
        .map_err(to_py)?;
        self.ticks += 1;
        Ok((self.state.phase(), self.state.phase_velocity()))
    }

    #[getter]
    fn phase(&self) -> f64 {
        self.state.phase()
    }

    #[getter]
    fn phase_velocity(&self) -> f64 {
        self.state.phase_velocity()
    }

    #[getter]
    fn phase_variance(&self) -> f64 {
        self.state.phase_variance()
    }

    #[getter]
    fn ticks(&self) -> usize {
        self.ticks
    }

    fn weights(&self) -> Vec<f64> {
        self.state.weights().iter().copied().collect()
    }

    fn covariance(&self) -> Vec<Vec<f64>> {
        self.state.cov.row_iter().map(|r| r.iter().copied().collect()).collect()
    }
}

/// `n` synthetic demonstrations of the handshake scene.
#[pyfunction]
#[pyo3(signature = (n, seed, observed = 3, controlled = 5))]
fn generate_demos(n: usize, seed: u64, observed: usize, controlled: usize) -> PyResult<Vec<PyInteraction>> {
    Ok(gen_demo_set(&scene(observed, controlled)?, n, seed)
        .map_err(to_py)?
        .into_iter()
        .map(|g| PyInteraction { inner: g.interaction })
        .collect())
}

/// A test recording plus its true phase per sample.
#[pyfunction]
#[pyo3(signature = (speed_class, seed, observed = 3, controlled = 5, pause_ticks = 0))]
fn generate_test(
    speed_class: &str,
    seed: u64,
    observed: usize,
    controlled: usize,
    pause_ticks: usize,
) -> PyResult<(PyInteraction, Vec<f64>)> {
    let g = gen_test(&scene(observed, controlled)?, speed(speed_class)?, pause_ticks, seed).map_err(to_py)?;
    Ok((PyInteraction { inner: g.interaction }, g.truth_phase))
}

/// Open-loop control run: a fixed robot trajectory and a late partner.
#[pyfunction]
#[pyo3(signature = (seed, observed = 3, controlled = 5))]
fn generate_static(seed: u64, observed: usize, controlled: usize) -> PyResult<PyInteraction> {
    let mut inner = gen_static(&scene(observed, controlled)?, seed).map_err(to_py)?.interaction;
    inner.executed = true;
    Ok(PyInteraction { inner })
}

/// Writes demos, tests and static runs under `out_dir`.
#[pyfunction]
#[pyo3(signature = (out_dir, config_toml = None, seed = None))]
fn simulate(out_dir: PathBuf, config_toml: Option<&str>, seed: Option<u64>) -> PyResult<(usize, usize, usize)> {
    let s = commands::simulate(&run_config(config_toml, seed)?, &out_dir).map_err(to_py)?;
    Ok((s.demos, s.tests, s.statics))
}

/// Trains on every interaction file in `demo_dir`; returns the model path.
#[pyfunction]
#[pyo3(signature = (demo_dir, out_dir, config_toml = None))]
fn train(demo_dir: PathBuf, out_dir: PathBuf, config_toml: Option<&str>) -> PyResult<PathBuf> {
    Ok(commands::train(&demo_dir, &run_config(config_toml, None)?, &out_dir)
        .map_err(to_py)?
        .model_path)
}

/// Replays recordings through a saved model; returns each run's name and
/// terminal phase.
#[pyfunction]
#[pyo3(signature = (model_path, inputs, out_dir, config_toml = None))]
fn infer(
    model_path: PathBuf,
    inputs: Vec<PathBuf>,
    out_dir: PathBuf,
    config_toml: Option<&str>,
) -> PyResult<Vec<(String, f64)>> {
    Ok(commands::infer(&model_path, &inputs, &run_config(config_toml, None)?, &out_dir)
        .map_err(to_py)?
        .into_iter()
        .map(|s| (s.name, s.terminal.phase))
        .collect())
}

/// Writes the report files and returns the JSON report.
#[pyfunction]
#[pyo3(signature = (model_path, run_dirs, out_dir, config_toml = None))]
fn evaluate(
    model_path: PathBuf,
    run_dirs: Vec<PathBuf>,
    out_dir: PathBuf,
    config_toml: Option<&str>,
) -> PyResult<String> {
    Ok(commands::eval(&model_path, &run_dirs, &run_config(config_toml, None)?, &out_dir)
        .map_err(to_py)?
        .to_json())
}

#[pymodule]
fn bipkit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyInteraction>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyPhaseFilter>()?;
    m.add("DataError", m.py().get_type::<DataError>())?;
    m.add_function(wrap_pyfunction!(generate_demos, m)?)?;
    m.add_function(wrap_pyfunction!(generate_test, m)?)?;
    m.add_function(wrap_pyfunction!(generate_static, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
