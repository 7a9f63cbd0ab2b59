//! Python bindings: demo synthesis and files, task learning, density grids,
//! closed-loop rollouts and their metrics.

use ergodic_imitation::baselines::{PlanarTask, Scenario};
use ergodic_imitation::mpc::{run_closed_loop, RolloutResult};
use ergodic_imitation::pipeline::{self, EvalContext, SynthRequest};
use ergodic_imitation::spectral::{self, CoefficientSet, Domain};
use ergodic_imitation::task::learn_task;
use ergodic_imitation::{metrics, DemoSet, FusionConfig, FusionMode, MpcConfig, SystemKind, TaskDefinition, Trajectory};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: ergodic_imitation::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr<Err = ergodic_imitation::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

#[pyclass(name = "DemoSet", module = "ergodic_imitation", skip_from_py_object)]
#[derive(Clone)]
struct PyDemoSet {
    inner: DemoSet,
}

#[pymethods]
impl PyDemoSet {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: DemoSet::load(path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_jsonl(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: DemoSet::read_from(text.as_bytes()).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn to_jsonl(&self) -> String {
        self.inner.to_jsonl()
    }

    #[getter]
    fn system(&self) -> String {
        self.inner.system.to_string()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.demos.iter().map(|d| d.id.clone()).collect()
    }

    fn labels(&self) -> Vec<String> {
        self.inner.demos.iter().map(|d| d.label.to_string()).collect()
    }

    /// `(times, states)` of one demonstration.
    fn trajectory(&self, index: usize) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let d = self
            .inner
            .demos
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no demo at index {index}")))?;
        Ok((d.trajectory.times.clone(), d.trajectory.states.clone()))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("DemoSet(system={}, demos={})", self.inner.system, self.inner.len())
    }
}

#[pyclass(name = "Task", module = "ergodic_imitation", skip_from_py_object)]
#[derive(Clone)]
struct PyTask {
    inner: TaskDefinition,
}

#[pymethods]
impl PyTask {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: TaskDefinition::from_json(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: TaskDefinition::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.mode.to_string()
    }

    #[getter]
    fn order(&self) -> usize {
        self.inner.order()
    }

    #[getter]
    fn phi(&self) -> Vec<f64> {
        self.inner.phi.values().to_vec()
    }

    fn weight_sum(&self) -> f64 {
        self.inner.weight_sum()
    }

    /// Density on a `res x res` grid, rows along the first coordinate.
    #[pyo3(signature = (res = 64, clip = true))]
    fn density(&self, res: usize, clip: bool) -> PyResult<Vec<Vec<f64>>> {
        let grid = self.inner.density(res, clip).map_err(err)?;
        if grid.resolution.len() != 2 {
            return Err(PyValueError::new_err("density grids are only returned for 2-D tasks"));
        }
        Ok(grid.values.chunks(res).map(|r| r.to_vec()).collect())
    }

    fn __repr__(&self) -> String {
        format!("Task(mode={}, order={})", self.inner.mode, self.inner.order())
    }
}

#[pyclass(name = "MpcConfig", module = "ergodic_imitation", skip_from_py_object)]
#[derive(Clone)]
struct PyMpcConfig {
    inner: MpcConfig,
}

#[pymethods]
impl PyMpcConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: MpcConfig::default(),
        }
    }

    /// Settings used by the benchmark harness.
    #[staticmethod]
    fn benchmark() -> Self {
        Self {
            inner: MpcConfig::benchmark(),
        }
    }

    /// Same keys as the CLI `--set key=value`.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    #[getter]
    fn q(&self) -> f64 {
        self.inner.q
    }

    #[getter]
    fn horizon(&self) -> f64 {
        self.inner.horizon
    }

    #[getter]
    fn order(&self) -> usize {
        self.inner.order
    }

    #[getter]
    fn sample_time(&self) -> f64 {
        self.inner.sample_time
    }
}

#[pyclass(name = "Rollout", module = "ergodic_imitation", skip_from_py_object)]
struct PyRollout {
    inner: RolloutResult,
}

#[pymethods]
impl PyRollout {
    #[getter]
    fn times(&self) -> Vec<f64> {
        self.inner.trajectory.times.clone()
    }

    #[getter]
    fn states(&self) -> Vec<Vec<f64>> {
        self.inner.trajectory.states.clone()
    }

    #[getter]
    fn controls(&self) -> Vec<Vec<f64>> {
        self.inner.controls.clone()
    }

    #[getter]
    fn eps_running(&self) -> Vec<f64> {
        self.inner.eps_running.clone()
    }

    #[getter]
    fn final_eps(&self) -> f64 {
        self.inner.final_eps
    }

    #[getter]
    fn replans(&self) -> usize {
        self.inner.replans.len()
    }

    #[getter]
    fn error(&self) -> Option<String> {
        self.inner.error.clone()
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }

    /// Metrics row as a dict; `scenario` enables cleaning/reaching scores.
    #[pyo3(signature = (scenario = None, mode = ""))]
    fn metrics<'py>(&self, py: Python<'py>, scenario: Option<&str>, mode: &str) -> PyResult<Bound<'py, PyDict>> {
        let scenario = scenario.map(parse::<PlanarTask>).transpose()?;
        let ctx = EvalContext {
            mode: mode.to_string(),
            scenario: scenario.map(Scenario::for_task),
            true_task: None,
        };
        let row = pipeline::evaluate("rollout", &self.inner.trajectory, &ctx).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("success_time", row.success_time)?;
        d.set_item("first_success", row.first_success)?;
        d.set_item("eps_true", row.eps_true)?;
        d.set_item("cleaning_m", row.cleaning_m)?;
        d.set_item("reach", row.reach)?;
        d.set_item("collided", row.collided)?;
        Ok(d)
    }
}

/// Scripted demonstrations; `task` is "reach" or "clean" for the planar system.
#[pyfunction]
#[pyo3(signature = (system, pos = 0, neg = 0, seed = 0, task = None, duration = 30.0, noise = 0.5))]
fn synth(system: &str, pos: usize, neg: usize, seed: u64, task: Option<&str>, duration: f64, noise: f64) -> PyResult<PyDemoSet> {
    let req = SynthRequest {
        system: parse(system)?,
        task: task.map(parse::<PlanarTask>).transpose()?,
        positives: pos,
        negatives: neg,
        seed,
        duration,
        noise,
    };
    Ok(PyDemoSet {
        inner: pipeline::synth(&req).map_err(err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (demos, mode, order = 10, beta = 0.5, gamma = 0.5))]
fn learn(demos: &PyDemoSet, mode: &str, order: usize, beta: f64, gamma: f64) -> PyResult<PyTask> {
    let mode: FusionMode = parse(mode)?;
    let cfg = FusionConfig { order, beta, gamma };
    Ok(PyTask {
        inner: learn_task(&demos.inner, mode, &cfg).map_err(err)?,
    })
}

/// Seeded start state as used by the batch harness.
#[pyfunction]
#[pyo3(signature = (system, seed, scenario = None))]
fn initial_state(system: &str, seed: u64, scenario: Option<&str>) -> PyResult<Vec<f64>> {
    let scenario = scenario.map(parse::<PlanarTask>).transpose()?;
    Ok(pipeline::initial_state(parse(system)?, scenario, seed))
}

/// Closed-loop run; releases the GIL while simulating.
#[pyfunction]
#[pyo3(signature = (task, system, x0, duration, config = None))]
fn rollout(py: Python<'_>, task: &PyTask, system: &str, x0: Vec<f64>, duration: f64, config: Option<&PyMpcConfig>) -> PyResult<PyRollout> {
    let system: SystemKind = parse(system)?;
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_else(MpcConfig::benchmark);
    let task = task.inner.clone();
    let inner = py
        .detach(move || run_closed_loop(system.build(), &task, &cfg, &x0, duration))
        .map_err(err)?;
    Ok(PyRollout { inner })
}

/// Coefficients of a sampled trajectory over the box `lower + [0, lengths]`.
#[pyfunction]
fn traj_coefficients(
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
    projection: Vec<usize>,
    order: usize,
    lower: Vec<f64>,
    lengths: Vec<f64>,
) -> PyResult<Vec<f64>> {
    let domain = Domain::new(lower, lengths).map_err(err)?;
    Ok(spectral::traj_coefficients(&times, &states, &projection, order, &domain)
        .map_err(err)?
        .into_values())
}

#[pyfunction]
fn ergodic_metric(c: Vec<f64>, phi: Vec<f64>, order: usize, dim: usize) -> PyResult<f64> {
    let c = CoefficientSet::from_values(order, dim, c).map_err(err)?;
    let phi = CoefficientSet::from_values(order, dim, phi).map_err(err)?;
    spectral::ergodic_metric(&c, &phi, &spectral::frequency_weights(order, dim)).map_err(err)
}

/// `(total_success_time, first_success_time)` of a cart-pole trajectory.
#[pyfunction]
fn cartpole_success(times: Vec<f64>, states: Vec<Vec<f64>>) -> PyResult<(f64, Option<f64>)> {
    let traj = Trajectory::new(SystemKind::Cartpole, times, states).map_err(err)?;
    let s = metrics::cartpole_success(&traj).map_err(err)?;
    Ok((s.total_success_time, s.first_success_time))
}

#[pymodule]
#[pyo3(name = "ergodic_imitation")]
fn ergodic_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyDemoSet>()?;
    m.add_class::<PyTask>()?;
    m.add_class::<PyMpcConfig>()?;
    m.add_class::<PyRollout>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(learn, m)?)?;
    m.add_function(wrap_pyfunction!(initial_state, m)?)?;
    m.add_function(wrap_pyfunction!(rollout, m)?)?;
    m.add_function(wrap_pyfunction!(traj_coefficients, m)?)?;
    m.add_function(wrap_pyfunction!(ergodic_metric, m)?)?;
    m.add_function(wrap_pyfunction!(cartpole_success, m)?)?;
    Ok(())
}
