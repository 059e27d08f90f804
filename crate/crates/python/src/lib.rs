//! Python bindings: `import pysnls`.

use num_complex::Complex64;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

use snls::cli::{exit_code, EXIT_CONFIG};
use snls::ldp::Family;
use snls::mc::McSetup;
use snls::{Record, RunConfig, SeedSpec, Trajectory};

fn err(e: snls::Error) -> PyErr {
    if exit_code(&e) == EXIT_CONFIG {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (None, Some(u)) => u.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => {
            let items = a.iter().map(|x| to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn serialize<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let value = serde_json::to_value(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(py, &value)
}

/// Resolved run configuration: built-in defaults, then an optional TOML
/// document, then `key=value` overrides.
#[pyclass(name = "Config", frozen, skip_from_py_object, module = "pysnls")]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = None, overrides = Vec::new()))]
    fn new(toml: Option<&str>, overrides: Vec<String>) -> PyResult<Self> {
        Ok(PyConfig {
            inner: RunConfig::layered(toml, &overrides).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, overrides = Vec::new()))]
    fn from_file(path: std::path::PathBuf, overrides: Vec<String>) -> PyResult<Self> {
        Ok(PyConfig {
            inner: RunConfig::load(Some(&path), &overrides).map_err(err)?,
        })
    }

    /// A copy with further overrides applied.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        PyConfig::new(Some(&self.inner.to_toml_string()), overrides)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        serialize(py, &self.inner)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!("Config(hash={})", self.inner.hash())
    }
}

/// A solved path: per-step norms plus the terminal field.
#[pyclass(name = "Trajectory", frozen, module = "pysnls")]
struct PyTrajectory {
    inner: Trajectory,
}

#[pymethods]
impl PyTrajectory {
    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt()
    }

    #[getter]
    fn horizon(&self) -> f64 {
        self.inner.horizon()
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.inner.times()
    }

    /// `‖u(t_j)‖_{L²}` per step.
    #[getter]
    fn norm_h(&self) -> Vec<f64> {
        self.inner.h_norms().to_vec()
    }

    /// `‖u(t_j)‖_{L^r}` per step.
    #[getter]
    fn norm_lr(&self) -> Vec<f64> {
        self.inner.r_norms().to_vec()
    }

    #[getter]
    fn initial(&self) -> Vec<Complex64> {
        self.inner.initial().data().to_vec()
    }

    #[getter]
    fn terminal(&self) -> Vec<Complex64> {
        self.inner.terminal().data().to_vec()
    }

    /// Mixed norm `sup ‖·‖_{L²} + ‖·‖_{L^p_t L^r_x}` on `[0, t]`.
    fn mixed_norm(&self, t: f64, p: f64, r: f64) -> PyResult<f64> {
        self.inner.mixed_norm(t, p, r).map_err(err)
    }

    fn to_csv(&self) -> String {
        snls::io::trajectory_csv(&self.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.n_steps() + 1
    }
}

#[pyfunction]
fn solve_skeleton(py: Python<'_>, config: &PyConfig) -> PyResult<PyTrajectory> {
    let cfg = &config.inner;
    let traj = py.detach(|| {
        let eq = cfg.equation()?;
        snls::solve_skeleton(&eq, &cfg.initial_field()?, &cfg.control()?, &cfg.solver)
    });
    Ok(PyTrajectory { inner: traj.map_err(err)? })
}

/// One stochastic path; `path` indexes the stream under the config's seed.
#[pyfunction]
#[pyo3(signature = (config, path = 0))]
fn solve_sde(py: Python<'_>, config: &PyConfig, path: u64) -> PyResult<PyTrajectory> {
    let cfg = &config.inner;
    let traj = py.detach(|| {
        let eq = cfg.equation()?;
        snls::solve_sde_seeded(&eq, &cfg.initial_field()?, &cfg.control()?, &cfg.solver, SeedSpec::new(cfg.seed, path))
    });
    Ok(PyTrajectory { inner: traj.map_err(err)? })
}

/// Minimum-action estimate for the configured event, as a dict.
#[pyfunction]
fn minimize_action<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
    let cfg = &config.inner;
    let res = py.detach(|| {
        let eq = cfg.equation()?;
        let u0 = cfg.initial_field()?;
        let event = cfg.event_spec(&eq, &u0)?;
        snls::minimize_action(&eq, &u0, &event, &cfg.rate)
    });
    serialize(py, &res.map_err(err)?)
}

/// Brute-force grid search with the config's `oracle` settings.
#[pyfunction]
fn brute_force_grid<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
    let cfg = &config.inner;
    let res = py.detach(|| {
        let eq = cfg.equation()?;
        let u0 = cfg.initial_field()?;
        let event = cfg.event_spec(&eq, &u0)?;
        snls::brute_force_grid(&eq, &u0, &event, &cfg.oracle.options())
    });
    serialize(py, &res.map_err(err)?)
}

/// Monte Carlo sweep over `sweep.epsilons`. Returns `(rows, csv)`.
#[pyfunction]
fn epsilon_sweep<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<(Bound<'py, PyAny>, String)> {
    let cfg = &config.inner;
    let res = py.detach(|| {
        let eq = cfg.equation()?;
        let u0 = cfg.initial_field()?;
        let ctrl = cfg.control()?;
        let event = cfg.event_spec(&eq, &u0)?;
        let opts = cfg.solver.with_record(Record::Endpoints);
        let setup = McSetup {
            eq: &eq,
            u0: &u0,
            ctrl: &ctrl,
            opts: &opts,
            event: &event,
        };
        snls::epsilon_sweep(&setup, &cfg.sweep.epsilons, cfg.sweep.n_paths, cfg.seed)
    });
    let res = res.map_err(err)?;
    Ok((serialize(py, &res.rows)?, res.to_csv()))
}

/// Closed-form rate `φ²/(2c²T)` of the single-mode linear problem.
#[pyfunction]
#[pyo3(signature = (gain, phase, horizon = 1.0, family = "g", n = 8))]
fn calibration_rate(gain: f64, phase: f64, horizon: f64, family: &str, n: usize) -> PyResult<f64> {
    let family = match family {
        "b" | "B" => Family::B,
        "g" | "G" => Family::G,
        other => return Err(PyValueError::new_err(format!("family must be 'b' or 'g', got {other:?}"))),
    };
    Ok(snls::calibration_problem(gain, phase, horizon, family, n).map_err(err)?.exact_rate)
}

/// Wilson 95% interval: `(p_hat, lo, hi)`.
#[pyfunction]
fn wilson(hits: u64, n: u64) -> (f64, f64, f64) {
    snls::mc::wilson(hits, n)
}

/// Runs the command line in-process, e.g. `run_cli(["skeleton", "--out", d])`.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("snls".to_string()).chain(args).collect();
    py.detach(|| snls::cli::main_with_args(argv))
}

#[pymodule]
fn pysnls(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_function(wrap_pyfunction!(solve_skeleton, m)?)?;
    m.add_function(wrap_pyfunction!(solve_sde, m)?)?;
    m.add_function(wrap_pyfunction!(minimize_action, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_grid, m)?)?;
    m.add_function(wrap_pyfunction!(epsilon_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(calibration_rate, m)?)?;
    m.add_function(wrap_pyfunction!(wilson, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
