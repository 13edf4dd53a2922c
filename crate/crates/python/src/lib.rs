//! Python bindings.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use smallball::cli::{execute, Experiment, ExperimentConfig};
use smallball::experiments::{
    single_interval_probability, total_smallball_probability, RunSettings, SmallBallEstimate,
};
use smallball::gaussian::{design, GridScheme};
use smallball::solver::Stepper;
use smallball::white_noise::sample_noise;
use smallball::heat_kernel as kernel;
use smallball::{Field, KernelPoint};

fn err(e: smallball::Error) -> PyErr {
    match e {
        smallball::Error::Domain { .. } | smallball::Error::Dimension(_) | smallball::Error::Config(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Space-time grid on `[0, length) × [0, horizon]`.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
struct Grid {
    inner: smallball::Grid,
}

#[pymethods]
impl Grid {
    #[new]
    fn new(length: f64, horizon: f64, n_x: usize, n_t: usize) -> PyResult<Self> {
        Ok(Self {
            inner: smallball::Grid::new(length, horizon, n_x, n_t).map_err(err)?,
        })
    }

    #[getter]
    fn length(&self) -> f64 {
        self.inner.length
    }

    #[getter]
    fn horizon(&self) -> f64 {
        self.inner.horizon
    }

    #[getter]
    fn n_x(&self) -> usize {
        self.inner.n_x
    }

    #[getter]
    fn n_t(&self) -> usize {
        self.inner.n_t
    }

    fn dx(&self) -> f64 {
        self.inner.dx()
    }

    fn dt(&self) -> f64 {
        self.inner.dt()
    }

    fn __repr__(&self) -> String {
        let g = &self.inner;
        format!("Grid(length={}, horizon={}, n_x={}, n_t={})", g.length, g.horizon, g.n_x, g.n_t)
    }
}

/// Noise coefficient.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
struct Sigma {
    inner: smallball::SigmaSpec,
}

#[pymethods]
impl Sigma {
    #[staticmethod]
    fn identity(dim: usize) -> PyResult<Self> {
        Ok(Self {
            inner: smallball::SigmaSpec::identity(dim).map_err(err)?,
        })
    }

    #[staticmethod]
    fn scalar(value: f64, dim: usize) -> PyResult<Self> {
        Ok(Self {
            inner: smallball::SigmaSpec::scalar(value, dim).map_err(err)?,
        })
    }

    #[staticmethod]
    fn diagonal(values: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: smallball::SigmaSpec::diagonal(values).map_err(err)?,
        })
    }

    #[staticmethod]
    fn state_dependent(dim: usize, c1: f64, c2: f64, lipschitz: f64) -> PyResult<Self> {
        Ok(Self {
            inner: smallball::SigmaSpec::state_dependent(dim, c1, c2, lipschitz).map_err(err)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn c1(&self) -> f64 {
        self.inner.c1
    }

    #[getter]
    fn c2(&self) -> f64 {
        self.inner.c2
    }

    fn __repr__(&self) -> String {
        format!("Sigma({}, dim={})", self.inner.label(), self.inner.dim())
    }
}

/// Heat kernel on a circle of the given length.
#[pyfunction]
#[pyo3(signature = (t, x, length=1.0))]
fn heat_kernel(t: f64, x: f64, length: f64) -> PyResult<f64> {
    kernel::evaluate(KernelPoint::new(t, x, length)).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (t, x, length=1.0))]
fn kernel_upper_bound(t: f64, x: f64, length: f64) -> PyResult<f64> {
    kernel::kernel_upper_bound(KernelPoint::new(t, x, length)).map_err(err)
}

/// Noise increments of path `index`, row-major in time, space, component.
#[pyfunction]
#[pyo3(signature = (grid, dim, seed, index=0))]
fn noise_increments(grid: &Grid, dim: usize, seed: u64, index: u64) -> PyResult<Vec<f64>> {
    Ok(sample_noise(grid.inner, dim, seed, index).map_err(err)?.increments().to_vec())
}

/// Solve from `u0` (zero when omitted) driven by noise path `index`.
///
/// Returns `(final_profile, sup_per_step)`; the profile is point-major.
#[pyfunction]
#[pyo3(signature = (grid, sigma, seed, index=0, u0=None))]
fn solve(grid: &Grid, sigma: &Sigma, seed: u64, index: u64, u0: Option<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let g = grid.inner;
    let d = sigma.inner.dim();
    let start = match u0 {
        Some(v) => Field::from_values(g.circle(), d, v).map_err(err)?,
        None => Field::zeros(g.circle(), d),
    };
    let model = smallball::Model::new(g, start, sigma.inner.clone(), smallball::DriftSpec::zero(d)).map_err(err)?;
    let noise = sample_noise(g, d, seed, index).map_err(err)?;
    let path = model.run(&mut Stepper::new(g), &noise, None).map_err(err)?;
    Ok((path.last().values().to_vec(), path.sup_per_snapshot))
}

fn estimate_dict<'py>(py: Python<'py>, e: &SmallBallEstimate) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("p_hat", e.p_hat)?;
    d.set_item("stderr", e.stderr)?;
    d.set_item("raw_mean", e.raw_mean)?;
    d.set_item("n_paths", e.n_paths)?;
    d.set_item("n_effective", e.n_effective)?;
    d.set_item("hits", e.hits)?;
    d.set_item("eps", e.eps)?;
    d.set_item("horizon", e.horizon)?;
    d.set_item("method", e.method.to_string())?;
    d.set_item("warning", e.warning.clone())?;
    Ok(d)
}

fn scheme(eps: f64, c0: f64, theta: f64, length: f64) -> PyResult<GridScheme> {
    GridScheme::new(eps, c0, theta, length).map_err(err)
}

/// Probability of staying in the `eps` ball for one interval and ending
/// within `eps/3`.
#[pyfunction]
#[pyo3(signature = (eps, sigma, n_paths, tilted=true, seed=0, c0=0.5, theta=5.0, length=1.0))]
#[allow(clippy::too_many_arguments)]
fn single_interval<'py>(
    py: Python<'py>,
    eps: f64,
    sigma: &Sigma,
    n_paths: usize,
    tilted: bool,
    seed: u64,
    c0: f64,
    theta: f64,
    length: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let sch = scheme(eps, c0, theta, length)?;
    let settings = RunSettings { seed, ..RunSettings::default() };
    let inner = sigma.inner.clone();
    let e = py
        .detach(move || single_interval_probability(&sch, &inner, None, n_paths, tilted, &settings))
        .map_err(err)?;
    estimate_dict(py, &e)
}

/// Probability of staying in the `eps` ball over `intervals` scheme intervals.
#[pyfunction]
#[pyo3(signature = (eps, intervals, sigma, n_paths, tilted=true, seed=0, c0=0.5, theta=5.0, length=1.0))]
#[allow(clippy::too_many_arguments)]
fn total_smallball<'py>(
    py: Python<'py>,
    eps: f64,
    intervals: usize,
    sigma: &Sigma,
    n_paths: usize,
    tilted: bool,
    seed: u64,
    c0: f64,
    theta: f64,
    length: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let sch = scheme(eps, c0, theta, length)?;
    let horizon = intervals as f64 * sch.t1();
    let settings = RunSettings { seed, ..RunSettings::for_ball() };
    let inner = sigma.inner.clone();
    let h = py
        .detach(move || total_smallball_probability(&sch, horizon, &inner, n_paths, tilted, &settings))
        .map_err(err)?;
    let d = estimate_dict(py, &h.ball)?;
    d.set_item("intervals", h.intervals)?;
    d.set_item("grid_event", estimate_dict(py, &h.grid)?)?;
    Ok(d)
}

/// Estimated constants and grid choice for a list of radii, as JSON text.
#[pyfunction]
#[pyo3(signature = (eps, c0=0.5, k1=0.5, k2=1.0, sigma_scale=1.0, length=1.0))]
fn design_constants(py: Python<'_>, eps: Vec<f64>, c0: f64, k1: f64, k2: f64, sigma_scale: f64, length: f64) -> PyResult<String> {
    let d = py
        .detach(move || design(&eps, c0, k1, k2, sigma_scale, length))
        .map_err(err)?;
    serde_json::to_string(&d.constants).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Run a named experiment from TOML text. Returns `(csv, manifest_json)`.
#[pyfunction]
#[pyo3(signature = (experiment, config="", seed=None))]
fn run_experiment(py: Python<'_>, experiment: &str, config: &str, seed: Option<u64>) -> PyResult<(String, String)> {
    let exp = Experiment::from_name(experiment)
        .ok_or_else(|| PyValueError::new_err(format!("unknown experiment `{experiment}`")))?;
    let mut cfg = ExperimentConfig::parse(config, "<python>", exp).map_err(err)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = py.detach(move || execute(exp, &cfg)).map_err(err)?;
    let csv = out.table.to_csv().map_err(err)?;
    let manifest = serde_json::to_string(&out.manifest).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((csv, manifest))
}

#[pymodule]
fn smallball_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Grid>()?;
    m.add_class::<Sigma>()?;
    m.add_function(wrap_pyfunction!(heat_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_upper_bound, m)?)?;
    m.add_function(wrap_pyfunction!(noise_increments, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(single_interval, m)?)?;
    m.add_function(wrap_pyfunction!(total_smallball, m)?)?;
    m.add_function(wrap_pyfunction!(design_constants, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
