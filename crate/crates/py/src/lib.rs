//! Python bindings for `snailopt`.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyComplex, PyDict, PyList};

use snailopt::config::RunConfig;
use snailopt::gp::{fit_gp_with, FitOptions, GpModel};
use snailopt::metric::{MatchingMode, MetricConfig};
use snailopt::network::{dispersion, simulate_linear, CellConfig, DeviceParams, FrequencyGrid};
use snailopt::pipeline::{self, RunContext};
use snailopt::snail::{expand_potential, JunctionSpec, SnailSpec};
use snailopt::sweep::{evaluate_design, flux_bias, SimConfig};

create_exception!(pysnailopt, SnailoptError, PyException);

fn err(e: snailopt::Error) -> PyErr {
    SnailoptError::new_err(e.to_string())
}

/// Round-trips a serializable value through Python's `json` module.
fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| SnailoptError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// One device design point.
#[pyclass(
    name = "DeviceParams",
    module = "pysnailopt",
    get_all,
    set_all,
    from_py_object
)]
#[derive(Clone, Copy)]
struct PyDeviceParams {
    a_j: f64,
    rho_ic: f64,
    alpha: f64,
    t_nm: f64,
    l_load: f64,
    c_load: f64,
    pitch: u32,
    cell_count: u32,
}

impl From<PyDeviceParams> for DeviceParams {
    fn from(p: PyDeviceParams) -> Self {
        DeviceParams::from_array(
            [
                p.a_j,
                p.rho_ic,
                p.alpha,
                p.t_nm,
                p.l_load,
                p.c_load,
                f64::from(p.pitch),
            ],
            p.cell_count,
        )
    }
}

#[pymethods]
impl PyDeviceParams {
    #[new]
    #[pyo3(signature = (a_j, rho_ic, alpha, t_nm, l_load, c_load, pitch, cell_count=360))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        a_j: f64,
        rho_ic: f64,
        alpha: f64,
        t_nm: f64,
        l_load: f64,
        c_load: f64,
        pitch: u32,
        cell_count: u32,
    ) -> PyResult<Self> {
        let p = Self {
            a_j,
            rho_ic,
            alpha,
            t_nm,
            l_load,
            c_load,
            pitch,
            cell_count,
        };
        DeviceParams::from(p).validate().map_err(err)?;
        Ok(p)
    }

    /// Kerr-free flux bias of this design's α, in Φ0.
    fn kerr_free_flux(&self) -> PyResult<f64> {
        flux_bias(self.alpha).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "DeviceParams(a_j={}, rho_ic={}, alpha={}, t_nm={}, l_load={}, c_load={}, pitch={}, cell_count={})",
            self.a_j, self.rho_ic, self.alpha, self.t_nm, self.l_load, self.c_load, self.pitch, self.cell_count
        )
    }
}

/// Kerr-free flux (c4 = 0) for asymmetry `alpha`, in Φ0.
#[pyfunction]
fn kerr_free_flux(alpha: f64) -> PyResult<f64> {
    flux_bias(alpha).map_err(err)
}

/// Taylor coefficients of the SNAIL potential: dict with phi_min, c2, c3, c4.
#[pyfunction]
fn potential_expansion<'py>(
    py: Python<'py>,
    a_j: f64,
    rho_ic: f64,
    alpha: f64,
    flux: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let j = JunctionSpec::new(a_j, rho_ic).map_err(err)?;
    let e = SnailSpec::new(j, alpha, flux)
        .and_then(|s| expand_potential(&s))
        .map_err(err)?;
    to_py(py, &e)
}

fn grid(start_ghz: f64, stop_ghz: f64, step_mhz: f64) -> PyResult<FrequencyGrid> {
    FrequencyGrid::new(start_ghz * 1e9, stop_ghz * 1e9, step_mhz * 1e6).map_err(err)
}

/// Linear S-parameters; returns a dict of `freqs` and complex `s11`,
/// `s12`, `s21`, `s22` lists.
#[pyfunction]
#[pyo3(signature = (params, flux=None, stop_ghz=24.0, step_mhz=10.0))]
fn simulate<'py>(
    py: Python<'py>,
    params: PyDeviceParams,
    flux: Option<f64>,
    stop_ghz: f64,
    step_mhz: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let flux = flux.map_or_else(|| flux_bias(params.alpha).map_err(err), Ok)?;
    let resp = simulate_linear(
        &params.into(),
        flux,
        &grid(0.0, stop_ghz, step_mhz)?,
        &CellConfig::default(),
    )
    .map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("freqs", PyList::new(py, &resp.freqs)?)?;
    for (name, s) in [
        ("s11", &resp.s11),
        ("s12", &resp.s12),
        ("s21", &resp.s21),
        ("s22", &resp.s22),
    ] {
        let items: Vec<_> = s
            .iter()
            .map(|c| PyComplex::from_doubles(py, c.re, c.im))
            .collect();
        out.set_item(name, PyList::new(py, items)?)?;
    }
    Ok(out)
}

/// Wavenumber per cell versus frequency: dict with `freqs`, `k`, `k_raw`.
#[pyfunction]
#[pyo3(signature = (params, flux=None, stop_ghz=24.0, step_mhz=10.0))]
fn dispersion_curve<'py>(
    py: Python<'py>,
    params: PyDeviceParams,
    flux: Option<f64>,
    stop_ghz: f64,
    step_mhz: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let flux = flux.map_or_else(|| flux_bias(params.alpha).map_err(err), Ok)?;
    let p: DeviceParams = params.into();
    let resp =
        simulate_linear(&p, flux, &grid(0.0, stop_ghz, step_mhz)?, &CellConfig::default()).map_err(err)?;
    to_py(py, &dispersion(&resp, p.cell_count).map_err(err)?)
}

/// Metric breakdown at the Kerr-free bias with the reference weights.
#[pyfunction]
#[pyo3(signature = (params, matching_mode="direct", step_mhz=10.0))]
fn evaluate<'py>(
    py: Python<'py>,
    params: PyDeviceParams,
    matching_mode: &str,
    step_mhz: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let mode = match matching_mode {
        "direct" => MatchingMode::Direct,
        "verbatim" => MatchingMode::Verbatim,
        other => return Err(SnailoptError::new_err(format!("unknown matching mode `{other}`"))),
    };
    let sim = SimConfig {
        cell_count: params.cell_count,
        grid: grid(0.0, 24.0, step_mhz)?,
        cell: CellConfig::default(),
    };
    let flux = flux_bias(params.alpha).map_err(err)?;
    let b = evaluate_design(&params.into(), flux, &sim, &MetricConfig::reference(mode)).map_err(err)?;
    to_py(py, &b)
}

/// Gaussian-process regressor with a squared-exponential ARD kernel.
#[pyclass(name = "GaussianProcess", module = "pysnailopt")]
struct PyGaussianProcess {
    model: GpModel,
}

impl PyGaussianProcess {
    fn check_dims(&self, x: &[f64]) -> PyResult<()> {
        if x.len() != self.model.dims() {
            return Err(SnailoptError::new_err(format!(
                "expected {} coordinates, got {}",
                self.model.dims(),
                x.len()
            )));
        }
        Ok(())
    }
}

#[pymethods]
impl PyGaussianProcess {
    /// Fits hyperparameters by maximizing the log marginal likelihood.
    #[new]
    #[pyo3(signature = (x, y, seed=0))]
    fn new(x: Vec<Vec<f64>>, y: Vec<f64>, seed: u64) -> PyResult<Self> {
        let opts = FitOptions {
            seed,
            ..FitOptions::default()
        };
        Ok(Self {
            model: fit_gp_with(&x, &y, &opts).map_err(err)?,
        })
    }

    /// Posterior mean and variance at each row of `x`.
    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        for row in &x {
            self.check_dims(row)?;
        }
        Ok(self
            .model
            .posterior_batch(&x)
            .into_iter()
            .map(|p| (p.mean, p.variance))
            .unzip())
    }

    fn expected_improvement(&self, x: Vec<f64>, best_y: f64) -> PyResult<f64> {
        self.check_dims(&x)?;
        Ok(self.model.expected_improvement(&x, best_y))
    }

    #[getter]
    fn log_marginal_likelihood(&self) -> f64 {
        self.model.log_marginal_likelihood()
    }

    #[getter]
    fn hyperparameters<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.model.hyperparameters())
    }
}

/// JSON text of the reduced quick-run configuration.
#[pyfunction]
#[pyo3(signature = (output_dir="snailopt-run"))]
fn desk_config(output_dir: &str) -> String {
    serde_json::to_string_pretty(&RunConfig::desk(output_dir)).expect("config serializes")
}

/// Runs every stage for the config at `config`; returns p* and q*.
#[pyfunction]
#[pyo3(signature = (config, out=None, force=false, workers=None))]
fn run_pipeline<'py>(
    py: Python<'py>,
    config: PathBuf,
    out: Option<PathBuf>,
    force: bool,
    workers: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut ctx = RunContext::load(&config, out.as_deref()).map_err(err)?;
    if workers.is_some() {
        ctx.workers = workers;
    }
    let res = py.detach(|| pipeline::run_pipeline(&ctx, force)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("ran", res.ran)?;
    d.set_item("failed_rows", res.failed_rows)?;
    d.set_item("pstar", to_py(py, &res.pstar)?)?;
    d.set_item("qstar", to_py(py, &res.qstar)?)?;
    d.set_item("run_dir", ctx.run_dir)?;
    Ok(d)
}

/// Regenerates `report/` for a run directory; returns the files written.
#[pyfunction]
fn report(py: Python<'_>, run_dir: PathBuf) -> PyResult<Vec<String>> {
    py.detach(|| pipeline::report(&run_dir)).map_err(err)
}

#[pymodule]
fn pysnailopt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SnailoptError", m.py().get_type::<SnailoptError>())?;
    m.add_class::<PyDeviceParams>()?;
    m.add_class::<PyGaussianProcess>()?;
    m.add_function(wrap_pyfunction!(kerr_free_flux, m)?)?;
    m.add_function(wrap_pyfunction!(potential_expansion, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(dispersion_curve, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(desk_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    Ok(())
}
