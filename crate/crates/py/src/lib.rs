//! Python bindings for the spatio-temporal degradation model.

use std::fs::File;
use std::io::{BufReader, BufWriter};

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use stdegrade_core::fit::{self, FitOptions};
use stdegrade_core::kernel::DEFAULT_TRUNCATION_SIGMAS;
use stdegrade_core::lifetime;
use stdegrade_core::pde_oracle::{self, TransportParams};
use stdegrade_core::rng::seeded;
use stdegrade_core::st_cov::{self, StCovQuery};
use stdegrade_core::study;
use stdegrade_core::validate::{self, SelectionOptions, VariogramBins};
use stdegrade_core::{
    CovFamily, Error, Field2, ForwardOptions, PropagationParams, SpatialCovModel, SpatialGrid, TimeAxis,
};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        Error::Argument(_) | Error::Config(_) | Error::Domain(_) | Error::Parse { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for stdegrade_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn family(name: &str) -> PyResult<CovFamily> {
    name.parse().py()
}

fn open(path: &str) -> PyResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| PyOSError::new_err(format!("{path}: {e}")))
}

fn create(path: &str) -> PyResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| PyOSError::new_err(format!("{path}: {e}")))
}

/// Propagation, spatial covariance and regression parameters.
#[pyclass(name = "ModelParams", module = "stdegrade", from_py_object)]
#[derive(Clone)]
struct PyModelParams {
    inner: stdegrade_core::ModelParams,
}

#[pymethods]
impl PyModelParams {
    #[new]
    #[pyo3(signature = (lam, v, rho, family, theta, beta))]
    fn new(lam: f64, v: (f64, f64), rho: (f64, f64), family: &str, theta: Vec<f64>, beta: Vec<f64>) -> PyResult<Self> {
        let prop = PropagationParams::new(lam, v, rho.0, rho.1).py()?;
        let spat = SpatialCovModel::new(self::family(family)?, &theta).py()?;
        Ok(Self { inner: stdegrade_core::ModelParams::new(prop, spat, beta).py()? })
    }

    /// Reference study values for the given family.
    #[staticmethod]
    #[pyo3(signature = (family = "gaussian"))]
    fn study(family: &str) -> PyResult<Self> {
        Ok(Self { inner: study::study_params(self::family(family)?) })
    }

    #[getter]
    fn lam(&self) -> f64 {
        self.inner.prop.lambda
    }

    #[getter]
    fn v(&self) -> (f64, f64) {
        self.inner.prop.v
    }

    #[getter]
    fn rho(&self) -> (f64, f64) {
        (self.inner.prop.rho1, self.inner.prop.rho2)
    }

    #[getter]
    fn family(&self) -> &'static str {
        self.inner.spat.family().name()
    }

    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.inner.spat.theta().to_vec()
    }

    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.inner.beta.clone()
    }

    /// Parameter names and values in natural order.
    fn to_dict(&self) -> Vec<(String, f64)> {
        let names = fit::param_names(self.inner.spat.family(), self.inner.beta.len());
        names.into_iter().zip(fit::pack_params(&self.inner)).collect()
    }

    fn __repr__(&self) -> String {
        let items: Vec<String> = self.to_dict().iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("ModelParams({}, {})", self.family(), items.join(", "))
    }
}

/// Field on a regular grid at equally spaced times.
#[pyclass(name = "FieldSeries", module = "stdegrade", from_py_object)]
#[derive(Clone)]
struct PyFieldSeries {
    inner: stdegrade_core::FieldSeries,
}

#[pymethods]
impl PyFieldSeries {
    #[staticmethod]
    #[pyo3(signature = (path, spacing = 1.0))]
    fn read_csv(path: &str, spacing: f64) -> PyResult<Self> {
        Ok(Self { inner: stdegrade_core::FieldSeries::read_csv(open(path)?, spacing).py()? })
    }

    fn write_csv(&self, path: &str) -> PyResult<()> {
        self.inner.write_csv(create(path)?).py()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.n_times(), self.inner.grid().ny(), self.inner.grid().nx())
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        (0..self.inner.n_times()).map(|t| self.inner.times().time(t)).collect()
    }

    /// Slice `t` as rows of values.
    fn slice(&self, t: usize) -> PyResult<Vec<Vec<f64>>> {
        if t >= self.inner.n_times() {
            return Err(PyValueError::new_err(format!("time index {t} out of range")));
        }
        let nx = self.inner.grid().nx();
        Ok(self.inner.slice_values(t).chunks(nx).map(<[f64]>::to_vec).collect())
    }

    /// All values, time-major then row-major.
    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn __repr__(&self) -> String {
        let (t, r, c) = self.shape();
        format!("FieldSeries(times={t}, rows={r}, cols={c})")
    }
}

/// Covariates sharing a field's grid and time axis.
#[pyclass(name = "CovariateSeries", module = "stdegrade", from_py_object)]
#[derive(Clone)]
struct PyCovariateSeries {
    inner: stdegrade_core::CovariateSeries,
}

#[pymethods]
impl PyCovariateSeries {
    /// Synthetic study covariate on an `nx x ny` grid.
    #[staticmethod]
    #[pyo3(signature = (nx, ny, n_times, delta = 1.0, t0 = 0.0))]
    fn study(nx: usize, ny: usize, n_times: usize, delta: f64, t0: f64) -> PyResult<Self> {
        let grid = SpatialGrid::new(nx, ny).py()?;
        let times = TimeAxis::new(n_times, delta, t0).py()?;
        Ok(Self { inner: study::study_covariates(grid, times).py()? })
    }

    #[staticmethod]
    #[pyo3(signature = (path, spacing = 1.0))]
    fn read_csv(path: &str, spacing: f64) -> PyResult<Self> {
        Ok(Self { inner: stdegrade_core::CovariateSeries::read_csv(open(path)?, spacing).py()? })
    }

    fn write_csv(&self, path: &str) -> PyResult<()> {
        self.inner.write_csv(create(path)?).py()
    }

    #[getter]
    fn n_covariates(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn n_times(&self) -> usize {
        self.inner.times().n_times()
    }
}

/// Estimates with standard errors and 90% intervals.
#[pyclass(name = "FitResult", module = "stdegrade")]
struct PyFitResult {
    inner: fit::FitResult,
}

#[pymethods]
impl PyFitResult {
    #[getter]
    fn family(&self) -> &'static str {
        self.inner.family.name()
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.inner.names.clone()
    }

    #[getter]
    fn estimates(&self) -> Vec<f64> {
        self.inner.estimates.clone()
    }

    #[getter]
    fn std_errors(&self) -> Vec<f64> {
        self.inner.std_errors.clone()
    }

    #[getter]
    fn loglik(&self) -> f64 {
        self.inner.loglik
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn diagnostics(&self) -> Vec<String> {
        self.inner.diagnostics.clone()
    }

    #[getter]
    fn params(&self) -> PyModelParams {
        PyModelParams { inner: self.inner.params.clone() }
    }

    fn confidence_interval(&self, i: usize) -> PyResult<(f64, f64)> {
        if i >= self.inner.names.len() {
            return Err(PyValueError::new_err(format!("parameter index {i} out of range")));
        }
        Ok(self.inner.confidence_interval(i))
    }

    /// Text table of estimates, standard errors and intervals.
    fn report(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        fit::write_fit_report(&self.inner, &mut buf).py()?;
        Ok(String::from_utf8_lossy(&buf).into_owned())
    }
}

/// Monte Carlo first-passage results.
#[pyclass(name = "PassageStudy", module = "stdegrade", get_all)]
struct PyPassageStudy {
    fpt: Vec<f64>,
    censored: Vec<bool>,
    /// Crossing site as `(row, col)`, `None` when censored.
    fpl: Vec<Option<(usize, usize)>>,
    fpl_probability: Vec<f64>,
    censoring_rate: f64,
    rul: Vec<f64>,
    warnings: Vec<String>,
}

#[pyfunction]
#[pyo3(signature = (params, covariates, seed, initial = None, burn_in = 0))]
fn simulate(
    params: &PyModelParams,
    covariates: &PyCovariateSeries,
    seed: u64,
    initial: Option<&PyFieldSeries>,
    burn_in: usize,
) -> PyResult<PyFieldSeries> {
    let grid = covariates.inner.grid();
    let start = match initial {
        Some(f) => f.inner.slice(f.inner.n_times() - 1),
        None => Field2::zeros(grid.nx(), grid.ny()),
    };
    let opts = ForwardOptions { burn_in, ..Default::default() };
    let y = stdegrade_core::forward::simulate(&params.inner, &covariates.inner, &start, &mut seeded(seed), &opts)
        .py()?;
    Ok(PyFieldSeries { inner: y })
}

/// One study data set on an `n x n` grid from a zero initial field.
#[pyfunction]
fn simulate_study(params: &PyModelParams, n: usize, n_times: usize, seed: u64) -> PyResult<(PyFieldSeries, PyCovariateSeries)> {
    let (y, cov) = study::simulate_study(&params.inner, n, n_times, &mut seeded(seed)).py()?;
    Ok((PyFieldSeries { inner: y }, PyCovariateSeries { inner: cov }))
}

#[pyfunction]
#[pyo3(signature = (field, covariates, family = "gaussian", max_evals = None))]
fn mle_fit(
    py: Python<'_>,
    field: &PyFieldSeries,
    covariates: &PyCovariateSeries,
    family: &str,
    max_evals: Option<usize>,
) -> PyResult<PyFitResult> {
    let fam = self::family(family)?;
    let d = FitOptions::default();
    let opts = FitOptions { max_evals: max_evals.unwrap_or(d.max_evals), ..d };
    let r = py.detach(|| fit::mle_fit(&field.inner, &covariates.inner, fam, None, &opts)).py()?;
    Ok(PyFitResult { inner: r })
}

#[pyfunction]
fn log_likelihood(params: &PyModelParams, field: &PyFieldSeries, covariates: &PyCovariateSeries) -> PyResult<f64> {
    fit::log_likelihood(&params.inner, &field.inner, &covariates.inner, &ForwardOptions::default()).py()
}

/// Covariance between `Y(s, t)` and `Y(s + d, t + lag * delta)`.
#[pyfunction]
#[pyo3(signature = (params, d, lag, delta = 1.0))]
fn st_covariance(params: &PyModelParams, d: (f64, f64), lag: usize, delta: f64) -> PyResult<f64> {
    st_cov::st_covariance(&params.inner, &StCovQuery::new(d, lag, delta)).py()
}

/// Empirical and fitted semi-variograms of the whitened residuals, each as
/// `(d, gamma, pairs)` rows.
#[pyfunction]
#[pyo3(signature = (params, field, covariates, bin_width = 0.5, max_distance = 10.0))]
#[allow(clippy::type_complexity)]
fn semivariograms(
    params: &PyModelParams,
    field: &PyFieldSeries,
    covariates: &PyCovariateSeries,
    bin_width: f64,
    max_distance: f64,
) -> PyResult<(Vec<(f64, f64, usize)>, Vec<(f64, f64, usize)>)> {
    let r = fit::whitened_residuals(&params.inner, &field.inner, &covariates.inner, &ForwardOptions::default()).py()?;
    let emp = validate::empirical_semivariogram(&r, &VariogramBins::new(bin_width, max_distance).py()?).py()?;
    let delta = field.inner.times().delta();
    let th = validate::theoretical_semivariogram(&params.inner.spat, delta, &emp.distances()).py()?;
    let rows = |v: &validate::Variogram| v.bins.iter().map(|b| (b.d, b.gamma, b.pairs)).collect();
    Ok((rows(&emp), rows(&th)))
}

/// Fits each family and ranks them best first as
/// `(family, discrepancy, loglik, converged)`.
#[pyfunction]
#[pyo3(signature = (field, covariates, families = None, seed = 0))]
fn select_family(
    py: Python<'_>,
    field: &PyFieldSeries,
    covariates: &PyCovariateSeries,
    families: Option<Vec<String>>,
    seed: u64,
) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let fams: Vec<CovFamily> = match families {
        Some(names) => names.iter().map(|n| self::family(n)).collect::<PyResult<_>>()?,
        None => CovFamily::ALL.to_vec(),
    };
    let opts = SelectionOptions { seed, ..Default::default() };
    let report = py
        .detach(|| validate::family_selection_report(&field.inner, &covariates.inner, &fams, &opts))
        .py()?;
    Ok(report
        .entries
        .iter()
        .map(|e| (e.family.name().to_string(), e.discrepancy, e.loglik, e.fit.as_ref().is_some_and(|f| f.converged)))
        .collect())
}

/// Runs from the last slice of `initial`; `future` starts at that slice's
/// time and `horizon` is absolute.
#[pyfunction]
#[pyo3(signature = (params, future, initial, threshold, horizon, runs, seed))]
#[allow(clippy::too_many_arguments)]
fn passage_study(
    py: Python<'_>,
    params: &PyModelParams,
    future: &PyCovariateSeries,
    initial: &PyFieldSeries,
    threshold: f64,
    horizon: f64,
    runs: usize,
    seed: u64,
) -> PyResult<PyPassageStudy> {
    let start = initial.inner.slice(initial.inner.n_times() - 1);
    let s = py
        .detach(|| {
            lifetime::run_passage_study(
                &params.inner,
                &future.inner,
                &start,
                threshold,
                horizon,
                runs,
                seed,
                &ForwardOptions::default(),
            )
        })
        .py()?;
    let grid = s.grid;
    Ok(PyPassageStudy {
        fpt: s.samples.iter().map(|x| x.fpt).collect(),
        censored: s.samples.iter().map(|x| x.censored).collect(),
        fpl: s.samples.iter().map(|x| x.fpl.and_then(|i| grid.row_col(i).ok())).collect(),
        fpl_probability: s.fpl_probability.clone(),
        censoring_rate: s.censoring_rate,
        rul: s.rul(),
        warnings: s.warnings.clone(),
    })
}

/// Kernel step against the spectral transport solution; returns
/// `(max_rel_error, passed)`.
#[pyfunction]
#[pyo3(signature = (k = 1.0, v = (0.0, 0.0), tau = f64::INFINITY, delta = 1.0, domain = 128, spacing = 0.5, tolerance = 1e-4))]
fn verify_pde(
    k: f64,
    v: (f64, f64),
    tau: f64,
    delta: f64,
    domain: usize,
    spacing: f64,
    tolerance: f64,
) -> PyResult<(f64, bool)> {
    let p = TransportParams::isotropic(v, k, tau).py()?;
    let r = pde_oracle::verify_kernel_equivalence(&p, delta, domain, spacing, DEFAULT_TRUNCATION_SIGMAS, tolerance)
        .py()?;
    Ok((r.max_rel_error, r.passed))
}

#[pymodule]
fn stdegrade(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelParams>()?;
    m.add_class::<PyFieldSeries>()?;
    m.add_class::<PyCovariateSeries>()?;
    m.add_class::<PyFitResult>()?;
    m.add_class::<PyPassageStudy>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_study, m)?)?;
    m.add_function(wrap_pyfunction!(mle_fit, m)?)?;
    m.add_function(wrap_pyfunction!(log_likelihood, m)?)?;
    m.add_function(wrap_pyfunction!(st_covariance, m)?)?;
    m.add_function(wrap_pyfunction!(semivariograms, m)?)?;
    m.add_function(wrap_pyfunction!(select_family, m)?)?;
    m.add_function(wrap_pyfunction!(passage_study, m)?)?;
    m.add_function(wrap_pyfunction!(verify_pde, m)?)?;
    Ok(())
}
