//! Python bindings for the core modeling operations: B-spline evaluation,
//! arc length, event-time inversion, dataset simulation, model fitting, and
//! convergence diagnostics. Structured values cross the boundary as JSON so
//! the Python side needs nothing beyond the standard library.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use balsam::config::{parse_config, FitConfig, SimulateConfig};
use balsam::diagnostics;
use balsam::model::{self, Dataset, SubjectRecord};
use balsam::splines::SplineConfig;

fn to_py_err(err: balsam::Error) -> PyErr {
    PyValueError::new_err(err.to_string())
}

fn spline(order: usize, inner_knots: Vec<f64>, boundary: (f64, f64)) -> PyResult<SplineConfig> {
    SplineConfig::new(order, inner_knots, boundary).map_err(to_py_err)
}

/// Evaluate the K clamped B-spline basis functions at s.
#[pyfunction]
fn bspline_basis(
    order: usize,
    inner_knots: Vec<f64>,
    boundary: (f64, f64),
    s: f64,
) -> PyResult<Vec<f64>> {
    spline(order, inner_knots, boundary)?
        .eval_basis(s)
        .map_err(to_py_err)
}

/// Evaluate the K basis first derivatives at s.
#[pyfunction]
fn bspline_basis_derivative(
    order: usize,
    inner_knots: Vec<f64>,
    boundary: (f64, f64),
    s: f64,
) -> PyResult<Vec<f64>> {
    spline(order, inner_knots, boundary)?
        .eval_basis_derivative(s)
        .map_err(to_py_err)
}

/// Closed-form arc length of a linear trajectory: t * sqrt(1 + slope^2).
#[pyfunction]
fn arc_length_linear(slope: f64, t: f64) -> f64 {
    model::arc_length_model1(slope, t)
}

/// Trapezoid arc length of a spline trajectory on [0, t] with m
/// sub-intervals.
#[pyfunction]
fn arc_length_spline(
    coefficients: Vec<f64>,
    order: usize,
    inner_knots: Vec<f64>,
    boundary: (f64, f64),
    t: f64,
    quad_points: usize,
) -> PyResult<f64> {
    let cfg = spline(order, inner_knots, boundary)?;
    model::arc_length_model2(&coefficients, &cfg, t, quad_points).map_err(to_py_err)
}

/// Total length of the polyline through (s, q) points.
#[pyfunction]
fn polyline_length(points: Vec<(f64, f64)>) -> PyResult<f64> {
    balsam::quadrature::polyline_length(&points).map_err(to_py_err)
}

/// Invert the linear-trajectory cumulative hazard at uniform draw v.
#[pyfunction]
fn invert_event_time(v: f64, lambda: f64, linpred: f64, alpha: f64, slope: f64) -> PyResult<f64> {
    if !(0.0 < v && v < 1.0) {
        return Err(PyValueError::new_err("v must lie in (0, 1)"));
    }
    Ok(balsam::simulate::invert_event_time_model1(
        v, lambda, linpred, alpha, slope,
    ))
}

/// Simulate a dataset from a design document (JSON); returns JSON with the
/// subject records, latent truth, and inversion-failure count.
#[pyfunction]
fn simulate_dataset(design_json: &str) -> PyResult<String> {
    let cfg: SimulateConfig = parse_config(design_json).map_err(to_py_err)?;
    let generated = balsam::simulate::generate_dataset(&cfg.design).map_err(to_py_err)?;
    let out = serde_json::json!({
        "subjects": generated.records,
        "truth": generated.truth,
        "inversion_failures": generated.inversion_failures,
    });
    Ok(out.to_string())
}

/// Fit a model to in-memory subjects (JSON list of records) with a fit
/// config document; returns JSON with the posterior summary table, DIC,
/// and the effective number of parameters.
#[pyfunction]
#[pyo3(signature = (fit_config_json, subjects_json, threads = 1))]
fn fit_dataset(fit_config_json: &str, subjects_json: &str, threads: usize) -> PyResult<String> {
    let cfg: FitConfig = parse_config(fit_config_json).map_err(to_py_err)?;
    let records: Vec<SubjectRecord> = serde_json::from_str(subjects_json)
        .map_err(|e| PyValueError::new_err(format!("invalid subjects payload: {e}")))?;
    let data = Dataset::prepare(&cfg.model, records).map_err(to_py_err)?;
    let samples = balsam::mcmc::run(&cfg.model, &data, &cfg.sampler, threads).map_err(to_py_err)?;
    let rows = diagnostics::summarize(&samples);
    let (dic, p_d) = diagnostics::dic(&samples.pooled_deviance());
    let out = serde_json::json!({
        "summary": rows,
        "dic": dic,
        "p_d": p_d,
        "retained_per_chain": samples.retained_per_chain(),
        "chains": samples.n_chains(),
    });
    Ok(out.to_string())
}

/// Split Gelman-Rubin potential scale reduction; None for degenerate chains.
#[pyfunction]
fn split_rhat(chains: Vec<Vec<f64>>) -> Option<f64> {
    diagnostics::split_rhat(&chains)
}

/// Effective sample size as (value, exceeds_total); None for degenerate
/// chains.
#[pyfunction]
fn effective_sample_size(chains: Vec<Vec<f64>>) -> Option<(f64, bool)> {
    diagnostics::effective_sample_size(&chains).map(|e| (e.value, e.exceeds_total))
}

/// Deviance information criterion: returns (DIC, p_D).
#[pyfunction]
fn dic(deviance_draws: Vec<f64>) -> PyResult<(f64, f64)> {
    if deviance_draws.is_empty() {
        return Err(PyValueError::new_err("dic needs at least one draw"));
    }
    Ok(diagnostics::dic(&deviance_draws))
}

#[pymodule]
fn balsam_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(bspline_basis, m)?)?;
    m.add_function(wrap_pyfunction!(bspline_basis_derivative, m)?)?;
    m.add_function(wrap_pyfunction!(arc_length_linear, m)?)?;
    m.add_function(wrap_pyfunction!(arc_length_spline, m)?)?;
    m.add_function(wrap_pyfunction!(polyline_length, m)?)?;
    m.add_function(wrap_pyfunction!(invert_event_time, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(fit_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(split_rhat, m)?)?;
    m.add_function(wrap_pyfunction!(effective_sample_size, m)?)?;
    m.add_function(wrap_pyfunction!(dic, m)?)?;
    Ok(())
}
