//! Python bindings for the point-cloud and statistics utilities.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use shapeflow::mesh::{Units, Vec3};
use shapeflow::registration;
use shapeflow::uq::{self, TimeSeries, WindkesselParams};

fn err(e: shapeflow::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn points(p: Vec<[f64; 3]>) -> Vec<Vec3> {
    p.into_iter().map(Vec3::from).collect()
}

/// Symmetric squared Chamfer distance between two point clouds.
#[pyfunction]
fn chamfer(a: Vec<[f64; 3]>, b: Vec<[f64; 3]>) -> PyResult<f64> {
    registration::chamfer(&points(a), &points(b)).map_err(err)
}

/// 1-Wasserstein distance between two empirical samples.
#[pyfunction]
fn wasserstein1(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    uq::wasserstein1(&a, &b).map_err(err)
}

/// `(n, mean, std, std_error)`; the last two are `None` for one sample.
#[pyfunction]
fn monte_carlo_estimate(values: Vec<f64>) -> PyResult<(usize, f64, Option<f64>, Option<f64>)> {
    let e = uq::monte_carlo_estimate(&values).map_err(err)?;
    Ok((e.n, e.mean, e.std, e.std_error))
}

/// Outlet pressure of an RCR Windkessel driven by flow rate `q(times)`.
#[pyfunction]
#[pyo3(signature = (times, q, r_p, r_d, c_d, pi0 = 0.0))]
fn windkessel(times: Vec<f64>, q: Vec<f64>, r_p: f64, r_d: f64, c_d: f64, pi0: f64) -> PyResult<Vec<f64>> {
    let s = TimeSeries::new(times, q, Units::Dimensionless).map_err(err)?;
    let p = uq::windkessel_step(&WindkesselParams { r_p, r_d, c_d, pi0 }, &s).map_err(err)?;
    Ok(p.values)
}

/// Oscillatory shear index of a wall shear stress history; `None` when the
/// stress vanishes over the window.
#[pyfunction]
#[pyo3(signature = (times, wss, window = None))]
fn osi(times: Vec<f64>, wss: Vec<[f64; 3]>, window: Option<(f64, f64)>) -> PyResult<Option<f64>> {
    let s = TimeSeries::new(times, points(wss), Units::Pascal).map_err(err)?;
    uq::osi(&s, window).map_err(err)
}

#[pymodule]
fn shapeflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(chamfer, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein1, m)?)?;
    m.add_function(wrap_pyfunction!(monte_carlo_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(windkessel, m)?)?;
    m.add_function(wrap_pyfunction!(osi, m)?)?;
    Ok(())
}
