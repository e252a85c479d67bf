//! Python bindings: transforms, redaction, config parsing and training.
//!
//! Images cross the boundary as flat row-major lists plus a `(C, H, W)` shape.

use ndarray::Array3;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dejavu::error::Error;
use dejavu::harness::{train_with, RunOptions, TrainConfig};
use dejavu::redaction::{self, DctCoefficients, RedactionSpec, RedactionVariant};
use dejavu::rng::make_rng;
use dejavu::tensor::ImageTensor;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Tensor(_) | Error::TrainingAborted { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn array(data: Vec<f64>, shape: (usize, usize, usize)) -> PyResult<Array3<f64>> {
    Array3::from_shape_vec(shape, data).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Orthonormal 2D DCT-II of each channel.
#[pyfunction]
fn dct2(data: Vec<f64>, shape: (usize, usize, usize)) -> PyResult<Vec<f64>> {
    let img = ImageTensor::new(array(data, shape)?).map_err(py_err)?;
    Ok(redaction::dct2(&img).data().iter().copied().collect())
}

/// Inverse of [`dct2`].
#[pyfunction]
fn idct2(data: Vec<f64>, shape: (usize, usize, usize)) -> PyResult<Vec<f64>> {
    let coef = DctCoefficients::new(array(data, shape)?);
    Ok(redaction::idct2(&coef).data().iter().copied().collect())
}

/// Applies a redaction to an image given as a flat list.
#[pyfunction]
#[pyo3(signature = (data, shape, variant, t=None, b=None, band=None, seed=0))]
fn redact(
    data: Vec<f64>,
    shape: (usize, usize, usize),
    variant: &str,
    t: Option<f64>,
    b: Option<usize>,
    band: Option<(f64, f64)>,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let variant: RedactionVariant = variant.parse().map_err(py_err)?;
    let mut spec = RedactionSpec::bare(variant).with_seed(seed);
    if let Some(t) = t {
        spec = spec.with_drop_prob(t);
    }
    if let Some(b) = b {
        spec = spec.with_block(b);
    }
    if let Some((lo, hi)) = band {
        spec = spec.with_band(lo, hi);
    }
    let img = ImageTensor::new(array(data, shape)?).map_err(py_err)?;
    let out = redaction::redact(&img, &spec, &mut make_rng(seed)).map_err(py_err)?;
    Ok(out.data().iter().copied().collect())
}

/// Parses config text and returns its canonical form.
#[pyfunction]
fn canonical_config(text: &str) -> PyResult<String> {
    let cfg: TrainConfig = text.parse().map_err(py_err)?;
    Ok(cfg.to_string())
}

/// Trains from config text and returns the final validation metrics.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &str) -> PyResult<Bound<'py, PyDict>> {
    let cfg: TrainConfig = config.parse().map_err(py_err)?;
    let record = train_with(cfg, RunOptions::default()).map_err(py_err)?;
    let out = PyDict::new(py);
    if let Some(m) = record.final_metrics() {
        for (task, metric, value) in m.entries() {
            out.set_item(format!("{task}/{metric}"), value)?;
        }
    }
    out.set_item("epochs", record.history.len())?;
    Ok(out)
}

#[pymodule]
fn dejavu_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(dct2, m)?)?;
    m.add_function(wrap_pyfunction!(idct2, m)?)?;
    m.add_function(wrap_pyfunction!(redact, m)?)?;
    m.add_function(wrap_pyfunction!(canonical_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
