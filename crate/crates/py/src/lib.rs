//! Python bindings for the `tfbest` crate.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use tfbest::checkpoint::{load_checkpoint, save_checkpoint, Metadata};
use tfbest::data::{
    prepare, read_windows_ndjson, synth_generate, synthetic_columns, write_backblaze_csv,
    write_windows_ndjson, SplitBoundaries, SynthConfig,
};
use tfbest::eval::confidence_margin as margin;
use tfbest::layers::sinusoidal_pe as pe;
use tfbest::train::{dataset_rmse, fit, TrainConfig};
use tfbest::{Error, ModelConfig, Tensor, TfbestModel, Variant};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::NonFinite(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// A TFBEST, DAST or vanilla transformer with `f32` parameters.
#[pyclass(name = "Model", module = "tfbest_py")]
pub struct PyModel {
    inner: TfbestModel<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (features, variant = "tfbest", window = 30, d_model = 64, heads = 4,
                        enc_layers = 2, dec_layers = 1, d_ff = 64, dropout = 0.1, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        features: usize,
        variant: &str,
        window: usize,
        d_model: usize,
        heads: usize,
        enc_layers: usize,
        dec_layers: usize,
        d_ff: usize,
        dropout: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let variant: Variant = variant.parse().map_err(py_err)?;
        let config = ModelConfig {
            window,
            d_model,
            heads,
            enc_layers,
            dec_layers,
            d_ff,
            dropout,
            ..ModelConfig::new(variant, features)
        };
        let inner = TfbestModel::new(config, seed).map_err(py_err)?;
        Ok(PyModel { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = load_checkpoint(&path).map_err(py_err)?;
        Ok(PyModel { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path, &Metadata::new()).map_err(py_err)
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.config().variant.to_string()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.params().scalar_count()
    }

    /// Model configuration as a JSON string.
    #[getter]
    fn config(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.config()).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Eval-mode RUL for one `[T][F]` window.
    fn predict(&self, window: Vec<Vec<f32>>) -> PyResult<Vec<f32>> {
        let rows = window.len();
        let cols = window.first().map_or(0, Vec::len);
        if window.iter().any(|r| r.len() != cols) {
            return Err(PyValueError::new_err("window rows differ in length"));
        }
        let x = Tensor::new(vec![rows, cols], window.concat()).map_err(py_err)?;
        self.inner.predict(&x).map_err(py_err)
    }

    /// Trains on prepared ndjson windows and returns
    /// `(epoch, train_rmse, val_rmse)` per epoch.
    #[pyo3(signature = (train, val = None, epochs = 10, batch_size = 32, lr = 1e-3, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &mut self,
        py: Python<'_>,
        train: PathBuf,
        val: Option<PathBuf>,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        seed: u64,
    ) -> PyResult<Vec<(usize, f64, Option<f64>)>> {
        let train = read_windows_ndjson(&train).map_err(py_err)?;
        let val = match val {
            Some(p) => read_windows_ndjson(&p).map_err(py_err)?,
            None => Vec::new(),
        };
        let cfg = TrainConfig { lr, batch_size, max_epochs: epochs, seed, ..TrainConfig::default() };
        let model = &mut self.inner;
        let report = py.detach(|| fit(model, &train, &val, &cfg)).map_err(py_err)?;
        Ok(report.epochs.iter().map(|e| (e.epoch, e.train_rmse, e.val_rmse)).collect())
    }

    /// RMSE over every step of every window in an ndjson file.
    fn evaluate(&self, path: PathBuf) -> PyResult<f64> {
        let windows = read_windows_ndjson(&path).map_err(py_err)?;
        dataset_rmse(&self.inner, &windows).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(variant='{}', features={}, window={}, d_model={}, params={})",
            c.variant,
            c.features,
            c.window,
            c.d_model,
            self.inner.params().scalar_count()
        )
    }
}

/// `[len][d_model]` sinusoidal position table.
#[pyfunction]
fn sinusoidal_pe(len: usize, d_model: usize) -> PyResult<Vec<Vec<f64>>> {
    let t = pe::<f64>(len, d_model).map_err(py_err)?;
    Ok((0..len).map(|i| t.row(i).to_vec()).collect())
}

#[pyfunction]
fn student_t_quantile(p: f64, df: u32) -> PyResult<f64> {
    tfbest::stats::student_t_quantile(p, df).map_err(py_err)
}

/// `(point_estimate, std_error, ci_low, ci_high)` for overlapping predictions.
#[pyfunction]
#[pyo3(signature = (preds, confidence = 0.9))]
fn confidence_margin(preds: Vec<f64>, confidence: f64) -> PyResult<(f64, f64, f64, f64)> {
    let m = margin(&preds, confidence).map_err(py_err)?;
    Ok((m.point_estimate, m.std_error, m.ci_low, m.ci_high))
}

#[pyfunction]
fn rmse(pred: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    tfbest::train::rmse(&pred, &target).map_err(py_err)
}

/// Writes a synthetic Backblaze-style CSV and returns its column names.
#[pyfunction]
#[pyo3(signature = (path, drives = 200, features = 16, seed = 0, missing_rate = 0.0))]
fn synth(path: PathBuf, drives: usize, features: usize, seed: u64, missing_rate: f64) -> PyResult<Vec<String>> {
    let cfg = SynthConfig { missing_rate, ..SynthConfig::new(drives, features, seed) };
    let histories = synth_generate(&cfg).map_err(py_err)?;
    let columns = synthetic_columns(features);
    write_backblaze_csv(&path, &columns, &histories).map_err(py_err)?;
    Ok(columns)
}

/// Generates synthetic drives and writes `train/val/test.ndjson` into
/// `out_dir`. Returns the window counts per split.
#[pyfunction]
#[pyo3(signature = (out_dir, drives = 200, features = 16, window = 30, max_rul = 60, seed = 0))]
fn synth_windows(
    out_dir: PathBuf,
    drives: usize,
    features: usize,
    window: usize,
    max_rul: i64,
    seed: u64,
) -> PyResult<(usize, usize, usize)> {
    let histories = synth_generate(&SynthConfig::new(drives, features, seed)).map_err(py_err)?;
    let columns = synthetic_columns(features);
    let p = prepare(histories, &columns, window, max_rul, &SplitBoundaries::default()).map_err(py_err)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
    for (name, split) in [("train", &p.train), ("val", &p.val), ("test", &p.test)] {
        write_windows_ndjson(&out_dir.join(format!("{name}.ndjson")), split).map_err(py_err)?;
    }
    Ok((p.train.len(), p.val.len(), p.test.len()))
}

/// Finite-difference gradient checks: `(name, max_rel_error, passed)`.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck(seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    let checks = tfbest::gradcheck::run_suite(seed).map_err(py_err)?;
    Ok(checks.iter().map(|c| (c.name.clone(), c.max_rel_error(), c.passed())).collect())
}

#[pymodule]
fn tfbest_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(sinusoidal_pe, m)?)?;
    m.add_function(wrap_pyfunction!(student_t_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(confidence_margin, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(synth_windows, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
