//! Python bindings: networks, shrink-perturb, synthetic data and full
//! experiment runs. Arrays cross the boundary as nested lists.

use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use warmstart::config::{self, Protocol};
use warmstart::data::{self, SyntheticSpec};
use warmstart::harness::HarnessError;
use warmstart::nn::{self, Activation, ModelParams};
use warmstart::reinit::{self, ReinitScope, ShrinkPerturbConfig};
use warmstart::{cli, diagnostics, output, verify};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_activation(name: &str) -> PyResult<Activation> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown activation '{name}'")))
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).map_err(value_err)
}

fn to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

#[pyclass(name = "NetworkSpec", module = "warmstart_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyNetworkSpec {
    inner: nn::NetworkSpec,
}

#[pymethods]
impl PyNetworkSpec {
    #[new]
    #[pyo3(signature = (layer_widths, activation = "relu", use_bias = true))]
    fn new(layer_widths: Vec<usize>, activation: &str, use_bias: bool) -> PyResult<Self> {
        let inner = nn::NetworkSpec::new(layer_widths, parse_activation(activation)?, use_bias).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn logistic_regression(input_dim: usize, num_classes: usize) -> Self {
        Self {
            inner: nn::NetworkSpec::logistic_regression(input_dim, num_classes),
        }
    }

    #[getter]
    fn layer_widths(&self) -> Vec<usize> {
        self.inner.layer_widths.clone()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth()
    }

    fn __repr__(&self) -> String {
        format!(
            "NetworkSpec({:?}, activation={:?}, use_bias={})",
            self.inner.layer_widths, self.inner.activation, self.inner.use_bias
        )
    }
}

/// Parameters of a network.
#[pyclass(name = "Model", module = "warmstart_py", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    /// Fresh fan-in scaled initialization.
    #[staticmethod]
    fn init(spec: &PyNetworkSpec, seed: u64) -> Self {
        Self {
            inner: nn::init_params(&spec.inner, seed),
        }
    }

    #[getter]
    fn spec(&self) -> PyNetworkSpec {
        PyNetworkSpec {
            inner: self.inner.spec.clone(),
        }
    }

    #[getter]
    fn num_values(&self) -> usize {
        self.inner.num_values()
    }

    fn l2_norm(&self) -> f64 {
        self.inner.l2_norm()
    }

    /// Flattened parameters, layer by layer, weights before bias.
    fn flatten(&self) -> Vec<f64> {
        self.inner.flatten()
    }

    /// Weight matrix of layer `index`, shaped (out, in).
    fn weights(&self, index: usize) -> PyResult<Vec<Vec<f64>>> {
        let layer = self
            .inner
            .layers
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no layer {index}")))?;
        Ok(to_rows(&layer.weights))
    }

    fn logits(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = to_matrix(inputs)?;
        Ok(to_rows(&nn::logits(&self.inner, x.view()).map_err(value_err)?))
    }

    fn predict(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        let x = to_matrix(inputs)?;
        nn::predict(&self.inner, x.view()).map_err(value_err)
    }

    /// Mean cross-entropy (minus `confidence_beta` times entropy) and its gradient norm.
    #[pyo3(signature = (inputs, labels, confidence_beta = 0.0))]
    fn loss(&self, inputs: Vec<Vec<f64>>, labels: Vec<usize>, confidence_beta: f64) -> PyResult<(f64, f64)> {
        let x = to_matrix(inputs)?;
        let (loss, grads) = nn::loss_and_gradients(&self.inner, x.view(), &labels, confidence_beta).map_err(value_err)?;
        Ok((loss, grads.l2_norm()))
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Model({:?}, {} values)", self.inner.spec.layer_widths, self.inner.num_values())
    }
}

/// `lambda * model + noise_scale * fresh_init(seed)`.
#[pyfunction]
#[pyo3(signature = (model, lam, noise_scale, seed, last_layer_only = false))]
fn shrink_perturb(model: &PyModel, lam: f64, noise_scale: f64, seed: u64, last_layer_only: bool) -> PyResult<PyModel> {
    let cfg = ShrinkPerturbConfig {
        lambda: lam,
        noise_scale,
        scope: if last_layer_only {
            ReinitScope::LastLayerOnly
        } else {
            ReinitScope::AllLayers
        },
    };
    let inner = reinit::shrink_perturb(&model.inner, &cfg, seed).map_err(value_err)?;
    Ok(PyModel { inner })
}

#[pyfunction]
fn scale_params(model: &PyModel, lam: f64) -> PyResult<PyModel> {
    let inner = reinit::scale_params(&model.inner, lam).map_err(value_err)?;
    Ok(PyModel { inner })
}

/// Pearson correlation of the weights (not biases) of two models.
#[pyfunction]
fn weight_correlation(a: &PyModel, b: &PyModel) -> PyResult<f64> {
    diagnostics::weight_correlation(&a.inner, &b.inner).map_err(value_err)
}

/// Gaussian-mixture data as `(features, labels)`.
#[pyfunction]
#[pyo3(signature = (n, d, k, label_noise = 0.0, seed = 0, class_sep = 0.5))]
fn gaussian_mixture(
    n: usize,
    d: usize,
    k: usize,
    label_noise: f64,
    seed: u64,
    class_sep: f64,
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut spec = SyntheticSpec::gaussian_mixture(n, d, k, label_noise, seed);
    spec.class_sep = class_sep;
    let data = data::gen_synthetic(&spec).map_err(value_err)?;
    Ok((to_rows(&data.features), data.labels))
}

/// Resolved config (JSON) and its hash, after applying `key=value` overrides.
#[pyfunction]
#[pyo3(signature = (config_json, overrides = Vec::new()))]
fn resolve_config(config_json: &str, overrides: Vec<String>) -> PyResult<(String, String)> {
    let parsed: Vec<_> = overrides
        .iter()
        .map(|o| config::parse_override(o))
        .collect::<Result<_, _>>()
        .map_err(value_err)?;
    let cfg = config::parse_config_str(config_json, &parsed).map_err(value_err)?;
    Ok((cfg.to_json().to_string(), cfg.hash()))
}

/// Run an experiment config and return `(records_json, curves_csv)`.
#[pyfunction]
#[pyo3(signature = (config_json, overrides = Vec::new()))]
fn run(py: Python<'_>, config_json: &str, overrides: Vec<String>) -> PyResult<(String, String)> {
    let parsed: Vec<_> = overrides
        .iter()
        .map(|o| config::parse_override(o))
        .collect::<Result<_, _>>()
        .map_err(value_err)?;
    let cfg = config::parse_config_str(config_json, &parsed).map_err(value_err)?;
    if cfg.protocol == Protocol::PretrainCrossover && cfg.pretrain_source().is_none() {
        return Err(PyValueError::new_err("pre-training needs a source dataset"));
    }
    let records = py
        .detach(|| {
            let data = cli::load_data(&cfg).map_err(|e| e.to_string())?;
            cli::execute(&cfg, &data).map_err(|e| match e {
                HarnessError::Diverged { .. } => format!("aborted: {e}"),
                other => other.to_string(),
            })
        })
        .map_err(PyRuntimeError::new_err)?;
    let json = output::records_json(&records).map_err(value_err)?;
    let curves = output::curves_csv(&records, &cfg.hash()).map_err(value_err)?;
    Ok((json, curves))
}

/// Built-in invariant checks as `(name, passed, message)`.
#[pyfunction]
fn verify_all() -> Vec<(String, bool, String)> {
    verify::run_checks()
        .into_iter()
        .map(|(name, r)| (name.to_string(), r.is_ok(), r.err().unwrap_or_default()))
        .collect()
}

#[pymodule]
fn warmstart_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetworkSpec>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(shrink_perturb, m)?)?;
    m.add_function(wrap_pyfunction!(scale_params, m)?)?;
    m.add_function(wrap_pyfunction!(weight_correlation, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_mixture, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(verify_all, m)?)?;
    Ok(())
}
