//! Python bindings. Images and outputs cross the boundary as flat lists plus
//! a shape; reports come back as dicts.

use dmf::checkpoint::{load_checkpoint, save_checkpoint};
use dmf::flops::count_flops as count;
use dmf::model::{Model, ModelConfig};
use dmf::nn::Ctx;
use dmf::train::gradcheck::{run_gradcheck, Scope, DEFAULT_TOLERANCE};
use dmf::train::{train as run_train, TrainConfig};
use dmf::{no_grad, Element, Tensor};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "ModelConfig", module = "dmf_py", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    /// Bundled preset (micro, tiny, dmf-xxs, dmf-xs, dmf-s) or a TOML file path.
    #[staticmethod]
    fn load(name: &str) -> PyResult<Self> {
        Ok(PyModelConfig {
            inner: ModelConfig::load(name).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyModelConfig {
            inner: ModelConfig::from_toml(text).map_err(err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn num_blocks(&self) -> usize {
        self.inner.num_blocks()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn __repr__(&self) -> String {
        format!("ModelConfig({:?})", self.inner.name)
    }
}

enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

fn logits<T: Element>(model: &Model<T>, data: &[f64], shape: &[usize], tau: f64) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let x = Tensor::<T>::from_vec(data.iter().map(|&v| T::lit(v)).collect(), shape).map_err(err)?;
    let mut ctx = Ctx::eval();
    ctx.tau = tau;
    let y = no_grad(|| model.forward(&x, &mut ctx)).map_err(err)?;
    Ok((y.data().iter().map(|v| v.as_f64()).collect(), y.shape().to_vec()))
}

fn param_shapes<T: Element>(model: &Model<T>) -> Vec<(String, Vec<usize>)> {
    model.parameters().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect()
}

#[pyclass(name = "Model", module = "dmf_py")]
struct PyModel {
    inner: AnyModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, f64 = false))]
    fn new(config: &PyModelConfig, f64: bool) -> PyResult<Self> {
        let cfg = config.inner.clone();
        let inner = if f64 {
            AnyModel::F64(Model::new(cfg).map_err(err)?)
        } else {
            AnyModel::F32(Model::new(cfg).map_err(err)?)
        };
        Ok(PyModel { inner })
    }

    /// Loads a checkpoint written by `save` or by training: `(model, step)`.
    #[staticmethod]
    #[pyo3(signature = (path, f64 = false))]
    fn load(path: &str, f64: bool) -> PyResult<(Self, u64)> {
        Ok(if f64 {
            let (m, step, _) = load_checkpoint::<f64>(path).map_err(err)?;
            (PyModel { inner: AnyModel::F64(m) }, step)
        } else {
            let (m, step, _) = load_checkpoint::<f32>(path).map_err(err)?;
            (PyModel { inner: AnyModel::F32(m) }, step)
        })
    }

    #[pyo3(signature = (path, step = 0))]
    fn save(&self, path: &str, step: u64) -> PyResult<()> {
        match &self.inner {
            AnyModel::F32(m) => save_checkpoint(m, step, None, path),
            AnyModel::F64(m) => save_checkpoint(m, step, None, path),
        }
        .map_err(err)
    }

    /// Inference-mode logits for images `[B, C, H, W]` given as a flat list.
    #[pyo3(signature = (data, shape, tau = 1.0))]
    fn forward(&self, data: Vec<f64>, shape: Vec<usize>, tau: f64) -> PyResult<(Vec<f64>, Vec<usize>)> {
        match &self.inner {
            AnyModel::F32(m) => logits(m, &data, &shape, tau),
            AnyModel::F64(m) => logits(m, &data, &shape, tau),
        }
    }

    fn parameters(&self) -> Vec<(String, Vec<usize>)> {
        match &self.inner {
            AnyModel::F32(m) => param_shapes(m),
            AnyModel::F64(m) => param_shapes(m),
        }
    }

    fn num_params(&self) -> usize {
        self.parameters().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        let inner = match &self.inner {
            AnyModel::F32(m) => m.config.clone(),
            AnyModel::F64(m) => m.config.clone(),
        };
        PyModelConfig { inner }
    }

    #[getter]
    fn dtype(&self) -> &'static str {
        match self.inner {
            AnyModel::F32(_) => "f32",
            AnyModel::F64(_) => "f64",
        }
    }
}

/// MAC and parameter counts at a square input size.
#[pyfunction]
#[pyo3(signature = (config, size = 224))]
fn count_flops<'py>(py: Python<'py>, config: &PyModelConfig, size: usize) -> PyResult<Bound<'py, PyDict>> {
    let cfg = &config.inner;
    let report = count(cfg, [cfg.in_channels, size, size]).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("macs", report.total_macs())?;
    out.set_item("flops", 2 * report.total_macs())?;
    out.set_item("params", report.total_params())?;
    out.set_item("table", report.table())?;
    out.set_item("report", to_py(py, &report)?)?;
    Ok(out)
}

/// Finite-difference gradient check: `(passed, max_rel_err, table)`.
#[pyfunction]
#[pyo3(signature = (scope = "primitive", tol = DEFAULT_TOLERANCE, seed = 0))]
fn gradcheck(scope: &str, tol: f64, seed: u64) -> PyResult<(bool, f64, String)> {
    let scope: Scope = scope.parse().map_err(err)?;
    let r = run_gradcheck(scope, tol, seed).map_err(err)?;
    Ok((r.passed(), r.max_rel_err(), r.table()))
}

/// Trains from a TOML training config and returns the run summary.
#[pyfunction]
#[pyo3(signature = (config_toml, f64 = false))]
fn train<'py>(py: Python<'py>, config_toml: &str, f64: bool) -> PyResult<Bound<'py, PyAny>> {
    let cfg = TrainConfig::from_toml(config_toml).map_err(err)?;
    let summary = if f64 {
        run_train::<f64>(&cfg).map_err(err)?.summary
    } else {
        run_train::<f32>(&cfg).map_err(err)?.summary
    };
    to_py(py, &summary)
}

#[pymodule]
fn dmf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(count_flops, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use pyo3::ffi::c_str;

    fn with_module(f: impl FnOnce(Python<'_>, &Bound<'_, PyModule>)) {
        Python::initialize();
        Python::attach(|py| {
            let m = PyModule::new(py, "dmf_py").unwrap();
            dmf_py(&m).unwrap();
            f(py, &m);
        });
    }

    #[test]
    fn forward_and_flops_from_python() {
        with_module(|py, m| {
            let globals = PyDict::new(py);
            globals.set_item("dmf_py", m).unwrap();
            py.run(
                c_str!(
                    r#"
cfg = dmf_py.ModelConfig.load("micro")
model = dmf_py.Model(cfg)
n = 2 * 3 * 32 * 32
logits, shape = model.forward([0.01 * (i % 7) for i in range(n)], [2, 3, 32, 32])
assert shape == [2, cfg.num_classes], shape
assert len(logits) == 2 * cfg.num_classes
flops = dmf_py.count_flops(cfg, 32)
assert flops["flops"] == 2 * flops["macs"]
assert flops["params"] == model.num_params()
s = dmf_py.count_flops(dmf_py.ModelConfig.load("dmf-s"))
assert abs(s["macs"] / 1e6 - 499.7) < 0.1
"#
                ),
                Some(&globals),
                None,
            )
            .unwrap();
        });
    }

    #[test]
    fn errors_become_value_errors() {
        with_module(|py, m| {
            let e = m.getattr("ModelConfig").unwrap().call_method1("load", ("no-such-model",)).unwrap_err();
            assert!(e.is_instance_of::<PyValueError>(py));
            let e = m.getattr("gradcheck").unwrap().call1(("nope",)).unwrap_err();
            assert!(e.to_string().contains("scope"));
        });
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = std::env::temp_dir().join(format!("dmf-py-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        let path = path.to_str().unwrap();
        let cfg = PyModelConfig {
            inner: ModelConfig::micro(),
        };
        let a = PyModel::new(&cfg, true).unwrap();
        a.save(path, 7).unwrap();
        let (b, step) = PyModel::load(path, true).unwrap();
        assert_eq!(step, 7);
        assert_eq!(b.dtype(), "f64");
        let x: Vec<f64> = (0..3 * 32 * 32).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(a.forward(x.clone(), vec![1, 3, 32, 32], 1.0).unwrap(), b.forward(x, vec![1, 3, 32, 32], 1.0).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }
}
