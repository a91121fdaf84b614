//! Python bindings: image formation, metrics, dataset generation, inference and training.
//!
//! Images cross the boundary as flat row-major lists plus a shape tuple.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use iseg::imaging::{self, Image, LabelMap};
use iseg::metrics;
use iseg::nn::{load_checkpoint, Tensor};
use iseg::scenegen::{self, load_dataset, GenConfig, LightRig};
use iseg::train::{run_experiment as run, Experiment, TrainConfig};
use iseg::Error;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn image(data: Vec<f32>, shape: (usize, usize, usize)) -> PyResult<Image> {
    Image::new(shape.0, shape.1, shape.2, data).map_err(err)
}

fn tensor(data: Vec<f64>, shape: (usize, usize, usize)) -> PyResult<Tensor> {
    Tensor::new(vec![shape.0, shape.1, shape.2], data).map_err(err)
}

/// `I = R × S`; single-channel shading is broadcast over the reflectance channels.
#[pyfunction]
fn compose(
    reflectance: Vec<f32>,
    reflectance_shape: (usize, usize, usize),
    shading: Vec<f32>,
    shading_shape: (usize, usize, usize),
) -> PyResult<Vec<f32>> {
    let r = image(reflectance, reflectance_shape)?;
    let s = image(shading, shading_shape)?;
    Ok(imaging::compose(&r, &s).map_err(err)?.into_data())
}

#[pyfunction]
#[pyo3(signature = (normal, light, ambient=0.2, intensity=1.0))]
fn lambertian(normal: [f64; 3], light: [f64; 3], ambient: f64, intensity: f64) -> PyResult<f64> {
    let rig = LightRig::new(light, ambient, intensity).map_err(err)?;
    scenegen::lambertian(normal, &rig).map_err(err)
}

#[pyfunction]
fn mse(pred: Vec<f64>, truth: Vec<f64>, shape: (usize, usize, usize)) -> PyResult<f64> {
    metrics::mse(&tensor(pred, shape)?, &tensor(truth, shape)?).map_err(err)
}

#[pyfunction]
fn smse(pred: Vec<f64>, truth: Vec<f64>, shape: (usize, usize, usize)) -> PyResult<f64> {
    metrics::smse(&tensor(pred, shape)?, &tensor(truth, shape)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (pred, truth, shape, k=metrics::LMSE_WINDOW))]
fn lmse(pred: Vec<f64>, truth: Vec<f64>, shape: (usize, usize, usize), k: usize) -> PyResult<f64> {
    metrics::lmse(&tensor(pred, shape)?, &tensor(truth, shape)?, k).map_err(err)
}

#[pyfunction]
fn dssim(pred: Vec<f64>, truth: Vec<f64>, shape: (usize, usize, usize)) -> PyResult<f64> {
    metrics::dssim(&tensor(pred, shape)?, &tensor(truth, shape)?).map_err(err)
}

/// Global accuracy, class-average accuracy and mIoU of two label maps.
#[pyfunction]
fn seg_scores(pred: Vec<u8>, truth: Vec<u8>, height: usize, width: usize, num_classes: usize) -> PyResult<BTreeMap<String, f64>> {
    let p = LabelMap::new(height, width, num_classes, pred).map_err(err)?;
    let t = LabelMap::new(height, width, num_classes, truth).map_err(err)?;
    let s = metrics::seg_scores(&metrics::confusion(&p, &t, num_classes).map_err(err)?).map_err(err)?;
    Ok(BTreeMap::from([
        ("global".to_string(), s.global),
        ("class_average".to_string(), s.class_average),
        ("miou".to_string(), s.miou),
    ]))
}

/// Renders a dataset and returns `(num_samples, train, test)`.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (out_dir, scenes=40, rigs=5, classes=8, height=96, width=128, seed=1))]
fn generate_dataset(
    py: Python<'_>,
    out_dir: PathBuf,
    scenes: usize,
    rigs: usize,
    classes: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> PyResult<(usize, usize, usize)> {
    let cfg = GenConfig {
        num_scenes: scenes,
        rigs_per_scene: rigs,
        num_classes: classes,
        height,
        width,
        master_seed: seed,
    };
    let m = py.detach(|| scenegen::generate_dataset(&cfg, &out_dir)).map_err(err)?;
    let count = |s| m.entries.iter().filter(|e| e.split == s).count();
    Ok((m.num_samples, count(scenegen::Split::Train), count(scenegen::Split::Test)))
}

/// Trains one experiment, writes its run directory and returns the test aggregates.
#[pyfunction]
#[pyo3(signature = (experiment, data_dir, out_dir, epochs, overrides=None))]
fn run_experiment(
    py: Python<'_>,
    experiment: &str,
    data_dir: PathBuf,
    out_dir: PathBuf,
    epochs: usize,
    overrides: Option<BTreeMap<String, String>>,
) -> PyResult<BTreeMap<String, String>> {
    let mut cfg = TrainConfig::new(Experiment::parse(experiment).map_err(err)?, epochs);
    for (k, v) in overrides.unwrap_or_default() {
        cfg.set(&k, &v).map_err(err)?;
    }
    py.detach(|| {
        let ds = load_dataset(&data_dir)?;
        Ok(run(&cfg, &ds, &out_dir)?.eval.aggregates())
    })
    .map_err(err)
}

/// A trained network loaded from a checkpoint.
#[pyclass]
struct Network(iseg::nn::Network);

#[pymethods]
impl Network {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_checkpoint(&path).map(Self).map_err(err)
    }

    #[getter]
    fn heads(&self) -> Vec<&'static str> {
        self.0.spec.heads.iter().map(|h| h.name()).collect()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.spec.num_classes
    }

    #[getter]
    fn input_channels(&self) -> usize {
        self.0.spec.input_channels
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.spec.param_count()
    }

    /// Predicts on an `N × C × H × W` batch; returns the active heads' flat outputs.
    fn predict(&self, py: Python<'_>, input: Vec<f64>, shape: (usize, usize, usize, usize)) -> PyResult<Py<PyAny>> {
        let x = Tensor::new(vec![shape.0, shape.1, shape.2, shape.3], input).map_err(err)?;
        let p = py.detach(|| self.0.predict(&x)).map_err(err)?;
        let d = pyo3::types::PyDict::new(py);
        if let Some(r) = p.reflectance {
            d.set_item("reflectance", r.into_data())?;
        }
        if let Some(s) = p.shading {
            d.set_item("shading", s.into_data())?;
        }
        if let Some(l) = p.labels {
            d.set_item("labels", l)?;
        }
        Ok(d.into_any().unbind())
    }
}

#[pymodule]
fn iseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(compose, m)?)?;
    m.add_function(wrap_pyfunction!(lambertian, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(smse, m)?)?;
    m.add_function(wrap_pyfunction!(lmse, m)?)?;
    m.add_function(wrap_pyfunction!(dssim, m)?)?;
    m.add_function(wrap_pyfunction!(seg_scores, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_class::<Network>()?;
    Ok(())
}
