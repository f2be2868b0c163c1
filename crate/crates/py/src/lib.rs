//! Python bindings: phantoms, networks, metrics, decision rules and the run pipeline.

use std::path::PathBuf;

use pecad::cli::commands::{cmd_eval, cmd_split, cmd_synth, cmd_train, cmd_triage};
use pecad::cli::config::{RunConfig, Target};
use pecad::dataset::{load_volume, SliceLabel, Split};
use pecad::metrics::{
    confusion_from_predictions, iou, patient_metrics, roc_auc, weighted_precision, weighted_recall, PatientConfusion,
};
use pecad::nets::{Arch, Checkpoint, Classifier, ClassifierConfig, Network, Scale, Segmenter, SegmenterConfig, Tensor};
use pecad::phantom::{generate_study, PhantomSpec};
use pecad::preprocess::{preprocess_slice, PreprocConfig};
use pecad::triage::{cascade_label, patient_verdict};
use pecad::PecadError;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: PecadError) -> PyErr {
    match e {
        PecadError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn scale(name: &str) -> PyResult<Scale> {
    match name.to_ascii_lowercase().as_str() {
        "desk" => Ok(Scale::Desk),
        "paper" => Ok(Scale::Paper),
        other => Err(PyValueError::new_err(format!("unknown scale {other} (expected desk or paper)"))),
    }
}

fn label_name(l: SliceLabel) -> &'static str {
    if l.is_pe() {
        "PE"
    } else {
        "NON_PE"
    }
}

fn parse_label(s: &str) -> PyResult<SliceLabel> {
    match s {
        "PE" => Ok(SliceLabel::Pe),
        "NON_PE" => Ok(SliceLabel::NonPe),
        other => Err(PyValueError::new_err(format!("unknown label {other} (expected PE or NON_PE)"))),
    }
}

/// `[n, 1, h, w]` batch from flat row-major images.
fn batch(images: Vec<Vec<f64>>, size: usize) -> PyResult<Tensor> {
    let n = images.len();
    let mut data = Vec::with_capacity(n * size * size);
    for (i, img) in images.into_iter().enumerate() {
        if img.len() != size * size {
            return Err(PyValueError::new_err(format!("image {i} has {} values, expected {}", img.len(), size * size)));
        }
        data.extend(img);
    }
    Tensor::new(vec![n, 1, size, size], data).map_err(err)
}

/// Synthetic study as a dict of flat row-major arrays.
#[pyfunction]
#[pyo3(signature = (seed, pe, n_slices = 12, size = 72, patient_id = "phantom"))]
fn phantom_study(py: Python<'_>, seed: u64, pe: bool, n_slices: usize, size: usize, patient_id: &str) -> PyResult<PyObject> {
    let spec = PhantomSpec { seed, pe, n_slices, rows: size, cols: size, patient_id: patient_id.into(), ..Default::default() };
    let s = generate_study(&spec).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("shape", s.volume.dims())?;
    d.set_item("voxels", s.volume.voxels().to_vec())?;
    d.set_item("mask", s.masks.data().to_vec())?;
    d.set_item("labels", s.labels.iter().map(|&l| label_name(l)).collect::<Vec<_>>())?;
    Ok(d.into_any().unbind())
}

/// Windowed, scaled and centre-cropped slices of a saved volume.
#[pyfunction]
#[pyo3(signature = (volume_path, crop_size = 64))]
fn preprocess_volume(volume_path: PathBuf, crop_size: usize) -> PyResult<Vec<Vec<f64>>> {
    let volume = load_volume(&volume_path).map_err(err)?;
    let cfg = PreprocConfig { crop_size, ..Default::default() };
    (0..volume.n_slices())
        .map(|i| preprocess_slice(&volume, i, &cfg).map(|t| t.data().to_vec()).map_err(err))
        .collect()
}

/// Slice classifier returning one PE probability per image.
#[pyclass(name = "Classifier")]
struct PyClassifier {
    net: Classifier,
}

#[pymethods]
impl PyClassifier {
    #[new]
    #[pyo3(signature = (arch, scale_name = "desk", seed = 0, input_size = None))]
    fn new(arch: &str, scale_name: &str, seed: u64, input_size: Option<usize>) -> PyResult<Self> {
        let arch = match arch.to_ascii_lowercase().as_str() {
            "drn" => Arch::Drn,
            "mixnet" => Arch::Mixnet,
            other => return Err(PyValueError::new_err(format!("unknown arch {other} (expected drn or mixnet)"))),
        };
        let mut cfg = ClassifierConfig::preset(arch, scale(scale_name)?);
        if let Some(s) = input_size {
            cfg = cfg.with_input_size(s);
        }
        Ok(Self { net: Classifier::build(&cfg, seed).map_err(err)? })
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.net.input_spec().height
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.net.store().num_params()
    }

    fn load(&mut self, path: PathBuf) -> PyResult<()> {
        Checkpoint::load(&path).and_then(|c| c.restore_into(&mut self.net)).map_err(err)
    }

    fn predict(&self, images: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let x = batch(images, self.input_size())?;
        Ok(self.net.predict(&x).map_err(err)?.data().to_vec())
    }
}

/// Embolus segmenter returning per-pixel probabilities.
#[pyclass(name = "Segmenter")]
struct PySegmenter {
    net: Segmenter,
}

#[pymethods]
impl PySegmenter {
    #[new]
    #[pyo3(signature = (scale_name = "desk", seed = 0))]
    fn new(scale_name: &str, seed: u64) -> PyResult<Self> {
        let cfg = SegmenterConfig::preset(scale(scale_name)?);
        Ok(Self { net: Segmenter::build(&cfg, seed).map_err(err)? })
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.net.input_spec().height
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.net.store().num_params()
    }

    fn load(&mut self, path: PathBuf) -> PyResult<()> {
        Checkpoint::load(&path).and_then(|c| c.restore_into(&mut self.net)).map_err(err)
    }

    fn predict(&self, images: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let size = self.input_size();
        let x = batch(images, size)?;
        let y = self.net.predict(&x).map_err(err)?;
        Ok(y.data().chunks(size * size).map(<[f64]>::to_vec).collect())
    }
}

/// Class-frequency-weighted (precision, recall).
#[pyfunction]
fn weighted_precision_recall(labels: Vec<u8>, preds: Vec<u8>) -> PyResult<(f64, f64)> {
    let (c, w) = confusion_from_predictions(&labels, &preds).map_err(err)?;
    Ok((weighted_precision(&c, &w), weighted_recall(&c, &w)))
}

#[pyfunction(name = "roc_auc")]
fn py_roc_auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    roc_auc(&scores, &labels).map_err(err)
}

#[pyfunction(name = "iou")]
fn py_iou(pred: Vec<u8>, target: Vec<u8>) -> PyResult<f64> {
    iou(&pred, &target).map_err(err)
}

/// Sensitivity, specificity, PPV and NPV from patient counts.
#[pyfunction(name = "patient_metrics")]
fn py_patient_metrics(py: Python<'_>, tp: u64, fp: u64, tn: u64, fn_: u64) -> PyResult<PyObject> {
    let m = patient_metrics(&PatientConfusion { tp, fp, tn, fn_ });
    let d = PyDict::new(py);
    d.set_item("sensitivity", m.sensitivity)?;
    d.set_item("specificity", m.specificity)?;
    d.set_item("ppv", m.ppv)?;
    d.set_item("npv", m.npv)?;
    Ok(d.into_any().unbind())
}

#[pyfunction(name = "cascade_label")]
#[pyo3(signature = (ensemble_prob, fp_net_prob = None, threshold = 0.5))]
fn py_cascade_label(ensemble_prob: f64, fp_net_prob: Option<f64>, threshold: f64) -> PyResult<&'static str> {
    cascade_label(ensemble_prob, fp_net_prob, threshold).map(label_name).map_err(err)
}

/// (verdict, flagged slice indices) for a study's image labels.
#[pyfunction(name = "patient_verdict")]
fn py_patient_verdict(labels: Vec<String>) -> PyResult<(&'static str, Vec<usize>)> {
    let labels: Vec<SliceLabel> = labels.iter().map(|s| parse_label(s)).collect::<PyResult<_>>()?;
    let v = patient_verdict("study", &labels).map_err(err)?;
    Ok((label_name(v.verdict), v.flagged_slices))
}

/// A run configuration driving synth, split, train, eval and triage.
#[pyclass]
struct Pipeline {
    config: RunConfig,
}

#[pymethods]
impl Pipeline {
    #[new]
    #[pyo3(signature = (toml = ""))]
    fn new(toml: &str) -> PyResult<Self> {
        Ok(Self { config: RunConfig::from_toml_str(toml).map_err(err)? })
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(Self { config: RunConfig::load(&path).map_err(err)? })
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.config.config_hash()
    }

    #[getter]
    fn run_dir(&self) -> PathBuf {
        self.config.run_dir()
    }

    fn synth(&self) -> PyResult<PathBuf> {
        cmd_synth(&self.config).map_err(err)
    }

    fn split(&self) -> PyResult<PathBuf> {
        cmd_split(&self.config).map_err(err)
    }

    fn train(&self, target: &str) -> PyResult<PathBuf> {
        let t: Target = target.parse().map_err(err)?;
        cmd_train(&self.config, t).map_err(err)
    }

    #[pyo3(signature = (split = "test"))]
    fn eval(&self, split: &str) -> PyResult<PathBuf> {
        let s: Split = split.parse().map_err(err)?;
        cmd_eval(&self.config, s).map_err(err)
    }

    /// Triage one volume; returns the report as a JSON string.
    fn triage(&self, volume_path: PathBuf) -> PyResult<String> {
        let (report, _) = cmd_triage(&self.config, &volume_path).map_err(err)?;
        serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

#[pymodule]
fn pecad_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyClassifier>()?;
    m.add_class::<PySegmenter>()?;
    m.add_class::<Pipeline>()?;
    m.add_function(wrap_pyfunction!(phantom_study, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess_volume, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_precision_recall, m)?)?;
    m.add_function(wrap_pyfunction!(py_roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(py_iou, m)?)?;
    m.add_function(wrap_pyfunction!(py_patient_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(py_cascade_label, m)?)?;
    m.add_function(wrap_pyfunction!(py_patient_verdict, m)?)?;
    Ok(())
}
