//! Python bindings: token codec, metrics, synthetic samples and
//! checkpoint inference.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use stxv3::codec::{self, PromptTask};
use stxv3::eval::{self, SpottingMatchMode};
use stxv3::synth::{self, Family, GeneratorConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn vocab(bins: u32) -> PyResult<codec::Vocab> {
    codec::Vocab::new(bins).map_err(value_err)
}

fn task(name: &str) -> PyResult<PromptTask> {
    name.parse().map_err(value_err)
}

/// Axis-aligned text box with its transcription, in pixels.
#[pyclass(name = "TextInstance", module = "stxv3", eq, from_py_object)]
#[derive(Clone, PartialEq)]
pub struct PyTextInstance {
    inner: codec::TextInstance,
}

#[pymethods]
impl PyTextInstance {
    #[new]
    fn new(x1: f64, y1: f64, x2: f64, y2: f64, text: String) -> PyResult<Self> {
        codec::TextInstance::new(x1, y1, x2, y2, text).map(|inner| Self { inner }).map_err(value_err)
    }

    #[getter]
    fn x1(&self) -> f64 {
        self.inner.x1
    }

    #[getter]
    fn y1(&self) -> f64 {
        self.inner.y1
    }

    #[getter]
    fn x2(&self) -> f64 {
        self.inner.x2
    }

    #[getter]
    fn y2(&self) -> f64 {
        self.inner.y2
    }

    #[getter]
    fn text(&self) -> String {
        self.inner.transcription.clone()
    }

    fn center(&self) -> (f64, f64) {
        self.inner.center()
    }

    fn __repr__(&self) -> String {
        let i = &self.inner;
        format!("TextInstance({}, {}, {}, {}, {:?})", i.x1, i.y1, i.x2, i.y2, i.transcription)
    }
}

fn unwrap_instances(v: &[PyTextInstance]) -> Vec<codec::TextInstance> {
    v.iter().map(|i| i.inner.clone()).collect()
}

fn wrap_instances(v: Vec<codec::TextInstance>) -> Vec<PyTextInstance> {
    v.into_iter().map(|inner| PyTextInstance { inner }).collect()
}

/// Token vocabulary: 256 byte tokens, control tokens, then x and y bins.
#[pyclass(name = "Vocab", module = "stxv3")]
pub struct PyVocab {
    inner: codec::Vocab,
}

#[pymethods]
impl PyVocab {
    #[new]
    #[pyo3(signature = (bins = codec::DEFAULT_BINS))]
    fn new(bins: u32) -> PyResult<Self> {
        Ok(Self { inner: vocab(bins)? })
    }

    #[getter]
    fn size(&self) -> usize {
        self.inner.size()
    }

    #[getter]
    fn bins(&self) -> u32 {
        self.inner.bins()
    }

    #[staticmethod]
    fn encode_text(text: &str) -> Vec<u32> {
        codec::encode_text(text)
    }

    fn decode(&self, ids: Vec<u32>) -> String {
        codec::decode_text(&ids, &self.inner)
    }
}

/// Token ids for `instances` in reading order.
#[pyfunction]
#[pyo3(signature = (instances, width, height, bins = codec::DEFAULT_BINS))]
fn serialize_instances(instances: Vec<PyTextInstance>, width: f64, height: f64, bins: u32) -> PyResult<Vec<u32>> {
    codec::serialize_instances(&unwrap_instances(&instances), width, height, &vocab(bins)?).map_err(value_err)
}

/// Recovered instances plus one message per skipped malformed span.
#[pyfunction]
#[pyo3(signature = (ids, width, height, bins = codec::DEFAULT_BINS))]
fn parse_instances(ids: Vec<u32>, width: f64, height: f64, bins: u32) -> PyResult<(Vec<PyTextInstance>, Vec<String>)> {
    let (inst, diags) = codec::parse_instances(&ids, &vocab(bins)?, width, height);
    Ok((wrap_instances(inst), diags.iter().map(|d| format!("{d:?}")).collect()))
}

#[pyfunction]
fn levenshtein(a: &str, b: &str) -> usize {
    eval::levenshtein(a, b)
}

#[pyfunction]
fn one_minus_ned(pred: &str, gt: &str) -> f64 {
    eval::one_minus_ned(pred, gt)
}

/// Mean over questions of the best thresholded similarity to any answer.
#[pyfunction]
#[pyo3(signature = (pairs, threshold = eval::ANLS_THRESHOLD))]
fn anls(pairs: Vec<(String, Vec<String>)>, threshold: f64) -> f64 {
    eval::anls(&pairs, threshold)
}

#[pyfunction]
#[pyo3(signature = (pred, gt, tolerance = eval::RELAXED_TOLERANCE))]
fn relaxed_accuracy(pred: &str, gt: &str, tolerance: f64) -> bool {
    eval::relaxed_accuracy(pred, gt, tolerance)
}

/// Table F1 over (row col, value) entries; tables as CSV, markdown or JSON.
#[pyfunction]
fn rms_f1(pred: &str, gt: &str) -> PyResult<f64> {
    let p = eval::DataTable::parse(pred).map_err(value_err)?;
    let g = eval::DataTable::parse(gt).map_err(value_err)?;
    eval::rms_f1(&p, &g).map_err(value_err)
}

/// `(precision, recall, f1)`; mode is "transcription" or "point".
#[pyfunction]
#[pyo3(signature = (preds, gts, mode = "transcription"))]
fn spotting_prf(preds: Vec<PyTextInstance>, gts: Vec<PyTextInstance>, mode: &str) -> PyResult<(Option<f64>, Option<f64>, f64)> {
    let mode = match mode {
        "transcription" => SpottingMatchMode::TranscriptionOnly,
        "point" => SpottingMatchMode::PointAndTranscription,
        other => return Err(PyValueError::new_err(format!("unknown mode {other:?}; use \"transcription\" or \"point\""))),
    };
    let r = eval::spotting_prf(&unwrap_instances(&preds), &unwrap_instances(&gts), mode);
    Ok((r.precision, r.recall, r.value))
}

/// Evaluation report of a prediction file against a dataset, as JSON.
#[pyfunction]
#[pyo3(signature = (pred, gt, task = None, bins = codec::DEFAULT_BINS))]
fn evaluate(pred: PathBuf, gt: PathBuf, task: Option<&str>, bins: u32) -> PyResult<String> {
    let task = task.map(self::task).transpose()?;
    let report = eval::evaluate_run(&pred, &gt, task, &vocab(bins)?).map_err(value_err)?;
    Ok(report.to_json())
}

/// One generated sample with its image and target.
#[pyclass(name = "Sample", module = "stxv3", get_all)]
pub struct PySample {
    id: String,
    family: String,
    task: String,
    prompt: String,
    target: String,
    width: usize,
    height: usize,
    channels: usize,
    instances: Option<Vec<PyTextInstance>>,
    pixels: Option<Vec<u8>>,
}

#[pymethods]
impl PySample {
    /// Row-major interleaved pixel bytes, or None for text-only samples.
    fn image_bytes<'py>(&self, py: Python<'py>) -> Option<Bound<'py, PyBytes>> {
        self.pixels.as_ref().map(|p| PyBytes::new(py, p))
    }

    fn __repr__(&self) -> String {
        format!("Sample(id={:?}, task={:?}, target={:?})", self.id, self.task, self.target)
    }
}

/// Sample `index` of `family` ("spotting", "kie", ...).
#[pyfunction]
#[pyo3(signature = (family, index, seed = 0, image_size = 64))]
fn generate_sample(family: &str, index: u64, seed: u64, image_size: usize) -> PyResult<PySample> {
    let family: Family = family.parse().map_err(value_err)?;
    let config = GeneratorConfig { seed, image_size, ..GeneratorConfig::default() };
    config.validate().map_err(value_err)?;
    let s = synth::generate(family, index, &config).map_err(value_err)?;
    let (width, height, channels) = s.image.as_ref().map_or((0, 0, 0), |i| (i.width, i.height, i.channels));
    Ok(PySample {
        id: s.id,
        family: family.name().to_string(),
        task: s.task.to_string(),
        prompt: s.prompt,
        target: s.target,
        width,
        height,
        channels,
        instances: s.instances.map(wrap_instances),
        pixels: s.image.map(|i| i.data),
    })
}

/// Trained model loaded from a checkpoint file.
#[pyclass(name = "Model", module = "stxv3", unsendable)]
pub struct PyModel {
    model: stxv3::model::Model<f32>,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let trainer = stxv3::train::load_checkpoint(&path).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(Self { model: trainer.model })
    }

    /// Square input side in pixels.
    #[getter]
    fn image_size(&self) -> usize {
        self.model.config.encoder.input_size
    }

    /// Greedy decoding. `pixels` holds `image_size`² RGB or gray bytes.
    /// Returns the decoded text and, for spotting, the parsed instances.
    #[pyo3(signature = (task, pixels = None, channels = 3, prompt = ""))]
    fn infer(&self, task: &str, pixels: Option<&[u8]>, channels: usize, prompt: &str) -> PyResult<(String, Option<Vec<PyTextInstance>>)> {
        let side = self.image_size();
        let image = match pixels {
            Some(data) => {
                if !(channels == 1 || channels == 3) || data.len() != side * side * channels {
                    return Err(PyValueError::new_err(format!(
                        "expected {side}x{side} pixels with 1 or 3 channels ({} or {} bytes), got {} bytes",
                        side * side,
                        side * side * 3,
                        data.len()
                    )));
                }
                Some(synth::Image { width: side, height: side, channels, data: data.to_vec() })
            }
            None => None,
        };
        let out = stxv3::cli::infer(&self.model, self::task(task)?, image.as_ref(), prompt).map_err(value_err)?;
        Ok((out.output, out.instances.map(wrap_instances)))
    }
}

#[pymodule]
#[pyo3(name = "stxv3")]
pub fn stxv3_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTextInstance>()?;
    m.add_class::<PyVocab>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(serialize_instances, m)?)?;
    m.add_function(wrap_pyfunction!(parse_instances, m)?)?;
    m.add_function(wrap_pyfunction!(levenshtein, m)?)?;
    m.add_function(wrap_pyfunction!(one_minus_ned, m)?)?;
    m.add_function(wrap_pyfunction!(anls, m)?)?;
    m.add_function(wrap_pyfunction!(relaxed_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(rms_f1, m)?)?;
    m.add_function(wrap_pyfunction!(spotting_prf, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(generate_sample, m)?)?;
    Ok(())
}
