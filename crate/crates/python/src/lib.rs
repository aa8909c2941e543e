use std::path::PathBuf;

use crossstate_core::adaptive_auth::{self, Decision, Gallery, ThresholdWeights};
use crossstate_core::autodiff::Tensor;
use crossstate_core::config::RunConfig;
use crossstate_core::data_io::{synth_ecg as core_synth_ecg, EcgRecord, SplitMode, SubjectParams};
use crossstate_core::evaluate;
use crossstate_core::losses::{self, LossConfig};
use crossstate_core::model::{Ablation, Model, ModelConfig};
use crossstate_core::preprocess::{self, PreprocessConfig};
use crossstate_core::{Error, State};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

create_exception!(crossstate, CrossStateError, PyException);

/// Raised as `CrossStateError(code, message)`.
fn py_err(e: Error) -> PyErr {
    CrossStateError::new_err((e.code(), e.to_string()))
}

fn parse<T: std::str::FromStr<Err = String>>(s: &str) -> PyResult<T> {
    s.parse().map_err(PyValueError::new_err)
}

fn json_to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (v.to_string(),))?.unbind())
}

fn batch(segments: &[Vec<f64>]) -> PyResult<Tensor<f32>> {
    let l = segments.first().map_or(0, Vec::len);
    if l == 0 || segments.iter().any(|s| s.len() != l) {
        return Err(PyValueError::new_err("segments must be non-empty and of equal length"));
    }
    let data = segments.iter().flatten().map(|&v| v as f32).collect();
    Tensor::new(&[segments.len(), 1, l], data).map_err(py_err)
}

fn rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let w = t.shape()[1];
    t.data().chunks(w).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

/// Synthetic ECG for one subject. Returns `(samples, r_peaks)`.
#[pyfunction]
#[pyo3(signature = (state, duration_s, fs_hz = 100.0, noise_std = 0.05, seed = 0, subject_seed = 0))]
fn synth_ecg(state: &str, duration_s: f64, fs_hz: f64, noise_std: f64, seed: u64, subject_seed: u64) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let params = SubjectParams::random(subject_seed);
    let out = core_synth_ecg(&params, parse(state)?, duration_s, noise_std, seed, fs_hz).map_err(py_err)?;
    Ok((out.record.samples_f64(), out.r_peaks))
}

/// Zero-phase 0.5-40 Hz bandpass of a raw signal.
#[pyfunction]
fn bandpass(x: Vec<f64>, fs_hz: f64) -> PyResult<Vec<f64>> {
    preprocess::condition(&x, fs_hz, &PreprocessConfig::default()).map_err(py_err)
}

#[pyfunction]
fn detect_r_peaks(x: Vec<f64>, fs_hz: f64) -> Vec<usize> {
    preprocess::detect_r_peaks(&x, fs_hz)
}

/// Quality-gated R-anchored segments of a raw record.
#[pyfunction]
#[pyo3(signature = (samples, fs_hz, state, subject = "s01"))]
fn segment_record(samples: Vec<f64>, fs_hz: f64, state: &str, subject: &str) -> PyResult<Vec<Vec<f64>>> {
    let record = EcgRecord::new(subject, parse(state)?, fs_hz, samples.iter().map(|&v| v as f32).collect());
    let (segs, _) = preprocess::preprocess_record(&record, &PreprocessConfig::default()).map_err(py_err)?;
    Ok(segs.into_iter().map(|s| s.samples).collect())
}

/// Multi-similarity loss of row embeddings. Returns `(value, grad rows)`.
#[pyfunction]
fn ms_loss(embeddings: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let dim = embeddings.first().map_or(0, Vec::len);
    let flat: Vec<f64> = embeddings.concat();
    let out = losses::ms_loss(&flat, dim, &labels, &LossConfig::default()).map_err(py_err)?;
    Ok((out.value, out.grad.chunks(dim.max(1)).map(<[f64]>::to_vec).collect()))
}

#[pyfunction]
#[pyo3(signature = (logits, labels, gamma = 2.0))]
fn focal_loss(logits: Vec<Vec<f64>>, labels: Vec<usize>, gamma: f64) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let c = logits.first().map_or(0, Vec::len);
    let out = losses::focal_loss(&logits.concat(), c, &labels, gamma).map_err(py_err)?;
    Ok((out.value, out.grad.chunks(c.max(1)).map(<[f64]>::to_vec).collect()))
}

#[pyfunction]
fn global_factor(tau_b: f64, mu_g: f64, mu_i: f64) -> PyResult<f64> {
    adaptive_auth::global_factor(tau_b, mu_g, mu_i).map_err(py_err)
}

#[pyfunction]
fn personal_factor(mu_p: f64, mu_g: f64, sigma_g: f64) -> PyResult<f64> {
    adaptive_auth::personal_factor(mu_p, mu_g, sigma_g).map_err(py_err)
}

#[pyfunction]
fn local_factor(tau_b: f64, scores: Vec<f64>) -> PyResult<f64> {
    adaptive_auth::local_factor(tau_b, &scores).map_err(py_err)
}

/// Personalised threshold. Returns `(tau_p, clamped)`.
#[pyfunction]
#[pyo3(signature = (tau_b, f_g, f_p, f_l, w_g = 0.5, w_p = 0.3, w_l = 0.2))]
fn adaptive_threshold(tau_b: f64, f_g: f64, f_p: f64, f_l: f64, w_g: f64, w_p: f64, w_l: f64) -> (f64, bool) {
    adaptive_auth::adaptive_threshold(tau_b, f_g, f_p, f_l, &ThresholdWeights { w_g, w_p, w_l })
}

/// `(far, frr)` at a threshold.
#[pyfunction]
fn far_frr(genuine: Vec<f64>, impostor: Vec<f64>, threshold: f64) -> PyResult<(f64, f64)> {
    evaluate::far_frr(&genuine, &impostor, threshold).map_err(py_err)
}

#[pyfunction]
fn roc_auc(genuine: Vec<f64>, impostor: Vec<f64>) -> PyResult<f64> {
    Ok(evaluate::roc_auc(&genuine, &impostor).map_err(py_err)?.1)
}

/// `(eer, threshold)`.
#[pyfunction]
fn eer(genuine: Vec<f64>, impostor: Vec<f64>) -> PyResult<(f64, f64)> {
    evaluate::eer(&genuine, &impostor).map_err(py_err)
}

/// Trains and evaluates one scenario on a dataset directory; returns the report.
#[pyfunction]
#[pyo3(signature = (data, out, mode = "rest2exercise", config = None))]
fn train(py: Python<'_>, data: PathBuf, out: PathBuf, mode: &str, config: Option<PathBuf>) -> PyResult<Py<PyAny>> {
    let cfg = match config {
        Some(p) => RunConfig::load(&p).map_err(py_err)?,
        None => RunConfig::default(),
    };
    let mode: SplitMode = parse(mode)?;
    let (segments, _) = preprocess::load_segments(&data, &cfg.preprocess).map_err(py_err)?;
    let outcome = evaluate::run_scenario(&cfg, mode, &segments, Some(&out)).map_err(py_err)?;
    json_to_py(py, &serde_json::to_value(outcome.report()).expect("report serialises"))
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: Model<f32>,
}

#[pymethods]
impl PyModel {
    /// Fresh network; `desk` selects the reduced widths used for CPU runs.
    #[new]
    #[pyo3(signature = (n_subjects, seed = 42, desk = true, ablation = "A1"))]
    fn new(n_subjects: usize, seed: u64, desk: bool, ablation: &str) -> PyResult<Self> {
        let base = if desk { ModelConfig::desk(n_subjects) } else { ModelConfig { n_subjects, ..ModelConfig::default() } };
        let cfg = base.with_ablation(parse::<Ablation>(ablation)?);
        Ok(Self { inner: Model::new(cfg, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Model::load(&dir).map_err(py_err)?.0 })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir, serde_json::json!({})).map_err(py_err)
    }

    /// Unit-norm embeddings of equal-length segments.
    fn embed(&self, segments: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.embed(&batch(&segments)?).map_err(py_err)?))
    }

    fn logits(&self, segments: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.infer(&batch(&segments)?).map_err(py_err)?.1))
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.inner.config.embedding_dim
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!("Model(n_subjects={}, deep_channels={:?}, parameters={})", c.n_subjects, c.deep_channels, self.inner.num_parameters())
    }
}

#[pyclass(name = "Gallery")]
struct PyGallery {
    inner: Gallery,
}

#[pymethods]
impl PyGallery {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Gallery::load(&path).map_err(py_err)? })
    }

    fn users(&self) -> Vec<String> {
        self.inner.users.keys().cloned().collect()
    }

    fn threshold(&self, user: &str) -> Option<f64> {
        self.inner.users.get(user).map(|e| e.tau_p)
    }

    /// Returns `(accepted, score, tau_p)` for a claimed identity.
    fn verify(&self, probe: Vec<f64>, user: &str) -> PyResult<(bool, f64, f64)> {
        let (template, tau_p) = self
            .inner
            .entry(user)
            .ok_or_else(|| py_err(Error::InsufficientData(format!("user {user} is not enrolled"))))?;
        let (decision, score) = adaptive_auth::verify(&probe, &template, tau_p);
        Ok((decision == Decision::Accept, score, tau_p))
    }

    /// Returns `(user, score)` of the most similar template.
    fn identify(&self, probe: Vec<f64>) -> PyResult<(String, f64)> {
        let templates = self.inner.templates();
        let (t, score) = adaptive_auth::identify(&probe, &templates).map_err(py_err)?;
        Ok((t.user.clone(), score))
    }

    fn __len__(&self) -> usize {
        self.inner.users.len()
    }
}

#[pymodule]
pub fn crossstate(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CrossStateError", m.py().get_type::<CrossStateError>())?;
    m.add("STATES", [State::Rest.to_string(), State::Exercise.to_string()])?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyGallery>()?;
    m.add_function(wrap_pyfunction!(synth_ecg, m)?)?;
    m.add_function(wrap_pyfunction!(bandpass, m)?)?;
    m.add_function(wrap_pyfunction!(detect_r_peaks, m)?)?;
    m.add_function(wrap_pyfunction!(segment_record, m)?)?;
    m.add_function(wrap_pyfunction!(ms_loss, m)?)?;
    m.add_function(wrap_pyfunction!(focal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(global_factor, m)?)?;
    m.add_function(wrap_pyfunction!(personal_factor, m)?)?;
    m.add_function(wrap_pyfunction!(local_factor, m)?)?;
    m.add_function(wrap_pyfunction!(adaptive_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(far_frr, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(eer, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
