//! Python bindings: feature extraction, synthetic data, training, scoring
//! and EER computation.

use std::io::ErrorKind;
use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyIOError, PyValueError};
use pyo3::prelude::*;

use sslfuse::data::read_manifest;
use sslfuse::dsp::{canonicalize_length, Waveform, DEFAULT_CLIP_LEN};
use sslfuse::evaluation::{score_manifest, ScoreSet};
use sslfuse::features::{FeatureKind, SpectralConfig};
use sslfuse::fusion::Strategy;
use sslfuse::model::{gradcheck_detector, FeatureLoader, ModelConfig};
use sslfuse::training::TrainConfig;

fn py_err(e: sslfuse::Error) -> PyErr {
    match &e {
        sslfuse::Error::Io { source, .. } if source.kind() == ErrorKind::NotFound => {
            PyFileNotFoundError::new_err(e.to_string())
        }
        sslfuse::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn wrap<T>(r: sslfuse::Result<T>) -> PyResult<T> {
    r.map_err(py_err)
}

fn waveform(samples: Vec<f64>, sample_rate: u32, canonicalize: bool) -> PyResult<Waveform> {
    let w = wrap(Waveform::new(samples, sample_rate))?;
    Ok(if canonicalize {
        canonicalize_length(&w, DEFAULT_CLIP_LEN)
    } else {
        w
    })
}

/// Cepstral features (frames × 60) of a mono waveform.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate = 16000, feature = "mfcc", canonicalize = true))]
fn extract_features(samples: Vec<f64>, sample_rate: u32, feature: &str, canonicalize: bool) -> PyResult<Vec<Vec<f64>>> {
    let kind: FeatureKind = wrap(feature.parse())?;
    let w = waveform(samples, sample_rate, canonicalize)?;
    Ok(wrap(sslfuse::features::extract(&w, &SpectralConfig::new(kind)))?
        .data
        .to_rows())
}

/// Deterministic pseudo-SSL features (201 × 1024) of a mono waveform.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate = 16000, seed = 0))]
fn pseudo_ssl_features(samples: Vec<f64>, sample_rate: u32, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let w = waveform(samples, sample_rate, false)?;
    Ok(wrap(sslfuse::synth::synth_ssl_features(&w, seed))?.data.to_rows())
}

/// Samples scaled to [-1, 1) and the sample rate.
#[pyfunction]
fn read_wav(path: PathBuf) -> PyResult<(Vec<f64>, u32)> {
    let w = wrap(sslfuse::wav::read_wav(path))?;
    let sr = w.sample_rate();
    Ok((w.into_samples(), sr))
}

#[pyfunction]
#[pyo3(signature = (path, samples, sample_rate = 16000))]
fn write_wav(path: PathBuf, samples: Vec<f64>, sample_rate: u32) -> PyResult<()> {
    wrap(sslfuse::wav::write_wav(
        path,
        &wrap(Waveform::new(samples, sample_rate))?,
    ))
}

/// `(data, stream, frame_rate, provenance)` from a feature file.
#[pyfunction]
fn read_features(path: PathBuf) -> PyResult<(Vec<Vec<f64>>, String, f64, String)> {
    let fm = wrap(sslfuse::data::read_features(path))?;
    let stream = match fm.stream {
        sslfuse::features::Stream::Sf => "sf",
        sslfuse::features::Stream::Ssl => "ssl",
    };
    Ok((fm.data.to_rows(), stream.to_string(), fm.frame_rate, fm.provenance))
}

/// `(eer, threshold)`; higher scores mean more bona fide.
#[pyfunction]
fn compute_eer(bonafide: Vec<f64>, spoof: Vec<f64>) -> PyResult<(f64, f64)> {
    let r = wrap(sslfuse::evaluation::compute_eer(&ScoreSet::from_pairs(
        &bonafide, &spoof,
    )))?;
    Ok((r.eer, r.threshold))
}

/// Writes a synthetic corpus and returns the train and eval manifest paths.
#[pyfunction]
#[pyo3(signature = (dir, n_train = 200, n_eval = 100, seed = 42))]
fn generate_corpus(dir: PathBuf, n_train: usize, n_eval: usize, seed: u64) -> PyResult<(PathBuf, PathBuf)> {
    let c = wrap(sslfuse::synth::generate_corpus(dir, n_train, n_eval, seed))?;
    Ok((c.train_path, c.eval_path))
}

/// Largest relative gradient error over all parameter groups of a small
/// detector.
#[pyfunction]
#[pyo3(signature = (strategy, seed = 0, shared_mutual = true))]
fn gradcheck(strategy: &str, seed: u64, shared_mutual: bool) -> PyResult<f64> {
    let s: Strategy = wrap(strategy.parse())?;
    Ok(wrap(gradcheck_detector(s, seed, shared_mutual))?.max_rel_error())
}

#[pyclass(name = "Detector", module = "sslfuse_py")]
struct Detector {
    inner: sslfuse::model::Detector,
}

#[pymethods]
impl Detector {
    #[new]
    #[pyo3(signature = (strategy = "gating", feature = "mfcc", seed = 0))]
    fn new(strategy: &str, feature: &str, seed: u64) -> PyResult<Self> {
        let config = ModelConfig::new(wrap(strategy.parse())?, wrap(feature.parse())?);
        Ok(Self {
            inner: sslfuse::model::Detector::new(config, seed),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: wrap(sslfuse::model::Detector::load(path))?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        wrap(self.inner.save(path))
    }

    #[getter]
    fn strategy(&self) -> String {
        self.inner.config.strategy.to_string()
    }

    #[getter]
    fn feature(&self) -> String {
        self.inner.config.feature.to_string()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    /// `[(utt_id, score, label)]` for every manifest entry.
    fn score_manifest(&self, manifest: PathBuf) -> PyResult<Vec<(String, f64, String)>> {
        let m = wrap(read_manifest(manifest))?;
        let scored = wrap(score_manifest(&self.inner, &m))?;
        Ok(scored
            .scores
            .entries
            .into_iter()
            .map(|e| (e.utt_id, e.score, e.label.to_string()))
            .collect())
    }

    /// `[(utt_id, [(w_sf, w_ssl), ...])]`; empty unless the strategy is gating.
    fn gate_traces(&self, manifest: PathBuf) -> PyResult<Vec<(String, Vec<(f64, f64)>)>> {
        let m = wrap(read_manifest(manifest))?;
        let scored = wrap(score_manifest(&self.inner, &m))?;
        Ok(scored
            .traces
            .into_iter()
            .map(|t| {
                let w = (0..t.trace.frames())
                    .map(|i| (t.trace.w_sf(i), t.trace.w_ssl(i)))
                    .collect();
                (t.utt_id, w)
            })
            .collect())
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Detector(strategy='{}', feature='{}', parameters={})",
            c.strategy,
            c.feature,
            self.num_parameters()
        )
    }
}

/// Trains a detector; returns the best model and per-epoch
/// `(epoch, lr, train_loss, eval_eer)` rows.
#[pyfunction]
#[pyo3(signature = (
    manifest,
    eval_manifest = None,
    strategy = "gating",
    feature = "mfcc",
    epochs = 20,
    lr = 1e-3,
    batch_size = 32,
    seed = 0
))]
#[allow(clippy::too_many_arguments)]
fn train(
    manifest: PathBuf,
    eval_manifest: Option<PathBuf>,
    strategy: &str,
    feature: &str,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> PyResult<(Detector, Vec<(usize, f64, f64, f64)>)> {
    let config = ModelConfig::new(wrap(strategy.parse())?, wrap(feature.parse())?);
    let mut loader = FeatureLoader::new(SpectralConfig::new(config.feature));
    let mut load = |p: PathBuf| -> PyResult<_> {
        let m = wrap(read_manifest(p))?;
        wrap(loader.load(&m, config.uses_sf(), config.uses_ssl()))
    };
    let train_set = load(manifest)?;
    let eval_set = match eval_manifest {
        Some(p) => load(p)?,
        None => vec![],
    };
    let cfg = TrainConfig {
        epochs,
        lr,
        batch_size,
        seed,
        ..TrainConfig::default()
    };
    let model = sslfuse::model::Detector::new(config, seed);
    let outcome = wrap(sslfuse::training::train(model, &train_set, &eval_set, &cfg))?;
    let metrics = outcome
        .metrics
        .iter()
        .map(|m| (m.epoch, m.lr, m.train_loss, m.eval_eer))
        .collect();
    Ok((Detector { inner: outcome.model }, metrics))
}

#[pymodule]
fn sslfuse_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Detector>()?;
    m.add_function(wrap_pyfunction!(extract_features, m)?)?;
    m.add_function(wrap_pyfunction!(pseudo_ssl_features, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(write_wav, m)?)?;
    m.add_function(wrap_pyfunction!(read_features, m)?)?;
    m.add_function(wrap_pyfunction!(compute_eer, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("CLIP_LEN", DEFAULT_CLIP_LEN)?;
    Ok(())
}
