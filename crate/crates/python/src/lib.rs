//! Python module `neurovox`: synthetic data, feature extraction, model
//! training and the evaluation statistics of `neurovox-core`.

use ndarray::Array2;
use neurovox_core::audio::{self, MelConfig, MelSpectrogram};
use neurovox_core::contamination::{self, ContaminationConfig};
use neurovox_core::data_io::{self, Recording as CoreRecording};
use neurovox_core::evaluation;
use neurovox_core::experiment::{self, Arch, ExperimentConfig, RunOptions};
use neurovox_core::models::{self, DenseNet, DenseNetConfig, Seq2Seq, Seq2SeqConfig};
use neurovox_core::synthdata::{self, SynthConfig};
use neurovox_core::{dsp, Error};
use numpy::{IntoPyArray, PyArray1, PyArray2, PyReadonlyArray1, PyReadonlyArray2};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::PathBuf;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Shape { .. } | Error::Alignment(_) | Error::Unsupported(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Multichannel neural recording with synchronised 16-bit audio.
#[pyclass(module = "neurovox", skip_from_py_object)]
#[derive(Clone)]
pub struct Recording {
    inner: CoreRecording,
}

#[pymethods]
impl Recording {
    #[new]
    #[pyo3(signature = (neural, fs_neural, audio, fs_audio, session_id = "session".to_string()))]
    fn new(
        neural: PyReadonlyArray2<'_, f32>,
        fs_neural: f64,
        audio: PyReadonlyArray1<'_, i16>,
        fs_audio: f64,
        session_id: String,
    ) -> PyResult<Self> {
        let neural = neural.as_array().to_owned();
        let inner = CoreRecording {
            channel_labels: (0..neural.nrows()).map(|i| format!("ch{i}")).collect(),
            neural,
            fs_neural,
            audio: audio.as_array().to_vec(),
            fs_audio,
            session_id,
        };
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Loads the recording described by a session manifest.
    #[staticmethod]
    fn load(manifest: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: data_io::load_recording(&manifest).map_err(py_err)?,
        })
    }

    /// Writes neural, audio and manifest files into `directory`; returns the
    /// manifest path.
    fn save(&self, directory: PathBuf) -> PyResult<PathBuf> {
        data_io::save_recording(&self.inner, &directory, "python", Vec::new()).map_err(py_err)
    }

    #[getter]
    fn neural<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray2<f32>> {
        self.inner.neural.clone().into_pyarray(py)
    }

    #[getter]
    fn audio<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray1<i16>> {
        self.inner.audio.clone().into_pyarray(py)
    }

    #[getter]
    fn fs_neural(&self) -> f64 {
        self.inner.fs_neural
    }

    #[getter]
    fn fs_audio(&self) -> f64 {
        self.inner.fs_audio
    }

    #[getter]
    fn n_channels(&self) -> usize {
        self.inner.n_channels()
    }

    #[getter]
    fn duration_s(&self) -> f64 {
        self.inner.duration_s()
    }

    fn __repr__(&self) -> String {
        format!(
            "Recording({} channels at {} Hz, {:.1} s)",
            self.inner.n_channels(),
            self.inner.fs_neural,
            self.inner.duration_s()
        )
    }
}

/// Generates a synthetic recording with known latent speech features.
#[pyfunction]
#[pyo3(signature = (duration_s = 300.0, n_channels = 16, snr_db = Some(10.0), neural_lag_ms = 100.0, speech_duty = 0.45, seed = 0))]
fn synthesize_recording(
    py: Python<'_>,
    duration_s: f64,
    n_channels: usize,
    snr_db: Option<f64>,
    neural_lag_ms: f64,
    speech_duty: f64,
    seed: u64,
) -> PyResult<Recording> {
    let cfg = SynthConfig {
        duration_s,
        n_channels,
        snr_db,
        neural_lag_ms,
        speech_duty,
        seed,
        ..Default::default()
    };
    let s = py.detach(|| synthdata::generate(&cfg)).map_err(py_err)?;
    Ok(Recording { inner: s.recording })
}

/// High-gamma envelope features `[channels, samples]` at 1024 Hz.
#[pyfunction]
fn extract_features<'py>(py: Python<'py>, recording: &Recording) -> PyResult<Bound<'py, PyArray2<f32>>> {
    let rec = recording.inner.clone();
    let f = py.detach(|| dsp::extract_features(&rec)).map_err(py_err)?;
    Ok(f.data.into_pyarray(py))
}

/// Log-mel spectrogram `[80, frames]` of audio at 48 kHz or 22050 Hz.
#[pyfunction]
fn mel_spectrogram<'py>(py: Python<'py>, audio: PyReadonlyArray1<'_, f32>, fs: f64) -> PyResult<Bound<'py, PyArray2<f32>>> {
    let x = audio.as_array().to_vec();
    let mel = py
        .detach(|| {
            let y = audio::resample_audio(&x, fs)?;
            audio::mel_spectrogram(&y, &MelConfig::default())
        })
        .map_err(py_err)?;
    Ok(mel.data.into_pyarray(py))
}

/// Waveform at 22050 Hz from a log-mel spectrogram by Griffin-Lim.
#[pyfunction]
#[pyo3(signature = (mel, iterations = 32, seed = 0))]
fn griffin_lim<'py>(py: Python<'py>, mel: PyReadonlyArray2<'_, f32>, iterations: usize, seed: u64) -> PyResult<Bound<'py, PyArray1<f32>>> {
    let cfg = MelConfig::default();
    let mel = MelSpectrogram {
        data: mel.as_array().to_owned(),
        frame_shift_ms: cfg.frame_shift_ms,
        origin_time: 0.0,
    };
    let r = py.detach(|| audio::griffin_lim(&mel, &cfg, iterations, seed)).map_err(py_err)?;
    Ok(r.audio.into_pyarray(py))
}

/// `(mean r, per-bin r)`; constant bins give `None` and are excluded.
#[pyfunction]
fn pearson_per_bin(pred: PyReadonlyArray2<'_, f32>, truth: PyReadonlyArray2<'_, f32>) -> PyResult<(Option<f64>, Vec<Option<f64>>)> {
    let c = evaluation::pearson_per_bin(&pred.as_array().to_owned(), &truth.as_array().to_owned()).map_err(py_err)?;
    Ok((c.mean, c.per_bin))
}

fn ttest_dict<'py>(py: Python<'py>, t: &evaluation::TTest) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mean_a", t.mean_a)?;
    d.set_item("sd_a", t.sd_a)?;
    d.set_item("mean_b", t.mean_b)?;
    d.set_item("sd_b", t.sd_b)?;
    d.set_item("t", t.t)?;
    d.set_item("df", t.df)?;
    d.set_item("p", t.p)?;
    d.set_item("flag", t.flag.clone())?;
    Ok(d)
}

/// Welch's unequal-variance t-test.
#[pyfunction]
fn welch_t_test<'py>(py: Python<'py>, a: Vec<f64>, b: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    ttest_dict(py, &evaluation::welch_t_test(&a, &b).map_err(py_err)?)
}

/// Paired t-test on `a[i] - b[i]`.
#[pyfunction]
fn paired_t_test<'py>(py: Python<'py>, a: Vec<f64>, b: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    ttest_dict(py, &evaluation::paired_t_test(&a, &b).map_err(py_err)?)
}

/// Chance level of a forced-choice listening test: `(mean, 95th percentile,
/// observed above threshold)`.
#[pyfunction]
#[pyo3(signature = (n_sentences, observed_accuracy, n_raters = 19, n_choices = 2, reps = 10_000, seed = 0))]
fn listening_chance_sim(
    n_sentences: usize,
    observed_accuracy: f64,
    n_raters: usize,
    n_choices: usize,
    reps: usize,
    seed: u64,
) -> PyResult<(f64, f64, bool)> {
    let s = evaluation::listening_chance_sim(n_sentences, n_raters, n_choices, reps, observed_accuracy, seed).map_err(py_err)?;
    Ok((s.mean, s.threshold, s.above_chance))
}

/// Spectral test for acoustic contamination of the neural channels.
/// Returns `(statistic, p_value, channel, per-channel statistics)`.
#[pyfunction]
#[pyo3(signature = (recording, n_permutations = 1000, seed = 0))]
fn contamination_test(
    py: Python<'_>,
    recording: &Recording,
    n_permutations: usize,
    seed: u64,
) -> PyResult<(f64, f64, usize, Vec<f64>)> {
    let cfg = ContaminationConfig {
        n_permutations,
        seed,
        ..Default::default()
    };
    let rec = recording.inner.clone();
    let r = py.detach(|| contamination::contamination_test(&rec, &cfg)).map_err(py_err)?;
    Ok((r.statistic, r.p_value, r.channel, r.channel_statistics))
}

/// Grid `(rows, cols)` the frame model folds `channels` onto.
#[pyfunction]
fn fold_channels(channels: usize) -> (usize, usize) {
    models::fold_channels(channels)
}

fn profile_config(profile: &str) -> PyResult<ExperimentConfig> {
    match profile {
        "desk" => Ok(ExperimentConfig::desk()),
        "paper" => Ok(ExperimentConfig::paper()),
        p => Err(PyValueError::new_err(format!("unknown profile {p:?}; use 'desk' or 'paper'"))),
    }
}

fn parse_arch(arch: &str) -> PyResult<Arch> {
    match arch {
        "seq2seq" => Ok(Arch::Seq2Seq),
        "densenet" => Ok(Arch::DenseNet),
        a => Err(PyValueError::new_err(format!("unknown architecture {a:?}; use 'seq2seq' or 'densenet'"))),
    }
}

/// Trainable parameter count of an architecture at a size profile.
#[pyfunction]
#[pyo3(signature = (arch, in_channels, profile = "paper"))]
fn count_params(arch: &str, in_channels: usize, profile: &str) -> PyResult<usize> {
    let cfg = profile_config(profile)?;
    let model = cfg.model(parse_arch(arch)?, in_channels).map_err(py_err)?;
    model.count_params().map_err(py_err)
}

/// Trains one model on the recording's training split and scores it on
/// the test split. Returns a dict with test MSE, mean and per-bin r,
/// validation r, parameter count and the per-epoch log.
#[pyfunction]
#[pyo3(signature = (recording, arch = "seq2seq", seed = 0, epochs = None, profile = "desk"))]
fn train_and_evaluate<'py>(
    py: Python<'py>,
    recording: &Recording,
    arch: &str,
    seed: u64,
    epochs: Option<usize>,
    profile: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = profile_config(profile)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
        cfg.train.lr_halve_epoch = cfg.train.lr_halve_epoch.clamp(1, e.max(1));
    }
    let opts = RunOptions {
        arch: parse_arch(arch)?,
        seed,
        train_fraction: 1.0,
        target_val_r: None,
    };
    let rec = recording.inner.clone();
    let out = py
        .detach(|| {
            let prep = experiment::prepare(&rec, &cfg.mel)?;
            experiment::run(&prep, &cfg, opts)
        })
        .map_err(py_err)?
        .ok_or_else(|| PyValueError::new_err("training split holds no window"))?;
    let d = PyDict::new(py);
    d.set_item("arch", arch)?;
    d.set_item("seed", seed)?;
    d.set_item("n_params", out.n_params)?;
    d.set_item("test_mse", out.test.mse)?;
    d.set_item("test_r", out.test.mean_r)?;
    d.set_item("per_bin_r", out.test.per_bin_r.clone())?;
    d.set_item("val_r", out.val_r)?;
    d.set_item("config_hash", out.test.config_hash.clone())?;
    let log: Vec<(usize, f64, Option<f64>, f64)> = out.outcome.log.iter().map(|m| (m.epoch, m.train_mse, m.val_mse, m.lr)).collect();
    d.set_item("log", log)?;
    d.set_item("prediction", out.prediction.into_pyarray(py))?;
    if let Some((att, stats)) = out.attention {
        d.set_item("attention", att.into_pyarray(py))?;
        d.set_item("attention_alignment", stats.alignment)?;
    }
    Ok(d)
}

/// Model shapes for quick inspection: `(encoder length, decoder steps)` of
/// the sequence model for `n_in` input samples.
#[pyfunction]
#[pyo3(signature = (in_channels, n_in = 1229, profile = "paper"))]
fn seq2seq_shape(in_channels: usize, n_in: usize, profile: &str) -> PyResult<(Option<usize>, usize)> {
    let base = if profile == "paper" { Seq2SeqConfig::paper(in_channels) } else { Seq2SeqConfig::desk(in_channels) };
    let m = Seq2Seq::new(base).map_err(py_err)?;
    Ok((m.cfg.encoder_len(n_in), m.cfg.n_frames))
}

/// Input window length in samples and channel grid of the frame model.
#[pyfunction]
#[pyo3(signature = (in_channels, profile = "paper"))]
fn densenet_shape(in_channels: usize, profile: &str) -> PyResult<(usize, (usize, usize))> {
    let base = if profile == "paper" { DenseNetConfig::paper(in_channels) } else { DenseNetConfig::desk(in_channels) };
    let m = DenseNet::new(base).map_err(py_err)?;
    Ok((m.cfg.window_samples(), m.cfg.fold()))
}

/// Element-mean squared error of two equally shaped arrays.
#[pyfunction]
fn mse(pred: PyReadonlyArray2<'_, f32>, truth: PyReadonlyArray2<'_, f32>) -> PyResult<f64> {
    let (p, t): (Array2<f32>, Array2<f32>) = (pred.as_array().to_owned(), truth.as_array().to_owned());
    evaluation::mse(&p, &t).map_err(py_err)
}

#[pymodule]
fn neurovox(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Recording>()?;
    m.add_function(wrap_pyfunction!(synthesize_recording, m)?)?;
    m.add_function(wrap_pyfunction!(extract_features, m)?)?;
    m.add_function(wrap_pyfunction!(mel_spectrogram, m)?)?;
    m.add_function(wrap_pyfunction!(griffin_lim, m)?)?;
    m.add_function(wrap_pyfunction!(pearson_per_bin, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(welch_t_test, m)?)?;
    m.add_function(wrap_pyfunction!(paired_t_test, m)?)?;
    m.add_function(wrap_pyfunction!(listening_chance_sim, m)?)?;
    m.add_function(wrap_pyfunction!(contamination_test, m)?)?;
    m.add_function(wrap_pyfunction!(fold_channels, m)?)?;
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(seq2seq_shape, m)?)?;
    m.add_function(wrap_pyfunction!(densenet_shape, m)?)?;
    m.add_function(wrap_pyfunction!(train_and_evaluate, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
