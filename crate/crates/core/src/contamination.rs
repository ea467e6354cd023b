//! Acoustic-contamination check: correlates magnitude spectrograms of the
//! audio and of every neural channel at matching frequencies and tests the
//! mean matched-frequency correlation against a circular-shift null.
//!
//! Only the general approach of spectro-temporal correlation with a
//! permutation null is followed; the statistic is not a replication of any
//! published test, and the report header says so.

use crate::data_io::{pcm_to_f32, Recording};
use crate::dsp::PolyphaseResampler;
use crate::error::{Error, Result};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

pub const REPORT_METHOD: &str = "spectrogram correlation at matched frequencies with a circular-shift \
permutation null; follows the spirit of published contamination checks, not an exact replication";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContaminationConfig {
    pub window_s: f64,
    pub hop_s: f64,
    pub min_freq_hz: f64,
    /// Capped at the lower of the two Nyquist frequencies.
    pub max_freq_hz: f64,
    pub n_permutations: usize,
    /// Shortest circular shift of the audio frames.
    pub min_shift_s: f64,
    pub seed: u64,
}

impl Default for ContaminationConfig {
    fn default() -> Self {
        Self {
            window_s: 0.25,
            hop_s: 0.125,
            min_freq_hz: 20.0,
            max_freq_hz: 1000.0,
            n_permutations: 1000,
            min_shift_s: 2.0,
            seed: 0,
        }
    }
}

impl ContaminationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_s > 0.0 && self.hop_s > 0.0 && self.min_freq_hz >= 0.0) {
            return Err(Error::Config("contamination: window and hop must be positive".into()));
        }
        if self.max_freq_hz <= self.min_freq_hz {
            return Err(Error::Config("contamination: empty frequency range".into()));
        }
        if self.n_permutations < 100 {
            return Err(Error::Config(format!(
                "contamination: {} permutations, at least 100 required",
                self.n_permutations
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullSummary {
    pub mean: f64,
    pub sd: f64,
    pub max: f64,
    pub q95: f64,
    pub q99: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContaminationReport {
    pub method: String,
    pub config: ContaminationConfig,
    pub frequencies_hz: Vec<f64>,
    pub n_frames: usize,
    /// Matched-frequency statistic of every channel.
    pub channel_statistics: Vec<f64>,
    /// Channel with the largest statistic; its matrix is reported.
    pub channel: usize,
    /// `[neural bin][audio bin]` Pearson correlations over frames.
    pub matrix: Vec<Vec<f64>>,
    /// Largest channel statistic.
    pub statistic: f64,
    pub null: NullSummary,
    pub p_value: f64,
}

impl ContaminationReport {
    pub fn contaminated(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Magnitude spectrogram `[bins, frames]` at the requested frequencies,
/// Hann-windowed, frames starting every `hop_s` seconds.
pub fn magnitude_spectrogram(x: &[f32], fs: f64, freqs: &[f64], window_s: f64, hop_s: f64, n_frames: usize) -> Array2<f64> {
    let n = (window_s * fs).round().max(1.0) as usize;
    let bins: Vec<usize> = freqs.iter().map(|f| ((f * n as f64 / fs).round() as usize).min(n / 2)).collect();
    let window: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut out = Array2::zeros((freqs.len(), n_frames));
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for k in 0..n_frames {
        let s = (k as f64 * hop_s * fs).round() as usize;
        for (i, b) in buf.iter_mut().enumerate() {
            let v = x.get(s + i).copied().unwrap_or(0.0) as f64;
            *b = Complex::new(v * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (j, &b) in bins.iter().enumerate() {
            out[[j, k]] = buf[b].norm();
        }
    }
    out
}

/// Rows centred and scaled to unit RMS; constant rows become `None`.
fn standardize_rows(m: &Array2<f64>) -> Vec<Option<Vec<f64>>> {
    m.axis_iter(Axis(0))
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (var > 1e-24).then(|| row.iter().map(|v| (v - mean) / var.sqrt()).collect())
        })
        .collect()
}

/// Mean over frequencies of the correlation between neural row `f` and the
/// audio row `f` shifted circularly by `shift` frames.
fn matched_statistic(neural: &[Option<Vec<f64>>], audio: &[Option<Vec<f64>>], shift: usize) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (n, a) in neural.iter().zip(audio) {
        let (Some(n), Some(a)) = (n, a) else { continue };
        let t = n.len();
        let head: f64 = n[..t - shift].iter().zip(&a[shift..]).map(|(x, y)| x * y).sum();
        let tail: f64 = n[t - shift..].iter().zip(&a[..shift]).map(|(x, y)| x * y).sum();
        sum += (head + tail) / t as f64;
        count += 1;
    }
    (count > 0).then(|| sum / count as f64)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let i = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[i]
}

/// Tests every neural channel of `rec` for audio leakage. The statistic is
/// the largest per-channel matched-frequency correlation, so the null
/// (taken through the same maximum) controls the family-wise error.
pub fn contamination_test(rec: &Recording, cfg: &ContaminationConfig) -> Result<ContaminationReport> {
    cfg.validate()?;
    if rec.n_channels() == 0 {
        return Err(Error::InsufficientData("contamination: no neural channels".into()));
    }
    let neural_s = rec.neural.ncols() as f64 / rec.fs_neural;
    let audio_s = rec.audio.len() as f64 / rec.fs_audio;
    if (neural_s - audio_s).abs() > 1.0 / rec.fs_neural + 1e-9 {
        return Err(Error::Alignment(format!(
            "neural spans {neural_s:.6} s but audio spans {audio_s:.6} s"
        )));
    }
    let duration = neural_s.min(audio_s);
    if duration < cfg.window_s {
        return Err(Error::InsufficientData("contamination: recording shorter than one window".into()));
    }
    let n_frames = ((duration - cfg.window_s) / cfg.hop_s).floor() as usize + 1;
    let min_shift = (cfg.min_shift_s / cfg.hop_s).ceil().max(1.0) as usize;
    if n_frames < 2 * min_shift + 1 {
        return Err(Error::InsufficientData(format!(
            "contamination: {n_frames} frames leave no admissible shift of at least {min_shift}"
        )));
    }
    let resolution = 1.0 / cfg.window_s;
    let top = cfg.max_freq_hz.min(rec.fs_neural / 2.0).min(rec.fs_audio / 2.0);
    let freqs: Vec<f64> = (0..)
        .map(|k| k as f64 * resolution)
        .skip_while(|&f| f < cfg.min_freq_hz)
        .take_while(|&f| f <= top)
        .collect();
    if freqs.is_empty() {
        return Err(Error::Config("contamination: no frequency bin in range".into()));
    }

    let audio = standardize_rows(&magnitude_spectrogram(
        &pcm_to_f32(&rec.audio),
        rec.fs_audio,
        &freqs,
        cfg.window_s,
        cfg.hop_s,
        n_frames,
    ));
    let rows: Vec<Vec<f32>> = rec.neural.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
    let neural: Vec<Vec<Option<Vec<f64>>>> = rows
        .par_iter()
        .map(|x| {
            standardize_rows(&magnitude_spectrogram(x, rec.fs_neural, &freqs, cfg.window_s, cfg.hop_s, n_frames))
        })
        .collect();

    let statistic_at = |shift: usize| -> f64 {
        neural
            .iter()
            .map(|ch| matched_statistic(ch, &audio, shift).unwrap_or(0.0))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let channel_statistics: Vec<f64> = neural
        .iter()
        .map(|ch| matched_statistic(ch, &audio, 0).unwrap_or(0.0))
        .collect();
    let (channel, statistic) = channel_statistics
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, s)| if s > best.1 { (i, s) } else { best });

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shifts: Vec<usize> = (0..cfg.n_permutations)
        .map(|_| rng.random_range(min_shift..=n_frames - min_shift))
        .collect();
    let mut null: Vec<f64> = shifts.par_iter().map(|&s| statistic_at(s)).collect();
    let exceed = null.iter().filter(|&&s| s >= statistic).count();
    let p_value = (exceed + 1) as f64 / (cfg.n_permutations + 1) as f64;

    null.sort_by(f64::total_cmp);
    let n = null.len() as f64;
    let mean = null.iter().sum::<f64>() / n;
    let sd = (null.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();

    let matrix = freqs
        .iter()
        .enumerate()
        .map(|(i, _)| {
            (0..freqs.len())
                .map(|j| match (&neural[channel][i], &audio[j]) {
                    (Some(a), Some(b)) => {
                        let r = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / n_frames as f64;
                        r.clamp(-1.0, 1.0)
                    }
                    _ => 0.0,
                })
                .collect()
        })
        .collect();

    Ok(ContaminationReport {
        method: REPORT_METHOD.into(),
        config: cfg.clone(),
        frequencies_hz: freqs,
        n_frames,
        channel_statistics,
        channel,
        matrix,
        statistic,
        null: NullSummary {
            mean,
            sd,
            max: *null.last().expect("at least 100 permutations"),
            q95: quantile(&null, 0.95),
            q99: quantile(&null, 0.99),
        },
        p_value,
    })
}

/// Copy of `rec` whose channel `channel` carries the audio, resampled to the
/// neural rate and scaled to `snr_db` relative to the channel's own power.
pub fn inject_audio(rec: &Recording, channel: usize, snr_db: f64) -> Result<Recording> {
    if channel >= rec.n_channels() {
        return Err(Error::Config(format!("no channel {channel}")));
    }
    let (up, down) = (rec.fs_neural.round() as usize, rec.fs_audio.round() as usize);
    if up as f64 != rec.fs_neural || down as f64 != rec.fs_audio {
        return Err(Error::Unsupported("non-integer sampling rates".into()));
    }
    let audio = PolyphaseResampler::new(up, down, 16, 8.6, 0.95).process(&pcm_to_f32(&rec.audio));
    let mut out = rec.clone();
    let mut row = out.neural.row_mut(channel);
    let n = row.len().min(audio.len());
    let power = |v: &mut dyn Iterator<Item = f32>| v.map(|x| (x as f64).powi(2)).sum::<f64>() / n.max(1) as f64;
    let p_neural = power(&mut row.iter().take(n).copied());
    let p_audio = power(&mut audio.iter().take(n).copied());
    if !(p_audio > 0.0) {
        return Err(Error::InsufficientData("silent audio".into()));
    }
    let gain = (p_neural / p_audio * 10f64.powf(snr_db / 10.0)).sqrt() as f32;
    for (x, a) in row.iter_mut().zip(&audio) {
        *x += gain * a;
    }
    Ok(out)
}
