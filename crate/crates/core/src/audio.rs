//! Audio side: resampling to 22050 Hz, log-compressed mel spectrograms on
//! a 12.5 ms grid, a high-band energy voice-activity detector and
//! Griffin-Lim reconstruction.
//!
//! Frame `k` is centred on sample `round((k + 0.5) * hop)` with the
//! fractional hop `0.0125 * fs`, so the grid never drifts from wall-clock
//! time. A spectrogram of `n` samples has `floor(n / hop)` frames, and
//! frame `k` summarises the interval `[k, k + 1) * 12.5 ms`.

use crate::dsp::PolyphaseResampler;
use crate::error::{Error, Result};
use nalgebra::DMatrix;
use ndarray::Array2;
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

pub const AUDIO_FS_IN: f64 = 48000.0;
pub const AUDIO_FS: f64 = 22050.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub frame_shift_ms: f64,
    pub frame_length_ms: f64,
    pub fft_size: usize,
    pub sample_rate: f64,
    pub compression_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
            frame_shift_ms: 12.5,
            frame_length_ms: 50.0,
            fft_size: 2048,
            sample_rate: AUDIO_FS,
            compression_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fmax > self.sample_rate / 2.0 || self.fmin < 0.0 || self.fmin >= self.fmax {
            return Err(Error::Config(format!(
                "mel band [{}, {}] Hz invalid at {} Hz",
                self.fmin, self.fmax, self.sample_rate
            )));
        }
        if self.n_mels == 0 || self.window_len() > self.fft_size || self.window_len() == 0 {
            return Err(Error::Config("mel: bad n_mels, window or fft size".into()));
        }
        if self.compression_floor <= 0.0 {
            return Err(Error::Config("mel: compression floor must be positive".into()));
        }
        Ok(())
    }

    /// Fractional hop in samples.
    pub fn hop(&self) -> f64 {
        self.frame_shift_ms * 1e-3 * self.sample_rate
    }

    pub fn window_len(&self) -> usize {
        (self.frame_length_ms * 1e-3 * self.sample_rate) as usize
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        (n_samples as f64 / self.hop() + 1e-9).floor() as usize
    }

    pub fn frame_center(&self, k: usize) -> i64 {
        ((k as f64 + 0.5) * self.hop()).round() as i64
    }

    pub fn log_floor(&self) -> f32 {
        self.compression_floor.ln() as f32
    }
}

/// `[n_mels, frames]` log-compressed magnitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub data: Array2<f32>,
    pub frame_shift_ms: f64,
    pub origin_time: f64,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.data.ncols()
    }

    /// Frames as rows, comma separated.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for col in self.data.columns() {
            let row: Vec<String> = col.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }

    /// Frames `[start, start + len)`, shifting the origin accordingly.
    pub fn frames(&self, start: usize, len: usize) -> MelSpectrogram {
        MelSpectrogram {
            data: self.data.slice(ndarray::s![.., start..start + len]).to_owned(),
            frame_shift_ms: self.frame_shift_ms,
            origin_time: self.origin_time + start as f64 * self.frame_shift_ms * 1e-3,
        }
    }
}

// ---- resampling --------------------------------------------------------

/// Windowed-sinc resampler from 48 kHz to 22050 Hz.
pub fn audio_resampler() -> PolyphaseResampler {
    PolyphaseResampler::new(147, 320, 64, 14.769_656_459_379_492, 0.9475)
}

pub fn resample_audio(audio: &[f32], fs_in: f64) -> Result<Vec<f32>> {
    if fs_in == AUDIO_FS {
        return Ok(audio.to_vec());
    }
    if fs_in != AUDIO_FS_IN {
        return Err(Error::Unsupported(format!("audio must arrive at 48000 Hz, got {fs_in}")));
    }
    Ok(audio_resampler().process(audio))
}

// ---- mel filterbank ----------------------------------------------------

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(f: f64) -> f64 {
    if f < MIN_LOG_HZ {
        f / F_SP
    } else {
        MIN_LOG_MEL + (f / MIN_LOG_HZ).ln() / log_step()
    }
}

pub fn mel_to_hz(m: f64) -> f64 {
    if m < MIN_LOG_MEL {
        m * F_SP
    } else {
        MIN_LOG_HZ * (log_step() * (m - MIN_LOG_MEL)).exp()
    }
}

fn mel_edges(cfg: &MelConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let n = cfg.n_mels + 2;
    (0..n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect()
}

/// Centre frequency of each mel filter.
pub fn mel_centers(cfg: &MelConfig) -> Vec<f64> {
    mel_edges(cfg)[1..=cfg.n_mels].to_vec()
}

/// Area-normalised triangular filters, `[n_mels, fft_size/2 + 1]`.
pub fn mel_filterbank(cfg: &MelConfig) -> Array2<f64> {
    let n_bins = cfg.fft_size / 2 + 1;
    let edges = mel_edges(cfg);
    Array2::from_shape_fn((cfg.n_mels, n_bins), |(m, b)| {
        let f = b as f64 * cfg.sample_rate / cfg.fft_size as f64;
        let lower = (f - edges[m]) / (edges[m + 1] - edges[m]);
        let upper = (edges[m + 2] - f) / (edges[m + 2] - edges[m + 1]);
        let enorm = 2.0 / (edges[m + 2] - edges[m]);
        lower.min(upper).max(0.0) * enorm
    })
}

// ---- STFT --------------------------------------------------------------

/// Shared analysis/synthesis frame geometry.
struct Stft {
    n_fft: usize,
    /// Hann window zero-padded and centred in `n_fft`.
    window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Stft {
    fn new(cfg: &MelConfig) -> Self {
        let n_fft = cfg.fft_size;
        let wl = cfg.window_len();
        let offset = (n_fft - wl) / 2;
        let mut window = vec![0.0; n_fft];
        for i in 0..wl {
            window[offset + i] = 0.5 - 0.5 * (2.0 * PI * i as f64 / wl as f64).cos();
        }
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            window,
            fwd: planner.plan_fft_forward(n_fft),
            inv: planner.plan_fft_inverse(n_fft),
        }
    }

    fn start(&self, cfg: &MelConfig, k: usize) -> i64 {
        cfg.frame_center(k) - (self.n_fft / 2) as i64
    }

    /// Positive-frequency spectrum of frame `k`.
    fn analyze(&self, cfg: &MelConfig, x: &[f64], k: usize) -> Vec<C64> {
        let s = self.start(cfg, k);
        let mut buf: Vec<C64> = (0..self.n_fft)
            .map(|i| {
                let j = s + i as i64;
                let v = if j >= 0 && (j as usize) < x.len() { x[j as usize] } else { 0.0 };
                C64::new(v * self.window[i], 0.0)
            })
            .collect();
        self.fwd.process(&mut buf);
        buf.truncate(self.n_fft / 2 + 1);
        buf
    }

    /// Least-squares signal estimate from a modified STFT.
    fn synthesize(&self, cfg: &MelConfig, frames: &[Vec<C64>], len: usize) -> Vec<f64> {
        let mut num = vec![0.0; len];
        let mut den = vec![0.0; len];
        let half = self.n_fft / 2;
        for (k, spec) in frames.iter().enumerate() {
            let mut buf = vec![C64::new(0.0, 0.0); self.n_fft];
            buf[..=half].copy_from_slice(spec);
            for b in 1..half {
                buf[self.n_fft - b] = spec[b].conj();
            }
            self.inv.process(&mut buf);
            let s = self.start(cfg, k);
            for (i, v) in buf.iter().enumerate() {
                let j = s + i as i64;
                if j >= 0 && (j as usize) < len && self.window[i] != 0.0 {
                    let w = self.window[i];
                    num[j as usize] += w * v.re / self.n_fft as f64;
                    den[j as usize] += w * w;
                }
            }
        }
        num.iter().zip(&den).map(|(n, d)| if *d > 1e-10 { n / d } else { 0.0 }).collect()
    }
}

fn magnitudes(stft: &Stft, cfg: &MelConfig, x: &[f64], n_frames: usize) -> Vec<Vec<f64>> {
    (0..n_frames)
        .into_par_iter()
        .map(|k| stft.analyze(cfg, x, k).iter().map(|c| c.norm()).collect())
        .collect()
}

/// Log mel spectrogram of `audio` sampled at `cfg.sample_rate`.
pub fn mel_spectrogram(audio: &[f32], cfg: &MelConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    let n_frames = cfg.n_frames(audio.len());
    let x: Vec<f64> = audio.iter().map(|&v| v as f64).collect();
    let stft = Stft::new(cfg);
    let fb = mel_filterbank(cfg);
    let mags = magnitudes(&stft, cfg, &x, n_frames);
    let floor = cfg.compression_floor;
    let mut data = Array2::<f32>::zeros((cfg.n_mels, n_frames));
    for (k, mag) in mags.iter().enumerate() {
        for m in 0..cfg.n_mels {
            let e: f64 = fb.row(m).iter().zip(mag).map(|(w, a)| w * a).sum();
            data[[m, k]] = e.max(floor).ln() as f32;
        }
    }
    Ok(MelSpectrogram {
        data,
        frame_shift_ms: cfg.frame_shift_ms,
        origin_time: 0.0,
    })
}

// ---- voice activity ----------------------------------------------------

/// Mean power in the upper half of the spectrum, `(fs/4, fs/2)`, for
/// non-overlapping 12.5 ms frames.
pub fn high_band_power(audio: &[f32], fs: f64) -> Vec<f64> {
    let hop = 0.0125 * fs;
    let n_frames = (audio.len() as f64 / hop + 1e-9).floor() as usize;
    let frame_len = hop.ceil() as usize;
    let n_fft = frame_len.next_power_of_two();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    (0..n_frames)
        .map(|k| {
            let s = (k as f64 * hop).round() as usize;
            let e = (((k + 1) as f64 * hop).round() as usize).min(audio.len());
            let mut buf = vec![C64::new(0.0, 0.0); n_fft];
            for (i, &v) in audio[s..e].iter().enumerate() {
                buf[i] = C64::new(v as f64, 0.0);
            }
            fft.process(&mut buf);
            let (lo, hi) = (n_fft / 4, n_fft / 2);
            let band = &buf[lo + 1..hi];
            band.iter().map(|c| c.norm_sqr()).sum::<f64>() / band.len() as f64 / (e - s).max(1) as f64
        })
        .collect()
}

/// Fraction of frames whose high-band power exceeds `threshold`.
pub fn voice_activity(audio: &[f32], fs: f64, threshold: f64) -> Result<f64> {
    if threshold <= 0.0 {
        return Err(Error::Config(format!("VAD threshold must be positive, got {threshold}")));
    }
    let p = high_band_power(audio, fs);
    if p.is_empty() {
        return Ok(0.0);
    }
    Ok(p.iter().filter(|&&v| v > threshold).count() as f64 / p.len() as f64)
}

// ---- Griffin-Lim -------------------------------------------------------

/// Reconstructed waveform with the spectral convergence after each
/// iteration, `‖|STFT(x)| - S‖ / ‖S‖`.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub audio: Vec<f32>,
    pub convergence: Vec<f64>,
}

/// Any mel-to-waveform backend.
pub trait Vocoder {
    fn vocode(&self, mel: &MelSpectrogram, cfg: &MelConfig) -> Result<Vec<f32>>;
}

#[derive(Clone, Copy, Debug)]
pub struct GriffinLim {
    pub iterations: usize,
    pub seed: u64,
}

impl Vocoder for GriffinLim {
    fn vocode(&self, mel: &MelSpectrogram, cfg: &MelConfig) -> Result<Vec<f32>> {
        Ok(griffin_lim(mel, cfg, self.iterations, self.seed)?.audio)
    }
}

/// Linear magnitudes from log mel by the filterbank pseudo-inverse.
pub fn mel_to_linear(mel: &MelSpectrogram, cfg: &MelConfig) -> Vec<Vec<f64>> {
    let fb = mel_filterbank(cfg);
    let m = DMatrix::from_fn(fb.nrows(), fb.ncols(), |i, j| fb[[i, j]]);
    let pinv = m.pseudo_inverse(1e-10).expect("SVD of a finite matrix");
    (0..mel.n_frames())
        .map(|k| {
            let e: Vec<f64> = mel.data.column(k).iter().map(|&v| (v as f64).exp()).collect();
            (0..pinv.nrows())
                .map(|b| (0..pinv.ncols()).map(|j| pinv[(b, j)] * e[j]).sum::<f64>().max(0.0))
                .collect()
        })
        .collect()
}

pub fn griffin_lim(mel: &MelSpectrogram, cfg: &MelConfig, iterations: usize, seed: u64) -> Result<Reconstruction> {
    if iterations < 1 {
        return Err(Error::Config("griffin-lim needs at least one iteration".into()));
    }
    cfg.validate()?;
    let target = mel_to_linear(mel, cfg);
    let n_frames = target.len();
    let len = (n_frames as f64 * cfg.hop()).round() as usize;
    let stft = Stft::new(cfg);
    let norm: f64 = target.iter().flatten().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec: Vec<Vec<C64>> = target
        .iter()
        .map(|row| row.iter().map(|&a| C64::from_polar(a, rng.random_range(-PI..PI))).collect())
        .collect();
    let mut convergence = Vec::with_capacity(iterations);
    let mut x = vec![0.0; len];
    for _ in 0..iterations {
        x = stft.synthesize(cfg, &spec, len);
        let re: Vec<Vec<C64>> = (0..n_frames).into_par_iter().map(|k| stft.analyze(cfg, &x, k)).collect();
        let mut err = 0.0;
        for (k, frame) in re.iter().enumerate() {
            for (b, c) in frame.iter().enumerate() {
                let a = target[k][b];
                err += (c.norm() - a).powi(2);
                let phase = if c.norm() > 0.0 { c / c.norm() } else { C64::new(1.0, 0.0) };
                spec[k][b] = phase * a;
            }
        }
        convergence.push(err.sqrt() / norm);
    }
    Ok(Reconstruction {
        audio: x.into_iter().map(|v| v as f32).collect(),
        convergence,
    })
}
