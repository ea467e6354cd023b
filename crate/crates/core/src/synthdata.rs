//! Paired neural/audio recordings with a known, learnable mapping.
//!
//! A few smooth latent trajectories, gated by a speech/silence envelope,
//! drive both signals:
//!
//! * audio: harmonics of a fixed fundamental whose amplitudes are fixed
//!   spectral bumps weighted by the latents, plus a latent-scaled noise
//!   floor. The waveform is linear in the latents, so its mel spectrogram
//!   is a deterministic function of them.
//! * neural: each channel is a 70–170 Hz carrier whose amplitude is a
//!   non-negative mix of the latents, delayed by a fixed lag, plus white
//!   noise at a set SNR.

use crate::audio::{mel_spectrogram, resample_audio, MelConfig, AUDIO_FS_IN};
use crate::data_io::{f32_to_pcm, pcm_to_f32, Recording};
use crate::dsp::extract_features;
use crate::error::{Error, Result};
use crate::evaluation::pearson_per_bin;
use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Rate of the latent trajectories.
pub const CONTROL_FS: f64 = 200.0;
/// Carrier amplitude present regardless of the latents.
const BASELINE: f64 = 0.2;
/// Peak harmonic amplitude per unit latent.
const HARMONIC_GAIN: f64 = 0.08;
/// Noise-floor standard deviation per unit mean latent.
const NOISE_FLOOR: f64 = 0.01;
const MAX_HARMONIC_HZ: f64 = 8000.0;
/// Envelope averaging window of the latent decoder.
const DECODE_WINDOW_S: f64 = 0.025;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_channels: usize,
    pub duration_s: f64,
    pub latent_dim: usize,
    /// Approximate upper frequency of the latent trajectories.
    pub latent_bandwidth_hz: f64,
    /// `[n_channels][latent_dim]` non-negative mixing weights; drawn from
    /// the seed when absent.
    pub mixing: Option<Vec<Vec<f64>>>,
    pub neural_lag_ms: f64,
    /// Carrier-to-noise power ratio; `None` for a noiseless signal.
    pub snr_db: Option<f64>,
    /// Target fraction of time with speech.
    pub speech_duty: f64,
    pub fs_neural: f64,
    pub f0_hz: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_channels: 16,
            duration_s: 900.0,
            latent_dim: 4,
            latent_bandwidth_hz: 2.0,
            mixing: None,
            neural_lag_ms: 100.0,
            snr_db: Some(10.0),
            speech_duty: 0.45,
            fs_neural: 2048.0,
            f0_hz: 200.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth: {m}")));
        if self.latent_dim == 0 || self.n_channels == 0 {
            return bad("latent_dim and n_channels must be positive".into());
        }
        if !(0.0..1.0).contains(&self.speech_duty) {
            return bad(format!("speech duty {} outside [0, 1)", self.speech_duty));
        }
        if self.neural_lag_ms < 0.0 || !(self.duration_s > 0.0) || !(self.latent_bandwidth_hz > 0.0) {
            return bad("lag must be non-negative, duration and bandwidth positive".into());
        }
        if self.fs_neural != 1024.0 && self.fs_neural != 2048.0 {
            return bad(format!("neural rate {} not in {{1024, 2048}}", self.fs_neural));
        }
        let period = AUDIO_FS_IN / self.f0_hz;
        if !(self.f0_hz > 0.0) || (period - period.round()).abs() > 1e-9 {
            return bad(format!("f0 {} Hz must divide {AUDIO_FS_IN} Hz", self.f0_hz));
        }
        if let Some(m) = &self.mixing {
            if m.len() != self.n_channels || m.iter().any(|r| r.len() != self.latent_dim) {
                return bad("mixing matrix must be n_channels × latent_dim".into());
            }
            if m.iter().flatten().any(|&v| !(v >= 0.0)) {
                return bad("mixing weights must be non-negative".into());
            }
        }
        Ok(())
    }

    /// Identity mixing for as many channels as latents.
    pub fn identity_mixing(latent_dim: usize) -> Vec<Vec<f64>> {
        (0..latent_dim)
            .map(|i| (0..latent_dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect()
    }
}

/// Generated recording with its ground truth.
#[derive(Clone, Debug)]
pub struct Synth {
    pub recording: Recording,
    /// `[latent_dim, frames]` at [`CONTROL_FS`], gate applied.
    pub latent: Array2<f64>,
    /// Speech/silence envelope at [`CONTROL_FS`], in `[0, 1]`.
    pub gate: Vec<f64>,
    pub mixing: Vec<Vec<f64>>,
}

/// Independent random streams derived from the seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Alternating silence/speech envelope whose speech fraction over the
/// generated segments equals `duty`, with 30 ms raised-cosine ramps.
fn speech_gate(n: usize, duty: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut gate = vec![0.0; n];
    if duty <= 0.0 {
        return gate;
    }
    let total = n as f64 / CONTROL_FS;
    let mut speech = Vec::new();
    let mut silence = Vec::new();
    let mut covered = 0.0;
    while covered < total {
        let s: f64 = rng.random_range(0.6..1.8);
        let q = s * (1.0 - duty) / duty * rng.random_range(0.6..1.4);
        speech.push(s);
        silence.push(q);
        covered += s + q;
    }
    let (ss, sq) = (speech.iter().sum::<f64>(), silence.iter().sum::<f64>());
    let scale = ss * (1.0 - duty) / duty / sq;
    let ramp = 0.03 * CONTROL_FS;
    let mut t = 0.0;
    for (s, q) in speech.iter().zip(&silence) {
        let lead = q * scale / 2.0;
        let (a, b) = ((t + lead) * CONTROL_FS, (t + lead + s) * CONTROL_FS);
        let lo = a.floor().max(0.0) as usize;
        let hi = (b.ceil() as usize).min(n);
        for (i, g) in gate.iter_mut().enumerate().take(hi).skip(lo) {
            let x = i as f64;
            let rise = ((x - a) / ramp).clamp(0.0, 1.0);
            let fall = ((b - x) / ramp).clamp(0.0, 1.0);
            let w = rise.min(fall);
            *g = 0.5 - 0.5 * (PI * w).cos();
        }
        t += s + q * scale;
    }
    gate
}

/// Gaussian-smoothed white noise, standardised and squashed into (0, 1).
fn smooth_trajectory(n: usize, bandwidth: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sigma = CONTROL_FS / (2.0 * PI * bandwidth);
    let half = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-half..=half).map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let pad = half as usize;
    let noise: Vec<f64> = (0..n + 2 * pad).map(|_| rng.sample(StandardNormal)).collect();
    let mut y: Vec<f64> = (0..n)
        .map(|i| kernel.iter().zip(&noise[i..]).map(|(k, v)| k * v).sum())
        .collect();
    let m = y.iter().sum::<f64>() / n as f64;
    let s = (y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-12);
    for v in &mut y {
        *v = 1.0 / (1.0 + (-1.5 * (*v - m) / s).exp());
    }
    y
}

/// Linear interpolation of a control-rate trajectory at time `t`.
fn at(x: &[f64], t: f64) -> f64 {
    let p = t * CONTROL_FS;
    if p <= 0.0 {
        return x[0];
    }
    let i = p.floor() as usize;
    if i + 1 >= x.len() {
        return x[x.len() - 1];
    }
    let f = p - i as f64;
    x[i] * (1.0 - f) + x[i + 1] * f
}

/// One pitch period per latent of its harmonic bump, sampled at 48 kHz.
fn wavetables(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let period = (AUDIO_FS_IN / cfg.f0_hz).round() as usize;
    let n_harm = (MAX_HARMONIC_HZ / cfg.f0_hz).floor() as usize;
    let k = cfg.latent_dim;
    let (lo, hi) = (400f64.ln(), 4000f64.ln());
    let centers: Vec<f64> = (0..k)
        .map(|i| if k == 1 { (lo + hi) / 2.0 } else { lo + (hi - lo) * i as f64 / (k - 1) as f64 })
        .collect();
    let width = if k == 1 { 1.0 } else { 0.6 * (hi - lo) / (k - 1) as f64 };
    let mut rng = stream(cfg.seed, 7);
    let phases: Vec<f64> = (0..n_harm).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    centers
        .iter()
        .map(|c| {
            let amp: Vec<f64> = (1..=n_harm)
                .map(|h| HARMONIC_GAIN * (-((h as f64 * cfg.f0_hz).ln() - c).powi(2) / (2.0 * width * width)).exp())
                .collect();
            (0..period)
                .map(|j| {
                    let ph = 2.0 * PI * j as f64 / period as f64;
                    (0..n_harm).map(|h| amp[h] * ((h + 1) as f64 * ph + phases[h]).sin()).sum()
                })
                .collect()
        })
        .collect()
}

/// The latent-to-audio map at 48 kHz.
pub fn render_audio(cfg: &SynthConfig, latent: &Array2<f64>) -> Vec<f32> {
    let tables = wavetables(cfg);
    let period = tables[0].len();
    let n = (cfg.duration_s * AUDIO_FS_IN).round() as usize;
    let k = cfg.latent_dim;
    let rows: Vec<Vec<f64>> = latent.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut noise = stream(cfg.seed, 3);
    (0..n)
        .map(|i| {
            let t = i as f64 / AUDIO_FS_IN;
            let xi: f64 = noise.sample(StandardNormal);
            let mut s = 0.0;
            for (row, table) in rows.iter().zip(&tables) {
                let z = at(row, t);
                s += z * (table[i % period] + NOISE_FLOOR * xi / k as f64);
            }
            s as f32
        })
        .collect()
}

fn mixing_matrix(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    if let Some(m) = &cfg.mixing {
        return m.clone();
    }
    let mut rng = stream(cfg.seed, 5);
    (0..cfg.n_channels)
        .map(|_| {
            let row: Vec<f64> = (0..cfg.latent_dim).map(|_| rng.random_range(0.0..1.0f64).powi(2)).collect();
            let s: f64 = row.iter().sum::<f64>().max(1e-12);
            row.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Generates one recording.
pub fn generate(cfg: &SynthConfig) -> Result<Synth> {
    cfg.validate()?;
    let n_ctrl = (cfg.duration_s * CONTROL_FS).ceil() as usize + 2;
    let gate = speech_gate(n_ctrl, cfg.speech_duty, &mut stream(cfg.seed, 1));
    let mut traj_rng = stream(cfg.seed, 2);
    let mut latent = Array2::zeros((cfg.latent_dim, n_ctrl));
    for mut row in latent.rows_mut() {
        let u = smooth_trajectory(n_ctrl, cfg.latent_bandwidth_hz, &mut traj_rng);
        for ((z, u), g) in row.iter_mut().zip(u).zip(&gate) {
            *z = u * g;
        }
    }
    let audio = f32_to_pcm(&render_audio(cfg, &latent));

    let mixing = mixing_matrix(cfg);
    let n_neural = (cfg.duration_s * cfg.fs_neural).round() as usize;
    let lag = cfg.neural_lag_ms * 1e-3;
    let mut carrier_rng = stream(cfg.seed, 4);
    let carriers: Vec<(f64, f64)> = (0..cfg.n_channels)
        .map(|_| (carrier_rng.random_range(110.0..140.0), carrier_rng.random_range(0.0..2.0 * PI)))
        .collect();
    let rows: Vec<Vec<f64>> = latent.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut neural = Array2::<f32>::zeros((cfg.n_channels, n_neural));
    let mut noise_rng = stream(cfg.seed, 6);
    for (c, mut out) in neural.rows_mut().into_iter().enumerate() {
        let (fc, phase) = carriers[c];
        let clean: Vec<f64> = (0..n_neural)
            .map(|i| {
                let t = i as f64 / cfg.fs_neural;
                let env = BASELINE
                    + mixing[c]
                        .iter()
                        .zip(&rows)
                        .map(|(w, z)| w * at(z, (t - lag).max(0.0)))
                        .sum::<f64>();
                env * (2.0 * PI * fc * t + phase).sin()
            })
            .collect();
        let sigma = match cfg.snr_db {
            Some(snr) => {
                let p = clean.iter().map(|v| v * v).sum::<f64>() / n_neural as f64;
                (p / 10f64.powf(snr / 10.0)).sqrt()
            }
            None => 0.0,
        };
        for (o, v) in out.iter_mut().zip(&clean) {
            let e: f64 = noise_rng.sample(StandardNormal);
            *o = (v + sigma * e) as f32;
        }
    }
    let recording = Recording {
        neural,
        fs_neural: cfg.fs_neural,
        audio,
        fs_audio: AUDIO_FS_IN,
        session_id: format!("synth-{}", cfg.seed),
        channel_labels: (0..cfg.n_channels).map(|c| format!("S{c:03}")).collect(),
    };
    Ok(Synth {
        recording,
        latent,
        gate,
        mixing,
    })
}

/// Latents estimated from the neural envelopes, averaged over 25 ms, by
/// inverting the known mixing and lag, at [`CONTROL_FS`].
pub fn decode_latent(cfg: &SynthConfig, synth: &Synth) -> Result<Array2<f64>> {
    let env = extract_features(&synth.recording)?;
    let (c, k) = (cfg.n_channels, cfg.latent_dim);
    let m = DMatrix::from_fn(c, k, |i, j| synth.mixing[i][j]);
    let pinv = m
        .pseudo_inverse(1e-10)
        .map_err(|e| Error::Numerical(format!("mixing pseudo-inverse: {e}")))?;
    let n_ctrl = synth.latent.ncols();
    let lag = cfg.neural_lag_ms * 1e-3;
    let half = (DECODE_WINDOW_S / 2.0 * env.fs).round() as isize;
    let last = env.n_samples() as isize - 1;
    let mut out = Array2::zeros((k, n_ctrl));
    for f in 0..n_ctrl {
        let centre = (((f as f64 / CONTROL_FS) + lag) * env.fs).round() as isize;
        let (lo, hi) = ((centre - half).clamp(0, last) as usize, (centre + half).clamp(0, last) as usize);
        let col = nalgebra::DVector::from_fn(c, |ch, _| {
            let w = env.data.slice(ndarray::s![ch, lo..=hi]);
            w.iter().map(|&v| v as f64).sum::<f64>() / w.len() as f64 - BASELINE
        });
        let z = &pinv * col;
        for j in 0..k {
            out[[j, f]] = z[j].max(0.0);
        }
    }
    Ok(out)
}

/// Ceiling on mel correlation under the configured noise: the mean per-bin
/// Pearson r between the true mel spectrogram and the one rendered from
/// latents perturbed by exactly the error the neural noise causes after
/// the feature pipeline. The deterministic distortion of the pipeline
/// (decoding the noiseless recording) is treated as known and removed, so
/// only noise limits the score; without noise it is 1.
pub fn ideal_score(cfg: &SynthConfig) -> Result<f64> {
    if cfg.latent_dim == 0 {
        return Err(Error::Config("synth: no latents, the ceiling is undefined".into()));
    }
    let synth = generate(cfg)?;
    let mut estimate = synth.latent.clone();
    if cfg.snr_db.is_some() {
        let clean_cfg = SynthConfig {
            snr_db: None,
            ..cfg.clone()
        };
        let clean = generate(&clean_cfg)?;
        let noisy = decode_latent(cfg, &synth)?;
        let reference = decode_latent(&clean_cfg, &clean)?;
        ndarray::Zip::from(&mut estimate)
            .and(&noisy)
            .and(&reference)
            .for_each(|z, &n, &r| *z = (*z + n - r).max(0.0));
    }
    let mel_cfg = MelConfig::default();
    let truth = mel_spectrogram(&resample_audio(&synth.recording.audio_f32(), AUDIO_FS_IN)?, &mel_cfg)?;
    let rendered = pcm_to_f32(&f32_to_pcm(&render_audio(cfg, &estimate)));
    let est = mel_spectrogram(&resample_audio(&rendered, AUDIO_FS_IN)?, &mel_cfg)?;
    let r = pearson_per_bin(&est.data, &truth.data)?;
    r.mean.ok_or_else(|| Error::Evaluation("ceiling undefined: every bin is constant".into()))
}
