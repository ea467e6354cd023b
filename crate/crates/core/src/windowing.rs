//! Sliding-window pairing of neural context windows with 32-frame mel
//! targets.
//!
//! Times are defined in milliseconds and rounded to integer samples or
//! frames at each conversion. Window `k` of a split starts at
//! `split.start + k * hop`; its input spans the window plus `context_ms` on
//! both sides and is zero wherever that reaches outside the recording.

use crate::audio::MelSpectrogram;
use crate::data_io::Span;
use crate::dsp::FeatureSequence;
use crate::engine::{Real, Tensor};
use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub window_ms: f64,
    pub hop_train_ms: f64,
    pub hop_eval_ms: f64,
    pub context_ms: f64,
    pub neural_fs: f64,
    pub mel_frames_per_window: usize,
    pub frame_shift_ms: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window_ms: 400.0,
            hop_train_ms: 25.0,
            hop_eval_ms: 400.0,
            context_ms: 400.0,
            neural_fs: 1024.0,
            mel_frames_per_window: 32,
            frame_shift_ms: 12.5,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        let frames = self.window_ms / self.frame_shift_ms;
        if (frames - self.mel_frames_per_window as f64).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "window {} ms holds {frames} frames, expected {}",
                self.window_ms, self.mel_frames_per_window
            )));
        }
        for hop in [self.hop_train_ms, self.hop_eval_ms] {
            let r = hop / self.frame_shift_ms;
            if hop <= 0.0 || (r - r.round()).abs() > 1e-9 {
                return Err(Error::Config(format!("hop {hop} ms is not a whole number of frames")));
            }
        }
        if self.context_ms < 0.0 {
            return Err(Error::Config("negative context".into()));
        }
        Ok(())
    }

    pub fn hop_frames(&self, hop_ms: f64) -> usize {
        (hop_ms / self.frame_shift_ms).round() as usize
    }
}

/// `(n_in, n_frames)` of every pair.
pub fn pair_dimensions(cfg: &WindowConfig) -> (usize, usize) {
    let n_in = ((2.0 * cfg.context_ms + cfg.window_ms) * 1e-3 * cfg.neural_fs).round() as usize;
    (n_in, cfg.mel_frames_per_window)
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPair {
    /// `[channels, n_in]`
    pub x: Array2<f32>,
    /// `[n_mels, frames]`
    pub y: Array2<f32>,
    pub t0: f64,
}

/// Indexable, lazily materialised set of examples.
pub trait ExampleSource: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Input shape of one example without the batch axis.
    fn input_shape(&self) -> Vec<usize>;
    /// Target shape of one example without the batch axis.
    fn target_shape(&self) -> Vec<usize>;
    /// Writes example `i` into the provided slices.
    fn fill(&self, i: usize, x: &mut [f32], y: &mut [f32]);

    /// Stacks the requested examples into `[B, ..input]` and `[B, ..target]`.
    fn batch<T: Real>(&self, idx: &[usize]) -> (Tensor<T>, Tensor<T>)
    where
        Self: Sized,
    {
        let xs: usize = self.input_shape().iter().product();
        let ys: usize = self.target_shape().iter().product();
        let mut x = vec![0f32; idx.len() * xs];
        let mut y = vec![0f32; idx.len() * ys];
        for (b, &i) in idx.iter().enumerate() {
            self.fill(i, &mut x[b * xs..(b + 1) * xs], &mut y[b * ys..(b + 1) * ys]);
        }
        let mut xshape = vec![idx.len()];
        xshape.extend(self.input_shape());
        let mut yshape = vec![idx.len()];
        yshape.extend(self.target_shape());
        (
            Tensor::new(&xshape, x.into_iter().map(|v| T::of(v as f64)).collect()).expect("sized"),
            Tensor::new(&yshape, y.into_iter().map(|v| T::of(v as f64)).collect()).expect("sized"),
        )
    }
}

/// Window start positions over one split.
#[derive(Clone, Debug)]
pub struct PairSet<'a> {
    features: &'a FeatureSequence,
    mel: &'a MelSpectrogram,
    cfg: WindowConfig,
    /// `(t0, first mel frame, first input sample)`
    starts: Vec<(f64, usize, i64)>,
    n_in: usize,
}

impl<'a> PairSet<'a> {
    pub fn new(
        features: &'a FeatureSequence,
        mel: &'a MelSpectrogram,
        cfg: &WindowConfig,
        split: Span,
        hop_ms: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        if features.fs != cfg.neural_fs {
            return Err(Error::Config(format!("features at {} Hz, windows expect {}", features.fs, cfg.neural_fs)));
        }
        if (features.origin_time - mel.origin_time).abs() > 1e-9 {
            return Err(Error::Config("features and mel must share their origin".into()));
        }
        let shift = cfg.frame_shift_ms * 1e-3;
        let hop_frames = cfg.hop_frames(hop_ms);
        let n_win = cfg.mel_frames_per_window;
        let first = ((split.start - mel.origin_time) / shift).round() as i64;
        let last_end = ((split.end - mel.origin_time) / shift).round() as i64;
        if first < 0 || last_end as usize > mel.n_frames() {
            return Err(Error::Config(format!(
                "split [{}, {}) s outside the {}-frame spectrogram",
                split.start,
                split.end,
                mel.n_frames()
            )));
        }
        let (n_in, _) = pair_dimensions(cfg);
        let ctx = cfg.context_ms * 1e-3;
        let mut starts = Vec::new();
        let mut f0 = first;
        while f0 + n_win as i64 <= last_end {
            let t0 = mel.origin_time + f0 as f64 * shift;
            let s0 = ((t0 - ctx - features.origin_time) * cfg.neural_fs).round() as i64;
            starts.push((t0, f0 as usize, s0));
            f0 += hop_frames as i64;
        }
        Ok(Self {
            features,
            mel,
            cfg: cfg.clone(),
            starts,
            n_in,
        })
    }

    pub fn t0(&self, i: usize) -> f64 {
        self.starts[i].0
    }

    pub fn get(&self, i: usize) -> WindowPair {
        let mut x = vec![0f32; self.features.n_channels() * self.n_in];
        let mut y = vec![0f32; self.mel.data.nrows() * self.cfg.mel_frames_per_window];
        self.fill(i, &mut x, &mut y);
        WindowPair {
            x: Array2::from_shape_vec((self.features.n_channels(), self.n_in), x).expect("sized"),
            y: Array2::from_shape_vec((self.mel.data.nrows(), self.cfg.mel_frames_per_window), y).expect("sized"),
            t0: self.t0(i),
        }
    }

    /// Materialises every pair in chronological order.
    pub fn to_vec(&self) -> Vec<WindowPair> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}

impl ExampleSource for PairSet<'_> {
    fn len(&self) -> usize {
        self.starts.len()
    }

    fn input_shape(&self) -> Vec<usize> {
        vec![self.features.n_channels(), self.n_in]
    }

    fn target_shape(&self) -> Vec<usize> {
        vec![self.mel.data.nrows(), self.cfg.mel_frames_per_window]
    }

    fn fill(&self, i: usize, x: &mut [f32], y: &mut [f32]) {
        let (_, f0, s0) = self.starts[i];
        let n = self.features.n_samples() as i64;
        let lo = s0.max(0);
        let hi = (s0 + self.n_in as i64).min(n);
        for (c, row) in self.features.data.rows().into_iter().enumerate() {
            let dst = &mut x[c * self.n_in..(c + 1) * self.n_in];
            dst.fill(0.0);
            if lo < hi {
                let src = row.as_slice().expect("standard layout");
                dst[(lo - s0) as usize..(hi - s0) as usize].copy_from_slice(&src[lo as usize..hi as usize]);
            }
        }
        let w = self.cfg.mel_frames_per_window;
        for (m, row) in self.mel.data.rows().into_iter().enumerate() {
            for j in 0..w {
                y[m * w + j] = row[f0 + j];
            }
        }
    }
}

/// Convenience wrapper returning materialised pairs.
pub fn make_pairs(
    features: &FeatureSequence,
    mel: &MelSpectrogram,
    cfg: &WindowConfig,
    split: Span,
    hop_ms: f64,
) -> Result<Vec<WindowPair>> {
    Ok(PairSet::new(features, mel, cfg, split, hop_ms)?.to_vec())
}

/// Per-channel affine normalisation fitted on one span.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Standardizer {
    pub fn fit(features: &FeatureSequence, span: Span) -> Result<Self> {
        let a = ((span.start - features.origin_time) * features.fs).round().max(0.0) as usize;
        let b = (((span.end - features.origin_time) * features.fs).round() as usize).min(features.n_samples());
        if b <= a {
            return Err(Error::InsufficientData("empty span for feature statistics".into()));
        }
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for row in features.data.rows() {
            let seg = row.slice(ndarray::s![a..b]);
            let n = seg.len() as f64;
            let m = seg.iter().map(|&v| v as f64).sum::<f64>() / n;
            let v = seg.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
            mean.push(m as f32);
            std.push(v.sqrt().max(1e-8) as f32);
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, features: &FeatureSequence) -> FeatureSequence {
        let mut out = features.clone();
        for (c, mut row) in out.data.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v| (v - self.mean[c]) / self.std[c]);
        }
        out
    }
}
