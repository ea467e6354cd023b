//! Densely connected 3-D convolutional baseline mapping one 50 ms window
//! of folded channels to a single mel frame.

use super::{add_batch_norm, conv_kernel, glorot, Architecture, Ctx, Forward};
use crate::audio::MelSpectrogram;
use crate::data_io::Span;
use crate::dsp::FeatureSequence;
use crate::engine::{Bound, Buffers, Graph, ModelParams, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::windowing::ExampleSource;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Most-square factor pair `(a, b)`, `a <= b`, of the smallest composite
/// `m >= c`; counts below 4 map to `(1, c)`.
pub fn fold_channels(c: usize) -> (usize, usize) {
    let c = c.max(1);
    if c < 4 {
        return (1, c);
    }
    let mut m = c;
    loop {
        let a = (2..=m.isqrt()).rev().find(|a| m % a == 0);
        if let Some(a) = a {
            return (a, m / a);
        }
        m += 1;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNetConfig {
    pub in_channels: usize,
    pub window_ms: f64,
    pub neural_fs: f64,
    pub init_channels: usize,
    pub blocks: usize,
    pub layers_per_block: usize,
    pub growth: usize,
    pub compression: f64,
    pub n_mels: usize,
}

impl DenseNetConfig {
    pub fn paper(in_channels: usize) -> Self {
        Self {
            in_channels,
            window_ms: 50.0,
            neural_fs: 1024.0,
            init_channels: 16,
            blocks: 3,
            layers_per_block: 4,
            growth: 8,
            compression: 0.5,
            n_mels: 80,
        }
    }

    /// Narrower blocks for single-core runs; same topology.
    pub fn desk(in_channels: usize) -> Self {
        Self {
            init_channels: 8,
            growth: 4,
            ..Self::paper(in_channels)
        }
    }

    pub fn window_samples(&self) -> usize {
        (self.window_ms * 1e-3 * self.neural_fs).round() as usize
    }

    pub fn fold(&self) -> (usize, usize) {
        fold_channels(self.in_channels)
    }

    /// Channel count entering and leaving each block:
    /// `(in, in + layers * growth, after transition)`.
    pub fn block_channels(&self) -> Vec<(usize, usize, usize)> {
        let mut ch = self.init_channels;
        (0..self.blocks)
            .map(|_| {
                let grown = ch + self.layers_per_block * self.growth;
                let out = ((grown as f64 * self.compression).floor() as usize).max(1);
                let r = (ch, grown, out);
                ch = out;
                r
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.blocks == 0 || self.growth == 0 || self.init_channels == 0 {
            return Err(Error::Config("densenet: sizes must be positive".into()));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) || self.window_samples() == 0 {
            return Err(Error::Config("densenet: compression in (0, 1] and a non-empty window".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DenseNet {
    pub cfg: DenseNetConfig,
}

impl DenseNet {
    pub fn new(cfg: DenseNetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    fn bn_relu_conv<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        ctx: &mut Ctx<T>,
        name: &str,
        x: Var,
        pad: usize,
    ) -> Result<Var> {
        let h = ctx.batch_norm(g, p, &format!("{name}.bn"), x)?;
        let h = g.relu(h);
        let w = p.get(&format!("{name}.w"))?;
        let b = p.get(&format!("{name}.b"))?;
        g.conv(h, w, Some(b), &[1, 1, 1], &[pad, pad, pad])
    }

    /// Dense block: each layer's output is concatenated to its input.
    pub fn dense_block<T: Real>(&self, g: &mut Graph<T>, p: &Bound, ctx: &mut Ctx<T>, bi: usize, x: Var) -> Result<Var> {
        let mut h = x;
        for l in 0..self.cfg.layers_per_block {
            let y = self.bn_relu_conv(g, p, ctx, &format!("block{bi}.layer{l}"), h, 1)?;
            h = g.concat(&[h, y], 1)?;
        }
        Ok(h)
    }
}

impl Architecture for DenseNet {
    fn name(&self) -> &'static str {
        "densenet"
    }

    fn init<T: Real>(&self, seed: u64) -> Result<(ModelParams<T>, Buffers<T>)> {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new();
        let mut buf = Buffers::new();
        p.insert("stem.w", conv_kernel(&mut rng, cfg.init_channels, 1, &[3, 3, 3]))?;
        p.insert("stem.b", Tensor::zeros(&[cfg.init_channels]))?;
        for (bi, (cin, grown, out)) in cfg.block_channels().into_iter().enumerate() {
            for l in 0..cfg.layers_per_block {
                let ch = cin + l * cfg.growth;
                let name = format!("block{bi}.layer{l}");
                add_batch_norm(&mut p, &mut buf, &format!("{name}.bn"), ch)?;
                p.insert(format!("{name}.w"), conv_kernel(&mut rng, cfg.growth, ch, &[3, 3, 3]))?;
                p.insert(format!("{name}.b"), Tensor::zeros(&[cfg.growth]))?;
            }
            let name = format!("trans{bi}");
            add_batch_norm(&mut p, &mut buf, &format!("{name}.bn"), grown)?;
            p.insert(format!("{name}.w"), conv_kernel(&mut rng, out, grown, &[1, 1, 1]))?;
            p.insert(format!("{name}.b"), Tensor::zeros(&[out]))?;
        }
        let last = cfg.block_channels().last().map_or(cfg.init_channels, |b| b.2);
        add_batch_norm(&mut p, &mut buf, "head.bn", last)?;
        p.insert("head.w", glorot(&mut rng, last, cfg.n_mels))?;
        p.insert("head.b", Tensor::zeros(&[cfg.n_mels]))?;
        Ok((p, buf))
    }

    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        ctx: &mut Ctx<T>,
        x: Var,
        _teacher: Option<Var>,
        _forcing_p: f64,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Forward> {
        let (a, b) = self.cfg.fold();
        let want = [g.shape(x)[0], 1, a, b, self.cfg.window_samples()];
        if g.shape(x) != want {
            return Err(Error::shape("densenet input", g.shape(x), &want));
        }
        let w = p.get("stem.w")?;
        let bias = p.get("stem.b")?;
        let mut h = g.conv(x, w, Some(bias), &[1, 1, 1], &[1, 1, 1])?;
        for bi in 0..self.cfg.blocks {
            h = self.dense_block(g, p, ctx, bi, h)?;
            h = self.bn_relu_conv(g, p, ctx, &format!("trans{bi}"), h, 0)?;
            let sp = g.shape(h)[2..].to_vec();
            let kernel: Vec<usize> = sp.iter().map(|&d| d.clamp(1, 2)).collect();
            h = g.avg_pool(h, &kernel)?;
        }
        h = ctx.batch_norm(g, p, "head.bn", h)?;
        h = g.relu(h);
        let pooled = g.global_avg_pool(h)?;
        let hw = p.get("head.w")?;
        let hb = p.get("head.b")?;
        let prediction = g.linear(pooled, hw, Some(hb))?;
        Ok(Forward {
            prediction,
            pre: None,
            attention: None,
        })
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::json!({ "arch": "densenet", "config": self.cfg })
    }
}

/// One 50 ms window per 12.5 ms frame of a split, centred on the frame.
#[derive(Clone, Debug)]
pub struct FrameSet<'a> {
    features: &'a FeatureSequence,
    mel: Option<&'a MelSpectrogram>,
    frames: Vec<usize>,
    fold: (usize, usize),
    window: usize,
    frame_shift_s: f64,
}

impl<'a> FrameSet<'a> {
    /// Frames of `split` on the spectrogram grid, keeping every `stride`-th.
    pub fn new(
        features: &'a FeatureSequence,
        mel: Option<&'a MelSpectrogram>,
        cfg: &DenseNetConfig,
        split: Span,
        frame_shift_ms: f64,
        stride: usize,
    ) -> Result<Self> {
        if features.fs != cfg.neural_fs || features.n_channels() != cfg.in_channels {
            return Err(Error::Config(format!(
                "frame set: {} channels at {} Hz, model expects {} at {}",
                features.n_channels(),
                features.fs,
                cfg.in_channels,
                cfg.neural_fs
            )));
        }
        let shift = frame_shift_ms * 1e-3;
        let first = ((split.start - features.origin_time) / shift).round() as usize;
        let end = ((split.end - features.origin_time) / shift).round() as usize;
        if let Some(m) = mel {
            if end > m.n_frames() {
                return Err(Error::Config("frame set: split beyond the spectrogram".into()));
            }
        }
        Ok(Self {
            features,
            mel,
            frames: (first..end).step_by(stride.max(1)).collect(),
            fold: cfg.fold(),
            window: cfg.window_samples(),
            frame_shift_s: shift,
        })
    }

    /// Centre time of example `i` in seconds.
    pub fn center(&self, i: usize) -> f64 {
        self.features.origin_time + (self.frames[i] as f64 + 0.5) * self.frame_shift_s
    }

    fn window_start(&self, i: usize) -> i64 {
        let c = (self.center(i) - self.features.origin_time) * self.features.fs;
        (c - self.window as f64 / 2.0).round() as i64
    }
}

impl ExampleSource for FrameSet<'_> {
    fn len(&self) -> usize {
        self.frames.len()
    }

    fn input_shape(&self) -> Vec<usize> {
        vec![1, self.fold.0, self.fold.1, self.window]
    }

    fn target_shape(&self) -> Vec<usize> {
        vec![self.mel.map_or(0, |m| m.data.nrows())]
    }

    fn fill(&self, i: usize, x: &mut [f32], y: &mut [f32]) {
        x.fill(0.0);
        let s0 = self.window_start(i);
        let n = self.features.n_samples() as i64;
        let (lo, hi) = (s0.max(0), (s0 + self.window as i64).min(n));
        for (c, row) in self.features.data.rows().into_iter().enumerate() {
            let dst = &mut x[c * self.window..(c + 1) * self.window];
            for j in lo..hi {
                dst[(j - s0) as usize] = row[j as usize];
            }
        }
        if let Some(m) = self.mel {
            let f = self.frames[i];
            for (k, v) in y.iter_mut().enumerate() {
                *v = m.data[[k, f]];
            }
        }
    }
}
