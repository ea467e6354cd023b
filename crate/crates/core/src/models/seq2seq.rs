//! Convolutional front end, bidirectional GRU encoder over the
//! time-reversed sequence, additive-attention GRU decoder and a residual
//! convolutional post-net.

use super::gru::{add_gru, GruWeights};
use super::{add_batch_norm, conv_kernel, glorot, Architecture, Ctx, Forward};
use crate::engine::{Bound, Buffers, Graph, ModelParams, Real, Tensor, Var};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seq2SeqConfig {
    pub in_channels: usize,
    pub conv: Vec<ConvSpec>,
    pub pool: usize,
    pub enc_layers: usize,
    pub enc_hidden: usize,
    pub attn_dim: usize,
    pub dec_hidden: usize,
    pub prenet: Vec<usize>,
    pub postnet_channels: usize,
    pub postnet_kernel: usize,
    pub postnet_layers: usize,
    pub n_mels: usize,
    pub n_frames: usize,
    pub teacher_forcing_p: f64,
}

impl Seq2SeqConfig {
    /// Full-size configuration.
    pub fn paper(in_channels: usize) -> Self {
        Self {
            in_channels,
            conv: vec![
                ConvSpec { channels: 150, kernel: 9, stride: 5 },
                ConvSpec { channels: 225, kernel: 5, stride: 1 },
                ConvSpec { channels: 300, kernel: 3, stride: 1 },
            ],
            pool: 2,
            enc_layers: 3,
            enc_hidden: 333,
            attn_dim: 128,
            dec_hidden: 333,
            prenet: vec![256, 128],
            postnet_channels: 512,
            postnet_kernel: 5,
            postnet_layers: 5,
            n_mels: 80,
            n_frames: 32,
            teacher_forcing_p: 0.1,
        }
    }

    /// Reduced widths for single-core runs; same topology.
    pub fn desk(in_channels: usize) -> Self {
        Self {
            in_channels,
            conv: vec![
                ConvSpec { channels: 16, kernel: 9, stride: 5 },
                ConvSpec { channels: 24, kernel: 5, stride: 2 },
                ConvSpec { channels: 32, kernel: 3, stride: 1 },
            ],
            pool: 2,
            enc_layers: 1,
            enc_hidden: 48,
            attn_dim: 32,
            dec_hidden: 48,
            prenet: vec![48, 32],
            postnet_channels: 32,
            postnet_kernel: 5,
            postnet_layers: 5,
            n_mels: 80,
            n_frames: 32,
            teacher_forcing_p: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("seq2seq: {m}")));
        if self.conv.is_empty() || self.conv.iter().any(|c| c.channels == 0 || c.kernel == 0 || c.stride == 0) {
            return bad("conv layers need positive channels, kernel and stride");
        }
        if self.enc_layers == 0 || self.enc_hidden == 0 || self.dec_hidden == 0 || self.attn_dim == 0 {
            return bad("recurrent sizes must be positive");
        }
        if self.postnet_layers < 2 || self.prenet.is_empty() || self.pool == 0 {
            return bad("need a pre-net, a pool width and at least two post-net layers");
        }
        if !(0.0..=1.0).contains(&self.teacher_forcing_p) {
            return bad("teacher forcing probability outside [0, 1]");
        }
        Ok(())
    }

    /// Encoder length for `n_in` input samples, if the input is long enough.
    pub fn encoder_len(&self, n_in: usize) -> Option<usize> {
        let mut t = n_in;
        for c in &self.conv {
            let padded = t + 2 * (c.kernel / 2);
            if padded < c.kernel {
                return None;
            }
            t = (padded - c.kernel) / c.stride + 1;
        }
        (t >= self.pool).then(|| (t - self.pool) / self.pool + 1)
    }
}

#[derive(Clone, Debug)]
pub struct Seq2Seq {
    pub cfg: Seq2SeqConfig,
}

/// Sinusoidal position table `[T, D]`.
pub fn positional_embedding<T: Real>(t_len: usize, dim: usize) -> Vec<T> {
    let mut pe = vec![T::zero(); t_len * dim];
    for t in 0..t_len {
        for d in 0..dim {
            let i = (d / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * i / dim as f64);
            pe[t * dim + d] = T::of(if d % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

/// Bound attention weights.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub ws: Var,
    pub bs: Var,
    pub wh: Var,
    pub v: Var,
}

impl Attention {
    pub fn bind(p: &Bound) -> Result<Self> {
        Ok(Self {
            ws: p.get("att.ws")?,
            bs: p.get("att.bs")?,
            wh: p.get("att.wh")?,
            v: p.get("att.v")?,
        })
    }

    /// `enc [B, T, H]` to keys `[B, T, A]`.
    pub fn keys<T: Real>(&self, g: &mut Graph<T>, enc: Var) -> Result<Var> {
        g.linear(enc, self.wh, None)
    }

    /// Scores `vᵀ tanh(W_s s + W_h h_i)` as `[B, T]`.
    pub fn scores<T: Real>(&self, g: &mut Graph<T>, s: Var, keys: Var) -> Result<Var> {
        let (b, t) = (g.shape(keys)[0], g.shape(keys)[1]);
        let q = g.linear(s, self.ws, Some(self.bs))?;
        let q = g.expand(q, 1, t)?;
        let e = g.add(keys, q)?;
        let e = g.tanh(e);
        let sc = g.linear(e, self.v, None)?;
        g.reshape(sc, &[b, t])
    }

    /// Context `[B, H]` and weights `[B, T]`.
    pub fn attend<T: Real>(&self, g: &mut Graph<T>, s: Var, keys: Var, enc: Var) -> Result<(Var, Var)> {
        let sc = self.scores(g, s, keys)?;
        let w = g.softmax(sc, 1)?;
        let (b, t, h) = (g.shape(enc)[0], g.shape(enc)[1], g.shape(enc)[2]);
        let w3 = g.reshape(w, &[b, 1, t])?;
        let c = g.bmm(w3, enc)?;
        Ok((g.reshape(c, &[b, h])?, w))
    }
}

impl Seq2Seq {
    pub fn new(cfg: Seq2SeqConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Convolutional front end: `[B, C, N]` to `[B, D, T_enc]`.
    pub fn frontend<T: Real>(&self, g: &mut Graph<T>, p: &Bound, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.cfg.in_channels {
            return Err(Error::shape("seq2seq input", &shape, &[0, self.cfg.in_channels, 0]));
        }
        if self.cfg.encoder_len(shape[2]).is_none() {
            return Err(Error::Config(format!("seq2seq: {} input samples below the receptive field", shape[2])));
        }
        let mut h = x;
        for (i, c) in self.cfg.conv.iter().enumerate() {
            let w = p.get(&format!("conv{i}.w"))?;
            let b = p.get(&format!("conv{i}.b"))?;
            h = g.conv(h, w, Some(b), &[c.stride], &[c.kernel / 2])?;
            h = ctx.batch_norm(g, p, &format!("bn{i}"), h)?;
            h = g.relu(h);
        }
        g.max_pool1d(h, self.cfg.pool, self.cfg.pool)
    }

    /// Positional embedding, time reversal and the stacked bidirectional
    /// GRU. Returns chronological states `[B, T, H]` and the final forward
    /// and backward states of the last layer.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, p: &Bound, latent: Var) -> Result<(Var, Var, Var)> {
        let x = g.permute(latent, &[0, 2, 1])?;
        let (b, t, d) = (g.shape(x)[0], g.shape(x)[1], g.shape(x)[2]);
        let table = positional_embedding::<T>(t, d);
        let pe: Vec<T> = (0..b).flat_map(|_| table.iter().copied()).collect();
        let pe = g.constant(Tensor::new(&[b, t, d], pe)?);
        let x = g.add(x, pe)?;
        let mut h = g.reverse(x, 1)?;
        let zeros = g.constant(Tensor::zeros(&[b, self.cfg.enc_hidden]));
        let (mut last_f, mut last_b) = (zeros, zeros);
        for l in 0..self.cfg.enc_layers {
            let fw = GruWeights::bind(g, p, &format!("enc{l}.fwd"))?;
            let bw = GruWeights::bind(g, p, &format!("enc{l}.bwd"))?;
            let fs = fw.run(g, h, zeros, false)?;
            let bs = bw.run(g, h, zeros, true)?;
            last_f = fs[t - 1];
            last_b = bs[0];
            let summed = fs
                .iter()
                .zip(&bs)
                .map(|(&a, &c)| g.add(a, c))
                .collect::<Result<Vec<_>>>()?;
            h = g.stack(&summed, 1)?;
        }
        let enc = g.reverse(h, 1)?;
        Ok((enc, last_f, last_b))
    }

    /// Autoregressive decoding of `n_frames` frames followed by the
    /// residual post-net. Returns `(pre, post, attention [B, F, T])`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        enc: Var,
        init: Var,
        teacher: Option<Var>,
        forcing_p: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Var, Var)> {
        let cfg = &self.cfg;
        if forcing_p > 0.0 && teacher.is_none() {
            return Err(Error::Config("teacher forcing requested without a teacher".into()));
        }
        let b = g.shape(enc)[0];
        let m = cfg.n_mels;
        if let Some(tv) = teacher {
            let want = [b, m, cfg.n_frames];
            if g.shape(tv) != want {
                return Err(Error::shape("teacher", g.shape(tv), &want));
            }
        }
        let att = Attention::bind(p)?;
        let dec = GruWeights::bind(g, p, "dec")?;
        let keys = att.keys(g, enc)?;
        let w0 = p.get("init.w")?;
        let b0 = p.get("init.b")?;
        let s0 = g.linear(init, w0, Some(b0))?;
        let mut s = g.tanh(s0);
        let mut prev = g.constant(Tensor::zeros(&[b, m]));
        let mut outs = Vec::with_capacity(cfg.n_frames);
        let mut weights = Vec::with_capacity(cfg.n_frames);
        for t in 0..cfg.n_frames {
            if t > 0 && forcing_p > 0.0 {
                let tv = teacher.expect("checked above");
                let truth = g.select(tv, 2, t - 1)?;
                let mut keep = vec![T::zero(); b * m];
                let mut own = vec![T::one(); b * m];
                for bi in 0..b {
                    if rng.random_bool(forcing_p) {
                        keep[bi * m..(bi + 1) * m].fill(T::one());
                        own[bi * m..(bi + 1) * m].fill(T::zero());
                    }
                }
                let keep = g.constant(Tensor::new(&[b, m], keep)?);
                let own = g.constant(Tensor::new(&[b, m], own)?);
                let a = g.mul(truth, keep)?;
                let c = g.mul(prev, own)?;
                prev = g.add(a, c)?;
            }
            let mut q = prev;
            for i in 0..cfg.prenet.len() {
                let w = p.get(&format!("prenet{i}.w"))?;
                let bb = p.get(&format!("prenet{i}.b"))?;
                q = g.linear(q, w, Some(bb))?;
                q = g.relu(q);
            }
            let (context, w) = att.attend(g, s, keys, enc)?;
            let gin = g.concat(&[q, context], 1)?;
            s = dec.cell(g, gin, s)?;
            let so = g.concat(&[s, context], 1)?;
            let ow = p.get("out.w")?;
            let ob = p.get("out.b")?;
            let frame = g.linear(so, ow, Some(ob))?;
            outs.push(frame);
            weights.push(w);
            prev = frame;
        }
        let pre = g.stack(&outs, 2)?;
        let mut y = pre;
        for i in 0..cfg.postnet_layers {
            let w = p.get(&format!("post{i}.w"))?;
            let bb = p.get(&format!("post{i}.b"))?;
            y = g.conv(y, w, Some(bb), &[1], &[cfg.postnet_kernel / 2])?;
            if i + 1 < cfg.postnet_layers {
                y = g.tanh(y);
            }
        }
        let post = g.add(pre, y)?;
        let attention = g.stack(&weights, 1)?;
        Ok((pre, post, attention))
    }
}

impl Architecture for Seq2Seq {
    fn name(&self) -> &'static str {
        "seq2seq"
    }

    fn init<T: Real>(&self, seed: u64) -> Result<(ModelParams<T>, Buffers<T>)> {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new();
        let mut buf = Buffers::new();
        let mut ci = cfg.in_channels;
        for (i, c) in cfg.conv.iter().enumerate() {
            p.insert(format!("conv{i}.w"), conv_kernel(&mut rng, c.channels, ci, &[c.kernel]))?;
            p.insert(format!("conv{i}.b"), Tensor::zeros(&[c.channels]))?;
            add_batch_norm(&mut p, &mut buf, &format!("bn{i}"), c.channels)?;
            ci = c.channels;
        }
        let mut input = ci;
        for l in 0..cfg.enc_layers {
            add_gru(&mut p, &mut rng, &format!("enc{l}.fwd"), input, cfg.enc_hidden)?;
            add_gru(&mut p, &mut rng, &format!("enc{l}.bwd"), input, cfg.enc_hidden)?;
            input = cfg.enc_hidden;
        }
        p.insert("init.w", glorot(&mut rng, 2 * cfg.enc_hidden, cfg.dec_hidden))?;
        p.insert("init.b", Tensor::zeros(&[cfg.dec_hidden]))?;
        p.insert("att.ws", glorot(&mut rng, cfg.dec_hidden, cfg.attn_dim))?;
        p.insert("att.bs", Tensor::zeros(&[cfg.attn_dim]))?;
        p.insert("att.wh", glorot(&mut rng, cfg.enc_hidden, cfg.attn_dim))?;
        p.insert("att.v", glorot(&mut rng, cfg.attn_dim, 1))?;
        let mut prev = cfg.n_mels;
        for (i, &d) in cfg.prenet.iter().enumerate() {
            p.insert(format!("prenet{i}.w"), glorot(&mut rng, prev, d))?;
            p.insert(format!("prenet{i}.b"), Tensor::zeros(&[d]))?;
            prev = d;
        }
        add_gru(&mut p, &mut rng, "dec", prev + cfg.enc_hidden, cfg.dec_hidden)?;
        p.insert("out.w", glorot(&mut rng, cfg.dec_hidden + cfg.enc_hidden, cfg.n_mels))?;
        p.insert("out.b", Tensor::zeros(&[cfg.n_mels]))?;
        let mut ch = cfg.n_mels;
        for i in 0..cfg.postnet_layers {
            let co = if i + 1 == cfg.postnet_layers { cfg.n_mels } else { cfg.postnet_channels };
            p.insert(format!("post{i}.w"), conv_kernel(&mut rng, co, ch, &[cfg.postnet_kernel]))?;
            p.insert(format!("post{i}.b"), Tensor::zeros(&[co]))?;
            ch = co;
        }
        // The residual stage starts close to the identity.
        let last = format!("post{}.w", cfg.postnet_layers - 1);
        if let Some(w) = p.get_mut(&last) {
            w.value.data_mut().iter_mut().for_each(|v| *v *= T::of(0.1));
        }
        Ok((p, buf))
    }

    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        ctx: &mut Ctx<T>,
        x: Var,
        teacher: Option<Var>,
        forcing_p: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Forward> {
        let latent = self.frontend(g, p, ctx, x)?;
        let (enc, last_f, last_b) = self.encode(g, p, latent)?;
        let init = g.concat(&[last_f, last_b], 1)?;
        let (pre, post, attention) = self.decode(g, p, enc, init, teacher, forcing_p, rng)?;
        Ok(Forward {
            prediction: post,
            pre: Some(pre),
            attention: Some(attention),
        })
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::json!({ "arch": "seq2seq", "config": self.cfg })
    }
}
