//! Trainable architectures built on the engine.

pub mod densenet;
pub mod gru;
pub mod seq2seq;

pub use densenet::{fold_channels, DenseNet, DenseNetConfig, FrameSet};
pub use seq2seq::{Seq2Seq, Seq2SeqConfig};

use crate::engine::{BatchNormStats, Bound, Buffers, Graph, ModelParams, Real, Tensor, Var};
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Per-forward state: normalisation mode and collected batch statistics.
pub struct Ctx<'a, T: Real> {
    pub train: bool,
    pub buffers: &'a Buffers<T>,
    pub bn_stats: Vec<(String, BatchNormStats<T>)>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn train(buffers: &'a Buffers<T>) -> Self {
        Self {
            train: true,
            buffers,
            bn_stats: Vec::new(),
        }
    }

    pub fn eval(buffers: &'a Buffers<T>) -> Self {
        Self {
            train: false,
            buffers,
            bn_stats: Vec::new(),
        }
    }

    /// Batch norm with parameters `{name}.gamma`/`{name}.beta`.
    pub fn batch_norm(&mut self, g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
        let (gamma, beta) = (p.get(&format!("{name}.gamma"))?, p.get(&format!("{name}.beta"))?);
        if self.train {
            let (y, stats) = g.batch_norm(x, gamma, beta, None, T::of(BN_EPS))?;
            self.bn_stats.push((name.to_string(), stats.expect("training mode")));
            Ok(y)
        } else {
            let get = |k: String| {
                self.buffers
                    .get(&k)
                    .ok_or_else(|| Error::Config(format!("missing buffer {k}")))
            };
            let mean = get(format!("{name}.running_mean"))?;
            let var = get(format!("{name}.running_var"))?;
            Ok(g.batch_norm(x, gamma, beta, Some((mean.data(), var.data())), T::of(BN_EPS))?.0)
        }
    }
}

/// Registers batch-norm parameters and running statistics for `ch` channels.
pub fn add_batch_norm<T: Real>(p: &mut ModelParams<T>, b: &mut Buffers<T>, name: &str, ch: usize) -> Result<()> {
    p.insert(format!("{name}.gamma"), Tensor::full(&[ch], T::one()))?;
    p.insert(format!("{name}.beta"), Tensor::zeros(&[ch]))?;
    b.insert(format!("{name}.running_mean"), Tensor::zeros(&[ch]));
    b.insert(format!("{name}.running_var"), Tensor::full(&[ch], T::one()));
    Ok(())
}

/// Exponential moving average of batch statistics.
pub fn update_running(buffers: &mut Buffers<f32>, stats: &[(String, BatchNormStats<f32>)]) {
    for (name, s) in stats {
        for (key, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            if let Some(t) = buffers.get_mut(&format!("{name}.{key}")) {
                for (r, &v) in t.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            }
        }
    }
}

/// Glorot-uniform matrix `[fan_in, fan_out]`.
pub fn glorot<T: Real>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| T::of(rng.random_range(-bound..=bound)))
}

/// He-uniform convolution kernel `[co, ci, k...]`.
pub fn conv_kernel<T: Real>(rng: &mut ChaCha8Rng, co: usize, ci: usize, k: &[usize]) -> Tensor<T> {
    let fan_in = ci * k.iter().product::<usize>();
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut shape = vec![co, ci];
    shape.extend_from_slice(k);
    Tensor::from_fn(&shape, |_| T::of(rng.random_range(-bound..=bound)))
}

/// Result of one forward pass. Predictions are `[B, n_mels, frames]` for
/// sequence models and `[B, n_mels]` for frame models.
pub struct Forward {
    pub prediction: Var,
    /// Output before a residual refinement stage, when the model has one.
    pub pre: Option<Var>,
    /// `[B, frames, T_enc]` attention weights, when the model has any.
    pub attention: Option<Var>,
}

/// Operations the trainer and evaluators need from an architecture.
pub trait Architecture: Sync + Send {
    fn name(&self) -> &'static str;

    fn init<T: Real>(&self, seed: u64) -> Result<(ModelParams<T>, Buffers<T>)>;

    /// Builds the forward graph. `teacher` is the target batch, consulted
    /// only for teacher forcing.
    #[allow(clippy::too_many_arguments)]
    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        ctx: &mut Ctx<T>,
        x: Var,
        teacher: Option<Var>,
        forcing_p: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Forward>;

    /// Training objective: element-mean squared error of the prediction,
    /// plus that of the pre-refinement output when present.
    fn objective<T: Real>(&self, g: &mut Graph<T>, f: &Forward, y: Var) -> Result<Var> {
        let post = g.mse_loss(f.prediction, y)?;
        match f.pre {
            Some(pre) => {
                let pre = g.mse_loss(pre, y)?;
                g.add(pre, post)
            }
            None => Ok(post),
        }
    }

    /// Architecture configuration echoed into checkpoints and manifests.
    fn config_json(&self) -> serde_json::Value;
}

/// Either architecture behind one type, for runtime selection.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Seq2Seq(Seq2Seq),
    DenseNet(DenseNet),
}

impl AnyModel {
    pub fn count_params(&self) -> Result<usize> {
        Ok(match self {
            AnyModel::Seq2Seq(m) => m.init::<f32>(0)?.0.count(),
            AnyModel::DenseNet(m) => m.init::<f32>(0)?.0.count(),
        })
    }
}

/// Trainable scalar count, running statistics excluded.
pub fn count_params<T: Real>(p: &ModelParams<T>) -> usize {
    p.count()
}
