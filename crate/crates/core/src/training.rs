//! AdamW optimisation loop with seeded shuffling, per-step teacher forcing,
//! a one-step learning-rate halving, best-validation retention and resume.

use crate::data_io::{Checkpoint, TrainState};
use crate::engine::{Buffers, Graph, ModelParams, Real, Tensor};
use crate::error::{Error, Result};
use crate::models::{update_running, Architecture, Ctx};
use crate::windowing::ExampleSource;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// First (1-based) epoch trained at half the base rate.
    pub lr_halve_epoch: usize,
    pub teacher_forcing_p: f64,
    pub seed: u64,
    pub lr_grid: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            lr: 0.0005,
            weight_decay: 0.001,
            epochs: 50,
            lr_halve_epoch: 45,
            teacher_forcing_p: 0.1,
            seed: 0,
            lr_grid: vec![0.1, 0.05, 0.01, 0.005, 0.001, 0.0005, 0.0001],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("train: batch size and learning rate must be positive".into()));
        }
        if self.lr_halve_epoch == 0 || (self.epochs > 0 && self.lr_halve_epoch > self.epochs) {
            return Err(Error::Config(format!(
                "train: lr_halve_epoch {} outside 1..={}",
                self.lr_halve_epoch, self.epochs
            )));
        }
        if !(0.0..=1.0).contains(&self.teacher_forcing_p) {
            return Err(Error::Config("train: teacher forcing probability outside [0, 1]".into()));
        }
        if self.lr_grid.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Config("train: grid learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_halve_epoch {
            self.lr / 2.0
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments keyed by parameter name, plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Buffers<T>,
    pub v: Buffers<T>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn for_params(p: &ModelParams<T>) -> Self {
        let zeros: Buffers<T> = p
            .iter()
            .map(|(n, q)| (n.to_string(), Tensor::zeros(q.value.shape())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

impl AdamW {
    /// One decoupled-decay update using the gradients stored on `params`.
    pub fn step<T: Real>(&self, params: &mut ModelParams<T>, state: &mut OptimizerState<T>, lr: f64, wd: f64) -> Result<()> {
        for (name, p) in params.iter() {
            let g = p.grad.as_ref().ok_or_else(|| Error::Training(format!("no gradient for {name}")))?;
            if g.shape() != p.value.shape() {
                return Err(Error::shape("adamw", g.shape(), p.value.shape()));
            }
            if !g.all_finite() {
                return Err(Error::Training(format!("non-finite gradient in {name}")));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = p.grad.as_ref().expect("checked").data().to_vec();
            let m = state
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            let v = state
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(&g)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gf = gi.as_f64();
                let mf = self.beta1 * mi.as_f64() + (1.0 - self.beta1) * gf;
                let vf = self.beta2 * vi.as_f64() + (1.0 - self.beta2) * gf * gf;
                *mi = T::of(mf);
                *vi = T::of(vf);
                let wf = w.as_f64();
                let update = (mf / c1) / ((vf / c2).sqrt() + self.eps) + wd * wf;
                *w = T::of(wf - lr * update);
            }
        }
        Ok(())
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
    pub lr: f64,
}

pub fn metrics_csv(log: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,train_mse,val_mse,lr\n");
    for m in log {
        let val = m.val_mse.map(|v| format!("{v:.8}")).unwrap_or_default();
        s.push_str(&format!("{},{:.8},{},{}\n", m.epoch, m.train_mse, val, m.lr));
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Lowest validation MSE seen; the last state when there is no
    /// validation set.
    pub best: Checkpoint,
    pub log: Vec<EpochMetrics>,
}

/// Per-epoch decision returned by a training hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    r.set_stream(stream);
    r
}

/// Forward pass without gradients. Returns `(prediction, attention)` for
/// the listed examples, in eval mode and without teacher forcing.
pub fn infer<A: Architecture, S: ExampleSource>(
    model: &A,
    params: &ModelParams<f32>,
    buffers: &Buffers<f32>,
    source: &S,
    idx: &[usize],
) -> Result<(Tensor<f32>, Option<Tensor<f32>>, Tensor<f32>)> {
    let (x, y) = source.batch::<f32>(idx);
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let xv = g.constant(x);
    let mut ctx = Ctx::eval(buffers);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let f = model.forward(&mut g, &bound, &mut ctx, xv, None, 0.0, &mut rng)?;
    let att = f.attention.map(|a| g.value(a).clone());
    Ok((g.value(f.prediction).clone(), att, y))
}

/// Element-mean squared error of the final prediction over a whole source.
pub fn evaluate_mse<A: Architecture, S: ExampleSource>(
    model: &A,
    params: &ModelParams<f32>,
    buffers: &Buffers<f32>,
    source: &S,
    batch_size: usize,
) -> Result<f64> {
    let all: Vec<usize> = (0..source.len()).collect();
    let mut se = 0.0;
    let mut n = 0usize;
    for idx in all.chunks(batch_size.max(1)) {
        let (pred, _, y) = infer(model, params, buffers, source, idx)?;
        se += pred
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &t)| (p as f64 - t as f64).powi(2))
            .sum::<f64>();
        n += y.len();
    }
    if n == 0 {
        return Err(Error::InsufficientData("evaluation set is empty".into()));
    }
    Ok(se / n as f64)
}

/// Trains from a fresh initialisation.
pub fn train<A: Architecture, S: ExampleSource>(
    model: &A,
    train_set: &S,
    val_set: Option<&S>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(model, train_set, val_set, cfg, None, |_, _, _| Control::Continue)
}

/// Full training loop. `resume` continues after the checkpoint's epoch;
/// `hook` sees every epoch's metrics and the current weights.
pub fn train_with<A, S, H>(
    model: &A,
    train_set: &S,
    val_set: Option<&S>,
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
    mut hook: H,
) -> Result<TrainOutcome>
where
    A: Architecture,
    S: ExampleSource,
    H: FnMut(&EpochMetrics, &ModelParams<f32>, &Buffers<f32>) -> Control,
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InsufficientData("no training examples".into()));
    }
    let (mut params, mut buffers, mut opt, start_epoch, mut best_val) = match resume {
        Some(ck) => {
            let (fresh, _) = model.init::<f32>(cfg.seed)?;
            ck.check_compatible(&fresh)?;
            let opt = OptimizerState {
                m: ck.state.adam_m,
                v: ck.state.adam_v,
                step: ck.state.step,
            };
            (ck.params, ck.buffers, opt, ck.state.epoch, ck.state.best_val_mse)
        }
        None => {
            let (p, b) = model.init::<f32>(cfg.seed)?;
            let opt = OptimizerState::for_params(&p);
            (p, b, opt, 0, f64::INFINITY)
        }
    };
    let adam = AdamW::default();
    let snapshot = |params: &ModelParams<f32>, buffers: &Buffers<f32>, opt: &OptimizerState<f32>, epoch, best| {
        let mut params = params.clone();
        params.zero_grads();
        Checkpoint {
            config: model.config_json(),
            params,
            buffers: buffers.clone(),
            state: TrainState {
                epoch,
                step: opt.step,
                base_lr: cfg.lr,
                best_val_mse: best,
                adam_m: opt.m.clone(),
                adam_v: opt.v.clone(),
            },
        }
    };
    let mut best = snapshot(&params, &buffers, &opt, start_epoch, best_val);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in start_epoch + 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch, 1));
        let mut forcing = epoch_rng(cfg.seed, epoch, 2);
        let (mut se, mut count) = (0.0, 0usize);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train_set.batch::<f32>(idx);
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let xv = g.constant(x);
            let yv = g.constant(y);
            let mut ctx = Ctx::train(&buffers);
            let f = model.forward(&mut g, &bound, &mut ctx, xv, Some(yv), cfg.teacher_forcing_p, &mut forcing)?;
            let loss = model.objective(&mut g, &f, yv)?;
            let metric = g.mse_loss(f.prediction, yv)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Training(format!("loss {lv} at epoch {epoch}, step {bi}")));
            }
            se += g.value(metric).item() as f64 * idx.len() as f64;
            count += idx.len();
            let stats = std::mem::take(&mut ctx.bn_stats);
            g.backward(loss)?;
            params.collect_grads(&g, &bound);
            adam.step(&mut params, &mut opt, lr, cfg.weight_decay)?;
            update_running(&mut buffers, &stats);
        }
        let val_mse = match val_set {
            Some(v) if !v.is_empty() => Some(evaluate_mse(model, &params, &buffers, v, cfg.batch_size)?),
            _ => None,
        };
        let m = EpochMetrics {
            epoch,
            train_mse: se / count as f64,
            val_mse,
            lr,
        };
        log::info!(
            "epoch {epoch}: train {:.5} val {}",
            m.train_mse,
            val_mse.map_or("-".into(), |v| format!("{v:.5}"))
        );
        match val_mse {
            Some(v) if v < best_val => {
                best_val = v;
                best = snapshot(&params, &buffers, &opt, epoch, best_val);
            }
            None => best = snapshot(&params, &buffers, &opt, epoch, best_val),
            _ => {}
        }
        let stop = hook(&m, &params, &buffers) == Control::Stop;
        log.push(m);
        if stop {
            break;
        }
    }
    let epoch = log.last().map_or(start_epoch, |m| m.epoch);
    let mut last = snapshot(&params, &buffers, &opt, epoch, best_val);
    last.state.best_val_mse = best_val;
    best.state.best_val_mse = best_val;
    Ok(TrainOutcome { last, best, log })
}

/// Result of a learning-rate grid search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSearch {
    pub best_lr: f64,
    /// `(lr, best validation MSE)`; `None` marks a diverged run.
    pub results: Vec<(f64, Option<f64>)>,
}

/// Trains one model per grid point and picks the lowest validation MSE,
/// breaking ties toward the smaller rate.
pub fn lr_search<A: Architecture, S: ExampleSource>(model: &A, train_set: &S, val_set: &S, cfg: &TrainConfig) -> Result<LrSearch> {
    if cfg.lr_grid.is_empty() {
        return Err(Error::Config("lr search: empty grid".into()));
    }
    let mut results = Vec::new();
    for &lr in &cfg.lr_grid {
        let run_cfg = TrainConfig { lr, ..cfg.clone() };
        let score = match train(model, train_set, Some(val_set), &run_cfg) {
            Ok(out) => {
                let v = out.best.state.best_val_mse;
                v.is_finite().then_some(v)
            }
            Err(Error::Training(msg)) => {
                log::warn!("lr {lr} diverged: {msg}");
                None
            }
            Err(e) => return Err(e),
        };
        results.push((lr, score));
    }
    let best = results
        .iter()
        .filter_map(|&(lr, s)| s.map(|s| (lr, s)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
        .ok_or_else(|| Error::Training(format!("lr search: every run diverged ({:?})", cfg.lr_grid)))?;
    Ok(LrSearch {
        best_lr: best.0,
        results,
    })
}
