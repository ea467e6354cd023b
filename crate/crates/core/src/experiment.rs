//! End-to-end runs: recording → features and targets → training →
//! test-split evaluation.

use crate::audio::{mel_spectrogram, resample_audio, MelConfig, MelSpectrogram};
use crate::data_io::{make_split, Checkpoint, Recording, Span, SplitSpec};
use crate::dsp::{extract_features, FeatureSequence};
use crate::engine::{Buffers, ModelParams};
use crate::error::{Error, Result};
use crate::evaluation::{attention_stats, pearson_per_bin, AttentionStats, EvalReport};
use crate::models::{AnyModel, Architecture, DenseNet, DenseNetConfig, FrameSet, Seq2Seq, Seq2SeqConfig};
use crate::training::{infer, lr_search, train_with, Control, EpochMetrics, LrSearch, TrainConfig, TrainOutcome};
use crate::windowing::{ExampleSource, PairSet, Standardizer, WindowConfig};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Standardised features, mel targets and the chronological split of one
/// recording.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub features: FeatureSequence,
    pub mel: MelSpectrogram,
    pub split: SplitSpec,
    pub standardizer: Standardizer,
}

pub fn prepare(rec: &Recording, mel_cfg: &MelConfig) -> Result<Prepared> {
    rec.validate()?;
    let split = make_split(rec)?;
    let raw = extract_features(rec)?;
    let standardizer = Standardizer::fit(&raw, split.train)?;
    let features = standardizer.apply(&raw);
    let audio = resample_audio(&rec.audio_f32(), rec.fs_audio)?;
    let mel = mel_spectrogram(&audio, mel_cfg)?;
    Ok(Prepared {
        features,
        mel,
        split,
        standardizer,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Seq2Seq,
    DenseNet,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Seq2Seq => "seq2seq",
            Arch::DenseNet => "densenet",
        }
    }
}

/// Everything a training run depends on apart from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub window: WindowConfig,
    pub mel: MelConfig,
    /// `in_channels` is taken from the data at run time.
    pub seq2seq: Seq2SeqConfig,
    pub densenet: DenseNetConfig,
    pub train: TrainConfig,
    /// Keep every n-th frame when training and validating the frame model;
    /// the test split always uses every frame.
    pub densenet_frame_stride: usize,
    pub eval_batch: usize,
}

impl ExperimentConfig {
    /// Full-size models and schedule.
    pub fn paper() -> Self {
        Self {
            window: WindowConfig::default(),
            mel: MelConfig::default(),
            seq2seq: Seq2SeqConfig::paper(0),
            densenet: DenseNetConfig::paper(0),
            train: TrainConfig::default(),
            densenet_frame_stride: 1,
            eval_batch: 64,
        }
    }

    /// Reduced widths, batch and schedule for single-core runs.
    pub fn desk() -> Self {
        Self {
            seq2seq: Seq2SeqConfig::desk(0),
            densenet: DenseNetConfig::desk(0),
            train: TrainConfig {
                batch_size: 32,
                lr: 0.002,
                epochs: 12,
                lr_halve_epoch: 10,
                ..TrainConfig::default()
            },
            window: WindowConfig {
                hop_train_ms: 100.0,
                ..WindowConfig::default()
            },
            densenet_frame_stride: 8,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        self.mel.validate()?;
        self.train.validate()?;
        if self.densenet_frame_stride == 0 || self.eval_batch == 0 {
            return Err(Error::Config("frame stride and eval batch must be positive".into()));
        }
        Ok(())
    }

    /// Short content hash of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("serialisable");
        let d = Sha256::digest(json);
        d[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn seq2seq_model(&self, in_channels: usize) -> Result<Seq2Seq> {
        Seq2Seq::new(Seq2SeqConfig {
            in_channels,
            n_frames: self.window.mel_frames_per_window,
            n_mels: self.mel.n_mels,
            ..self.seq2seq.clone()
        })
    }

    pub fn model(&self, arch: Arch, in_channels: usize) -> Result<AnyModel> {
        Ok(match arch {
            Arch::Seq2Seq => AnyModel::Seq2Seq(self.seq2seq_model(in_channels)?),
            Arch::DenseNet => AnyModel::DenseNet(self.densenet_model(in_channels)?),
        })
    }

    pub fn densenet_model(&self, in_channels: usize) -> Result<DenseNet> {
        DenseNet::new(DenseNetConfig {
            in_channels,
            neural_fs: self.window.neural_fs,
            n_mels: self.mel.n_mels,
            ..self.densenet.clone()
        })
    }
}

/// Training span restricted to its leading `fraction`.
pub fn train_span(split: &SplitSpec, fraction: f64) -> Span {
    Span::new(split.train.start, split.train.start + fraction.clamp(0.0, 1.0) * split.train.len())
}

/// Runs a model over a source and lays the outputs side by side as
/// `[n_mels, frames]`, together with the targets and, when present, the
/// attention matrices of every example.
pub fn predict<A: Architecture, S: ExampleSource>(
    model: &A,
    params: &ModelParams<f32>,
    buffers: &Buffers<f32>,
    source: &S,
    n_mels: usize,
    batch: usize,
) -> Result<(Array2<f32>, Array2<f32>, Vec<Array2<f32>>)> {
    let all: Vec<usize> = (0..source.len()).collect();
    let mut pred_cols: Vec<Array2<f32>> = Vec::new();
    let mut truth_cols: Vec<Array2<f32>> = Vec::new();
    let mut attention = Vec::new();
    for idx in all.chunks(batch.max(1)) {
        let (p, att, y) = infer(model, params, buffers, source, idx)?;
        let per = p.len() / idx.len() / n_mels;
        for b in 0..idx.len() {
            let take = |t: &[f32]| {
                Array2::from_shape_vec((n_mels, per), t[b * n_mels * per..(b + 1) * n_mels * per].to_vec())
                    .expect("sized")
            };
            pred_cols.push(take(p.data()));
            truth_cols.push(take(y.data()));
        }
        if let Some(a) = att {
            let (steps, t) = (a.shape()[1], a.shape()[2]);
            for chunk in a.data().chunks(steps * t) {
                attention.push(Array2::from_shape_vec((steps, t), chunk.to_vec()).expect("sized"));
            }
        }
    }
    if pred_cols.is_empty() {
        return Err(Error::InsufficientData("nothing to predict".into()));
    }
    let cat = |v: &[Array2<f32>]| {
        let views: Vec<_> = v.iter().map(|a| a.view()).collect();
        ndarray::concatenate(Axis(1), &views).expect("same row count")
    };
    Ok((cat(&pred_cols), cat(&truth_cols), attention))
}

/// Outcome of one training run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub arch: Arch,
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub n_params: usize,
    pub train_minutes: f64,
    pub test: EvalReport,
    pub val_r: Option<f64>,
    pub prediction: Array2<f32>,
    /// Mean attention matrix over the test windows with its diagnostics.
    pub attention: Option<(Array2<f32>, AttentionStats)>,
    /// Largest row-sum error over every test window.
    pub attention_max_row_error: Option<f64>,
}

/// Options of one run beyond the configuration.
#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub arch: Arch,
    pub seed: u64,
    pub train_fraction: f64,
    /// Stop once validation r reaches this value.
    pub target_val_r: Option<f64>,
}

fn eval_sources<'a>(
    prep: &'a Prepared,
    cfg: &ExperimentConfig,
    span: Span,
) -> Result<PairSet<'a>> {
    PairSet::new(&prep.features, &prep.mel, &cfg.window, span, cfg.window.hop_eval_ms)
}

fn run_model<A, S, F>(
    model: &A,
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    train_set: &S,
    val_set: &S,
    test_set: &S,
    make_hash: F,
) -> Result<(TrainOutcome, EvalReport, Option<f64>, Array2<f32>, Vec<Array2<f32>>)>
where
    A: Architecture,
    S: ExampleSource,
    F: Fn() -> String,
{
    let train_cfg = TrainConfig {
        seed: opts.seed,
        ..cfg.train.clone()
    };
    let n_mels = cfg.mel.n_mels;
    let val_r = |params: &ModelParams<f32>, buffers: &Buffers<f32>| -> Result<Option<f64>> {
        let (p, t, _) = predict(model, params, buffers, val_set, n_mels, cfg.eval_batch)?;
        Ok(pearson_per_bin(&p, &t)?.mean)
    };
    let mut hook_err = None;
    let outcome = train_with(model, train_set, Some(val_set), &train_cfg, None, |m: &EpochMetrics, p, b| {
        let Some(target) = opts.target_val_r else {
            return Control::Continue;
        };
        match val_r(p, b) {
            Ok(Some(r)) => {
                log::info!("epoch {}: val r {r:.4}", m.epoch);
                if r >= target {
                    Control::Stop
                } else {
                    Control::Continue
                }
            }
            Ok(None) => Control::Continue,
            Err(e) => {
                hook_err = Some(e);
                Control::Stop
            }
        }
    })?;
    if let Some(e) = hook_err {
        return Err(e);
    }
    let ck = if opts.target_val_r.is_some() { &outcome.last } else { &outcome.best };
    let vr = val_r(&ck.params, &ck.buffers)?;
    let (pred, truth, att) = predict(model, &ck.params, &ck.buffers, test_set, n_mels, cfg.eval_batch)?;
    let report = EvalReport::new(&pred, &truth, opts.seed, &make_hash())?;
    Ok((outcome, report, vr, pred, att))
}

/// Trains one model on the (possibly truncated) training split and scores
/// it on the test split. Returns `None` when the truncated split holds no
/// training example.
pub fn run(prep: &Prepared, cfg: &ExperimentConfig, opts: RunOptions) -> Result<Option<RunOutput>> {
    cfg.validate()?;
    let span = train_span(&prep.split, opts.train_fraction);
    let c = prep.features.n_channels();
    let hash = || cfg.hash();
    let (outcome, test, val_r, prediction, att, n_params) = match opts.arch {
        Arch::Seq2Seq => {
            let model = cfg.seq2seq_model(c)?;
            let tr = PairSet::new(&prep.features, &prep.mel, &cfg.window, span, cfg.window.hop_train_ms)?;
            if tr.is_empty() {
                return Ok(None);
            }
            let va = eval_sources(prep, cfg, prep.split.val)?;
            let te = eval_sources(prep, cfg, prep.split.test)?;
            let n = model.init::<f32>(0)?.0.count();
            let (o, r, v, p, a) = run_model(&model, cfg, &opts, &tr, &va, &te, hash)?;
            (o, r, v, p, a, n)
        }
        Arch::DenseNet => {
            let model = cfg.densenet_model(c)?;
            let shift = cfg.window.frame_shift_ms;
            let stride = cfg.densenet_frame_stride;
            let tr = FrameSet::new(&prep.features, Some(&prep.mel), &model.cfg, span, shift, stride)?;
            if tr.is_empty() {
                return Ok(None);
            }
            let va = FrameSet::new(&prep.features, Some(&prep.mel), &model.cfg, prep.split.val, shift, stride)?;
            let te = FrameSet::new(&prep.features, Some(&prep.mel), &model.cfg, prep.split.test, shift, 1)?;
            let n = model.init::<f32>(0)?.0.count();
            let (o, r, v, p, a) = run_model(&model, cfg, &opts, &tr, &va, &te, hash)?;
            (o, r, v, p, a, n)
        }
    };
    let mut outcome = outcome;
    let spec = serde_json::to_value(ModelSpec {
        arch: opts.arch,
        seed: opts.seed,
        in_channels: c,
        experiment: cfg.clone(),
    })?;
    outcome.best.config = spec.clone();
    outcome.last.config = spec;
    let (attention, attention_max_row_error) = if att.is_empty() {
        (None, None)
    } else {
        let mut mean = Array2::<f32>::zeros(att[0].dim());
        let mut worst: f64 = 0.0;
        for a in &att {
            mean += a;
            worst = worst.max(attention_stats(a).max_row_error);
        }
        mean /= att.len() as f32;
        let stats = attention_stats(&mean);
        (Some((mean, stats)), Some(worst))
    };
    Ok(Some(RunOutput {
        arch: opts.arch,
        seed: opts.seed,
        outcome,
        n_params,
        train_minutes: span.len() / 60.0,
        test,
        val_r,
        prediction,
        attention,
        attention_max_row_error,
    }))
}

/// What `run` stores in a checkpoint's config field: enough to rebuild the
/// model and its data pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub seed: u64,
    pub in_channels: usize,
    pub experiment: ExperimentConfig,
}

impl ModelSpec {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let spec: Self = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Incompatible(format!("checkpoint carries no experiment spec: {e}")))?;
        let model = spec.experiment.model(spec.arch, spec.in_channels)?;
        let expected = match &model {
            AnyModel::Seq2Seq(m) => m.init::<f32>(0)?.0,
            AnyModel::DenseNet(m) => m.init::<f32>(0)?.0,
        };
        ck.check_compatible(&expected)?;
        Ok(spec)
    }
}

/// Predictions, targets and attention matrices of a checkpoint over one
/// span, every frame included.
pub fn predict_span(
    prep: &Prepared,
    spec: &ModelSpec,
    ck: &Checkpoint,
    span: Span,
) -> Result<(Array2<f32>, Array2<f32>, Vec<Array2<f32>>)> {
    let cfg = &spec.experiment;
    if prep.features.n_channels() != spec.in_channels {
        return Err(Error::Incompatible(format!(
            "checkpoint expects {} channels, recording has {}",
            spec.in_channels,
            prep.features.n_channels()
        )));
    }
    let n_mels = cfg.mel.n_mels;
    match cfg.model(spec.arch, spec.in_channels)? {
        AnyModel::Seq2Seq(m) => {
            let set = eval_sources(prep, cfg, span)?;
            predict(&m, &ck.params, &ck.buffers, &set, n_mels, cfg.eval_batch)
        }
        AnyModel::DenseNet(m) => {
            let set = FrameSet::new(&prep.features, Some(&prep.mel), &m.cfg, span, cfg.window.frame_shift_ms, 1)?;
            predict(&m, &ck.params, &ck.buffers, &set, n_mels, cfg.eval_batch)
        }
    }
}

/// Learning-rate grid search on the training and validation splits.
pub fn search_lr(prep: &Prepared, cfg: &ExperimentConfig, arch: Arch, seed: u64) -> Result<LrSearch> {
    cfg.validate()?;
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let c = prep.features.n_channels();
    match cfg.model(arch, c)? {
        AnyModel::Seq2Seq(m) => {
            let tr = PairSet::new(&prep.features, &prep.mel, &cfg.window, prep.split.train, cfg.window.hop_train_ms)?;
            let va = eval_sources(prep, cfg, prep.split.val)?;
            lr_search(&m, &tr, &va, &train_cfg)
        }
        AnyModel::DenseNet(m) => {
            let (shift, stride) = (cfg.window.frame_shift_ms, cfg.densenet_frame_stride);
            let tr = FrameSet::new(&prep.features, Some(&prep.mel), &m.cfg, prep.split.train, shift, stride)?;
            let va = FrameSet::new(&prep.features, Some(&prep.mel), &m.cfg, prep.split.val, shift, stride)?;
            lr_search(&m, &tr, &va, &train_cfg)
        }
    }
}
