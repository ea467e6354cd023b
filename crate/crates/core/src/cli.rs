//! Configuration resolution, run directories and the bodies of the
//! `neurovox` subcommands.

use crate::audio::{griffin_lim, MelSpectrogram};
use crate::contamination::{contamination_test, ContaminationConfig};
use crate::data_io::{
    f32_to_pcm, load_checkpoint, load_recording, read_sgv, save_checkpoint, save_recording, write_json, write_sgv,
    write_wav, Recording, Span,
};
use crate::error::Error;
use crate::evaluation::{
    ablation_csv, attention_stats, heatmap_svg, line_plot_svg, padding_ablation, size_curve_csv, training_size_curve,
    EvalReport,
};
use crate::experiment::{predict_span, prepare, run, search_lr, Arch, ExperimentConfig, ModelSpec, Prepared, RunOptions};
use crate::models::{DenseNetConfig, Seq2SeqConfig};
use crate::synthdata::{generate, SynthConfig};
use crate::training::metrics_csv;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Published full-size counts the reproduced models are compared with.
pub const REFERENCE_SEQ2SEQ_PARAMS: usize = 10_411_964;
pub const REFERENCE_DENSENET_PARAMS: usize = 86_020;

/// Where the implemented models knowingly differ from the published ones.
pub const DEVIATION_NOTES: &[&str] = &[
    "seq2seq: attention dimension (128) and decoder hidden size (333) are unpublished; both drive the parameter count",
    "densenet: the published count does not pin the layout; stem 16, 3 blocks x 4 layers, growth 8, compression 0.5 is used",
    "densenet: channels are folded onto the most-square grid of the smallest composite count >= channels; padding rows are zero",
    "mel frames are centred on a 275.625-sample grid at 22050 Hz so that 400 ms holds exactly 32 frames",
];

pub const DESK_NOTE: &str =
    "desk profile: reduced model widths, batch 32, 12 epochs and a 100 ms training hop; paper-profile counts are listed alongside";

/// Failure of a subcommand, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, missing inputs or an invalid configuration (exit 2).
    Usage(String),
    /// Anything that fails after the inputs were accepted (exit 1).
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

/// Fully resolved configuration of one invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub experiment: ExperimentConfig,
    pub synth: SynthConfig,
    pub contamination: ContaminationConfig,
    pub arch: Arch,
    /// First seed; `runs` consecutive seeds are used.
    pub seed: u64,
    pub runs: usize,
    pub paddings_ms: Vec<f64>,
    pub fractions: Vec<f64>,
    pub griffin_lim_iterations: usize,
}

/// Flag values that override the configuration file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    pub arch: Option<Arch>,
    pub padding_ms: Option<f64>,
    pub runs: Option<usize>,
}

impl RunConfig {
    pub fn base(profile: Profile) -> Self {
        Self {
            profile,
            experiment: match profile {
                Profile::Desk => ExperimentConfig::desk(),
                Profile::Paper => ExperimentConfig::paper(),
            },
            synth: SynthConfig::default(),
            contamination: ContaminationConfig::default(),
            arch: Arch::Seq2Seq,
            seed: 0,
            runs: 1,
            paddings_ms: vec![0.0, 200.0, 400.0],
            fractions: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            griffin_lim_iterations: 32,
        }
    }

    /// Profile defaults, then the JSON file, then the flags.
    pub fn resolve(file: Option<&Path>, o: &Overrides) -> CliResult<Self> {
        let user: Value = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
            }
            None => json!({}),
        };
        if !user.is_object() {
            return Err(CliError::Usage("config must be a JSON object".into()));
        }
        let profile = match (o.profile, user.get("profile")) {
            (Some(p), _) => p,
            (None, Some(v)) => {
                serde_json::from_value(v.clone()).map_err(|e| CliError::Usage(format!("config: profile: {e}")))?
            }
            (None, None) => Profile::Desk,
        };
        let mut merged = serde_json::to_value(Self::base(profile)).expect("serialisable");
        overlay(&mut merged, &user, "").map_err(CliError::Usage)?;
        let mut rc: Self = serde_json::from_value(merged).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        rc.profile = profile;
        if let Some(s) = o.seed {
            rc.seed = s;
            rc.synth.seed = s;
            rc.contamination.seed = s;
        }
        if let Some(a) = o.arch {
            rc.arch = a;
        }
        if let Some(p) = o.padding_ms {
            rc.experiment.window.context_ms = p;
        }
        if let Some(n) = o.runs {
            rc.runs = n;
        }
        rc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(rc)
    }

    pub fn validate(&self) -> crate::Result<()> {
        self.experiment.validate()?;
        self.synth.validate()?;
        self.contamination.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.runs == 0 {
            return bad("runs must be at least 1");
        }
        if self.paddings_ms.is_empty() || self.paddings_ms.iter().any(|&p| !(p >= 0.0)) {
            return bad("paddings must be non-negative and non-empty");
        }
        if self.fractions.is_empty()
            || self.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0))
            || self.fractions.windows(2).any(|w| w[0] >= w[1])
        {
            return bad("fractions must be strictly ascending in (0, 1]");
        }
        if self.griffin_lim_iterations == 0 {
            return bad("griffin_lim_iterations must be positive");
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.runs as u64).map(|i| self.seed + i).collect()
    }
}

/// Recursively writes `user` over `base`, rejecting keys `base` lacks.
fn overlay(base: &mut Value, user: &Value, path: &str) -> std::result::Result<(), String> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => overlay(slot, v, &here)?,
                    Some(slot) => *slot = v.clone(),
                    None => return Err(format!("config: unknown key `{here}`")),
                }
            }
            Ok(())
        }
        (b, u) => {
            *b = u.clone();
            Ok(())
        }
    }
}

/// Output directory of one invocation plus its provenance manifest.
pub struct RunDir {
    pub path: PathBuf,
    manifest: Value,
    outputs: Vec<String>,
}

fn short_hash(v: &Value) -> String {
    let d = Sha256::digest(serde_json::to_vec(v).expect("serialisable"));
    d[..6].iter().map(|b| format!("{b:02x}")).collect()
}

impl RunDir {
    /// Creates `<out_dir>/<UTC timestamp>-<hash>`, where the hash covers the
    /// command, resolved configuration and inputs.
    pub fn create(out_dir: &Path, command: &str, rc: &RunConfig, inputs: &BTreeMap<String, String>) -> CliResult<Self> {
        let config = serde_json::to_value(rc).expect("serialisable");
        let hash = short_hash(&json!({ "command": command, "config": config, "inputs": inputs }));
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
        let mut path = out_dir.join(format!("{stamp}-{hash}"));
        let mut k = 2;
        while path.exists() {
            path = out_dir.join(format!("{stamp}-{hash}-{k}"));
            k += 1;
        }
        std::fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        let mut notes: Vec<String> = DEVIATION_NOTES.iter().map(|s| s.to_string()).collect();
        if rc.profile == Profile::Desk {
            notes.push(DESK_NOTE.into());
        }
        let manifest = json!({
            "command": command,
            "created": stamp,
            "version": env!("CARGO_PKG_VERSION"),
            "config_hash": hash,
            "experiment_hash": rc.experiment.hash(),
            "config": config,
            "inputs": inputs,
            "deviations": notes,
            "status": "running",
        });
        let dir = Self {
            path,
            manifest,
            outputs: Vec::new(),
        };
        dir.write_manifest()?;
        Ok(dir)
    }

    pub fn set(&mut self, key: &str, value: Value) {
        self.manifest[key] = value;
    }

    /// Path of an output file, recorded in the manifest.
    pub fn file(&mut self, name: &str) -> CliResult<PathBuf> {
        let p = self.path.join(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.outputs.push(name.to_string());
        Ok(p)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> CliResult<()> {
        let p = self.file(name)?;
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, v: &T) -> CliResult<()> {
        let p = self.file(name)?;
        write_json(&p, v)?;
        Ok(())
    }

    fn write_manifest(&self) -> CliResult<()> {
        let mut m = self.manifest.clone();
        m["outputs"] = json!(self.outputs);
        write_json(&self.path.join("run.json"), &m)?;
        Ok(())
    }

    pub fn finish(mut self) -> CliResult<PathBuf> {
        self.manifest["status"] = json!("ok");
        self.write_manifest()?;
        Ok(self.path)
    }
}

/// Parameter counts of both architectures at the paper and configured
/// sizes, next to the published counts.
pub fn parameter_accounting(rc: &RunConfig, in_channels: usize) -> crate::Result<Value> {
    use crate::models::{Architecture, DenseNet, Seq2Seq};
    let window = &rc.experiment.window;
    let seq = |cfg: Seq2SeqConfig| -> crate::Result<usize> {
        let m = Seq2Seq::new(Seq2SeqConfig {
            in_channels,
            n_frames: window.mel_frames_per_window,
            ..cfg
        })?;
        Ok(m.init::<f32>(0)?.0.count())
    };
    let dense = |cfg: DenseNetConfig| -> crate::Result<usize> {
        let m = DenseNet::new(DenseNetConfig {
            in_channels,
            neural_fs: window.neural_fs,
            ..cfg
        })?;
        Ok(m.init::<f32>(0)?.0.count())
    };
    Ok(json!({
        "in_channels": in_channels,
        "seq2seq": {
            "paper_profile": seq(Seq2SeqConfig::paper(in_channels))?,
            "configured": seq(rc.experiment.seq2seq.clone())?,
            "reference": REFERENCE_SEQ2SEQ_PARAMS,
        },
        "densenet": {
            "paper_profile": dense(DenseNetConfig::paper(in_channels))?,
            "configured": dense(rc.experiment.densenet.clone())?,
            "reference": REFERENCE_DENSENET_PARAMS,
        },
    }))
}

fn require(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("input {} does not exist", path.display())))
    }
}

/// Loads a manifest (`.json`) or a bare neural file. A bare neural file
/// gets silent audio of the same duration so the usual pipeline applies.
pub fn load_input(path: &Path) -> CliResult<Recording> {
    require(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        return Ok(load_recording(path)?);
    }
    let (neural, fs_neural) = read_sgv(path)?;
    let fs_audio = 48_000.0;
    let n_audio = (neural.ncols() as f64 / fs_neural * fs_audio).round() as usize;
    Ok(Recording {
        channel_labels: (0..neural.nrows()).map(|i| format!("ch{i}")).collect(),
        neural,
        fs_neural,
        audio: vec![0; n_audio],
        fs_audio,
        session_id: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
    })
}

fn inputs(pairs: &[(&str, &Path)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, p)| (k.to_string(), p.display().to_string())).collect()
}

fn split_span(prep: &Prepared, split: &str) -> CliResult<Span> {
    match split {
        "train" => Ok(prep.split.train),
        "val" => Ok(prep.split.val),
        "test" => Ok(prep.split.test),
        other => Err(CliError::Usage(format!("unknown split `{other}`"))),
    }
}

fn per_bin_csv(r: &EvalReport) -> String {
    let mut s = String::from("bin,r\n");
    for (i, v) in r.per_bin_r.iter().enumerate() {
        let _ = writeln!(s, "{i},{}", v.map_or("NA".into(), |v| format!("{v:.6}")));
    }
    s
}

pub fn synth_data(rc: &RunConfig, out_dir: &Path) -> CliResult<PathBuf> {
    let mut dir = RunDir::create(out_dir, "synth-data", rc, &BTreeMap::new())?;
    let s = generate(&rc.synth)?;
    let manifest = save_recording(&s.recording, &dir.path.join("data"), "synthetic", Vec::new())?;
    for f in ["data/neural.sgv", "data/audio.wav", "data/manifest.json"] {
        dir.file(f)?;
    }
    dir.write_json("synth.json", &json!({ "config": rc.synth, "mixing": s.mixing }))?;
    dir.set("parameter_counts", parameter_accounting(rc, s.recording.n_channels())?);
    dir.set("recording", json!(manifest));
    dir.finish()
}

pub fn preprocess(rc: &RunConfig, manifest: &Path, out_dir: &Path) -> CliResult<PathBuf> {
    let rec = load_input(manifest)?;
    let mut dir = RunDir::create(out_dir, "preprocess", rc, &inputs(&[("manifest", manifest)]))?;
    let prep = prepare(&rec, &rc.experiment.mel)?;
    write_sgv(&dir.file("features.sgv")?, &prep.features.data, prep.features.fs)?;
    write_sgv(&dir.file("mel.sgv")?, &prep.mel.data, 1000.0 / prep.mel.frame_shift_ms)?;
    dir.write_json("split.json", &prep.split)?;
    dir.write_json("standardizer.json", &prep.standardizer)?;
    dir.set("parameter_counts", parameter_accounting(rc, rec.n_channels())?);
    dir.finish()
}

pub fn train(rc: &RunConfig, manifest: &Path, out_dir: &Path) -> CliResult<PathBuf> {
    let rec = load_input(manifest)?;
    let mut dir = RunDir::create(out_dir, "train", rc, &inputs(&[("manifest", manifest)]))?;
    dir.set("parameter_counts", parameter_accounting(rc, rec.n_channels())?);
    let prep = prepare(&rec, &rc.experiment.mel)?;
    let mut summary = String::from("seed,test_mse,test_r,val_r,epochs\n");
    for seed in rc.seeds() {
        let opts = RunOptions {
            arch: rc.arch,
            seed,
            train_fraction: 1.0,
            target_val_r: None,
        };
        let out = run(&prep, &rc.experiment, opts)?
            .ok_or_else(|| Error::InsufficientData("training split holds no window".into()))?;
        let sub = format!("seed-{seed}");
        dir.write_text(&format!("{sub}/metrics.csv"), &metrics_csv(&out.outcome.log))?;
        save_checkpoint(&dir.file(&format!("{sub}/checkpoint.nvck"))?, &out.outcome.best)?;
        dir.write_json(
            &format!("{sub}/report.json"),
            &json!({ "test": out.test, "val_r": out.val_r, "n_params": out.n_params, "arch": out.arch }),
        )?;
        dir.write_text(&format!("{sub}/per_bin_r.csv"), &per_bin_csv(&out.test))?;
        let _ = writeln!(
            summary,
            "{seed},{:.6},{},{},{}",
            out.test.mse,
            out.test.mean_r.map_or("NA".into(), |r| format!("{r:.6}")),
            out.val_r.map_or("NA".into(), |r| format!("{r:.6}")),
            out.outcome.log.len()
        );
        log::info!("seed {seed}: test mse {:.4}, r {:?}", out.test.mse, out.test.mean_r);
    }
    dir.write_text("summary.csv", &summary)?;
    dir.finish()
}

fn restore(checkpoint: &Path) -> CliResult<(crate::data_io::Checkpoint, ModelSpec)> {
    require(checkpoint)?;
    let ck = load_checkpoint(checkpoint)?;
    let spec = ModelSpec::from_checkpoint(&ck)?;
    Ok((ck, spec))
}

pub fn evaluate(rc: &RunConfig, checkpoint: &Path, manifest: &Path, split: &str, out_dir: &Path) -> CliResult<PathBuf> {
    let (ck, spec) = restore(checkpoint)?;
    let rec = load_input(manifest)?;
    let mut dir = RunDir::create(out_dir, "evaluate", rc, &inputs(&[("checkpoint", checkpoint), ("manifest", manifest)]))?;
    let prep = prepare(&rec, &spec.experiment.mel)?;
    let span = split_span(&prep, split)?;
    let (pred, truth, _) = predict_span(&prep, &spec, &ck, span)?;
    let report = EvalReport::new(&pred, &truth, spec.seed, &spec.experiment.hash())?;
    dir.write_json("report.json", &json!({ "split": split, "arch": spec.arch, "report": report }))?;
    dir.write_text("per_bin_r.csv", &per_bin_csv(&report))?;
    dir.set("model", serde_json::to_value(&spec).map_err(Error::from)?);
    dir.finish()
}

pub fn synthesize(rc: &RunConfig, checkpoint: &Path, input: &Path, out_name: &str, out_dir: &Path) -> CliResult<PathBuf> {
    let (ck, spec) = restore(checkpoint)?;
    let rec = load_input(input)?;
    let name = Path::new(out_name)
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("--out {out_name} is not a file name")))?
        .to_string_lossy()
        .into_owned();
    let mut dir = RunDir::create(out_dir, "synthesize", rc, &inputs(&[("checkpoint", checkpoint), ("input", input)]))?;
    let mel_cfg = &spec.experiment.mel;
    let prep = prepare(&rec, mel_cfg)?;
    let span = prep.split.test;
    let (pred, _, _) = predict_span(&prep, &spec, &ck, span)?;
    let mel = MelSpectrogram {
        data: pred,
        frame_shift_ms: mel_cfg.frame_shift_ms,
        origin_time: span.start,
    };
    write_sgv(&dir.file("predicted_mel.sgv")?, &mel.data, 1000.0 / mel.frame_shift_ms)?;
    let audio = griffin_lim(&mel, mel_cfg, rc.griffin_lim_iterations, rc.seed)?;
    write_wav(&dir.file(&name)?, &f32_to_pcm(&audio.audio), mel_cfg.sample_rate as u32)?;
    dir.set(
        "synthesis",
        json!({
            "split": "test",
            "frames": mel.n_frames(),
            "duration_s": audio.audio.len() as f64 / mel_cfg.sample_rate,
            "split_duration_s": span.len(),
            "spectral_convergence": audio.convergence.last(),
        }),
    );
    dir.finish()
}

pub fn ablate_padding(rc: &RunConfig, manifest: &Path, out_dir: &Path) -> CliResult<PathBuf> {
    let rec = load_input(manifest)?;
    let mut dir = RunDir::create(out_dir, "ablate-padding", rc, &inputs(&[("manifest", manifest)]))?;
    let prep = prepare(&rec, &rc.experiment.mel)?;
    let a = padding_ablation(&rc.paddings_ms, &rc.seeds(), |p, seed| {
        let mut cfg = rc.experiment.clone();
        cfg.window.context_ms = p;
        let out = run(&prep, &cfg, RunOptions { arch: rc.arch, seed, train_fraction: 1.0, target_val_r: None })?
            .ok_or_else(|| Error::InsufficientData("training split holds no window".into()))?;
        log::info!("padding {p} ms, seed {seed}: test mse {:.4}", out.test.mse);
        Ok((out.test.seed, out.test.mse))
    })?;
    dir.write_text("ablation.csv", &ablation_csv(&a))?;
    dir.write_json("ablation.json", &a)?;
    let pts: Vec<(f64, f64, f64)> = a.paddings_ms.iter().zip(&a.mse).map(|(&p, m)| (p, m.mean, m.sd)).collect();
    dir.write_text("ablation.svg", &line_plot_svg("Test MSE by context padding", "padding (ms)", "test MSE", &pts))?;
    dir.finish()
}

pub fn ablate_size(rc: &RunConfig, manifest: &Path, out_dir: &Path) -> CliResult<PathBuf> {
    let rec = load_input(manifest)?;
    let mut dir = RunDir::create(out_dir, "ablate-size", rc, &inputs(&[("manifest", manifest)]))?;
    let prep = prepare(&rec, &rc.experiment.mel)?;
    let curve = training_size_curve(&rc.fractions, &rc.seeds(), |f, seed| {
        let opts = RunOptions { arch: rc.arch, seed, train_fraction: f, target_val_r: None };
        match run(&prep, &rc.experiment, opts)? {
            None => Ok(None),
            Some(out) => {
                let r = out.val_r.ok_or_else(|| Error::Evaluation("validation correlation undefined".into()))?;
                log::info!("fraction {f}, seed {seed}: val r {r:.4}");
                Ok(Some((out.train_minutes, r)))
            }
        }
    })?;
    dir.write_text("size_curve.csv", &size_curve_csv(&curve))?;
    dir.write_json("size_curve.json", &curve)?;
    let pts: Vec<(f64, f64, f64)> = curve.points.iter().map(|p| (p.minutes, p.r.mean, p.r.sd)).collect();
    dir.write_text("size_curve.svg", &line_plot_svg("Validation r by training size", "minutes", "mean r", &pts))?;
    dir.finish()
}

pub fn lr_search(rc: &RunConfig, manifest: &Path, out_dir: &Path) -> CliResult<PathBuf> {
    let rec = load_input(manifest)?;
    let mut dir = RunDir::create(out_dir, "lr-search", rc, &inputs(&[("manifest", manifest)]))?;
    let prep = prepare(&rec, &rc.experiment.mel)?;
    let s = search_lr(&prep, &rc.experiment, rc.arch, rc.seed)?;
    let mut csv = String::from("lr,best_val_mse\n");
    for (lr, v) in &s.results {
        let _ = writeln!(csv, "{lr},{}", v.map_or("diverged".into(), |v| format!("{v:.6}")));
    }
    dir.write_text("lr_search.csv", &csv)?;
    dir.write_json("lr_search.json", &s)?;
    dir.finish()
}

pub fn contamination_check(rc: &RunConfig, manifest: &Path, out_dir: &Path) -> CliResult<PathBuf> {
    let rec = load_input(manifest)?;
    let mut dir = RunDir::create(out_dir, "contamination-check", rc, &inputs(&[("manifest", manifest)]))?;
    let r = contamination_test(&rec, &rc.contamination)?;
    dir.write_json("contamination.json", &r)?;
    let n = r.matrix.len();
    let m = Array2::from_shape_fn((n, n), |(i, j)| r.matrix[i][j] as f32);
    let title = format!("Channel {} vs audio, p = {:.4}", rec.channel_labels[r.channel], r.p_value);
    dir.write_text("contamination.svg", &heatmap_svg(&title, "audio bin", "neural bin", &m))?;
    dir.set("verdict", json!({ "p_value": r.p_value, "contaminated_at_0.01": r.contaminated(0.01) }));
    dir.finish()
}

pub fn attention_plot(rc: &RunConfig, checkpoint: &Path, manifest: &Path, split: &str, out_dir: &Path) -> CliResult<PathBuf> {
    let (ck, spec) = restore(checkpoint)?;
    if spec.arch != Arch::Seq2Seq {
        return Err(CliError::Runtime(Error::Evaluation(
            "attention-plot needs a seq2seq checkpoint".into(),
        )));
    }
    let rec = load_input(manifest)?;
    let mut dir = RunDir::create(out_dir, "attention-plot", rc, &inputs(&[("checkpoint", checkpoint), ("manifest", manifest)]))?;
    let prep = prepare(&rec, &spec.experiment.mel)?;
    let span = split_span(&prep, split)?;
    let (_, _, att) = predict_span(&prep, &spec, &ck, span)?;
    let first = att.first().ok_or_else(|| Error::InsufficientData("no window in split".into()))?;
    let mut mean = Array2::<f32>::zeros(first.dim());
    let mut worst: f64 = 0.0;
    for a in &att {
        mean += a;
        worst = worst.max(attention_stats(a).max_row_error);
    }
    mean /= att.len() as f32;
    let stats = attention_stats(&mean);
    dir.write_json(
        "attention.json",
        &json!({ "split": split, "windows": att.len(), "max_row_error": worst, "mean": stats }),
    )?;
    dir.write_text("attention.svg", &heatmap_svg("Mean attention", "encoder step", "decoder step", &mean))?;
    dir.finish()
}
