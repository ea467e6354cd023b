//! On-disk formats: SGV1 neural matrices, 16-bit WAV audio, JSON session
//! manifests, chronological splits and binary checkpoints.
//!
//! SGV1 layout (little-endian): `b"SGV1"`, `u32` channels, `f64` sample
//! rate, `u64` samples per channel, then the channel-major `f32` payload.

use crate::engine::{Buffers, ModelParams, Tensor};
use crate::error::{Error, Result};
use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

const SGV_MAGIC: &[u8; 4] = b"SGV1";
const CKPT_MAGIC: &[u8; 4] = b"NVCK";
const CKPT_VERSION: u32 = 1;

/// Length of the validation and of the test span.
pub const EVAL_SPAN_S: f64 = 90.0;
/// Shortest admissible training span.
pub const MIN_TRAIN_S: f64 = 1.0;

/// Multichannel neural signal with synchronised audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    /// `[channels, samples]`
    pub neural: Array2<f32>,
    pub fs_neural: f64,
    /// 16-bit PCM samples.
    pub audio: Vec<i16>,
    pub fs_audio: f64,
    pub session_id: String,
    pub channel_labels: Vec<String>,
}

impl Recording {
    pub fn n_channels(&self) -> usize {
        self.neural.nrows()
    }

    pub fn duration_s(&self) -> f64 {
        self.neural.ncols() as f64 / self.fs_neural
    }

    /// Audio scaled to `[-1, 1)`.
    pub fn audio_f32(&self) -> Vec<f32> {
        pcm_to_f32(&self.audio)
    }

    /// Checks the structural invariants of an ingested recording.
    pub fn validate(&self) -> Result<()> {
        if self.n_channels() == 0 {
            return Err(Error::Format("recording has no channels".into()));
        }
        if self.fs_neural != 1024.0 && self.fs_neural != 2048.0 {
            return Err(Error::Format(format!("neural rate {} Hz not in {{1024, 2048}}", self.fs_neural)));
        }
        if self.channel_labels.len() != self.n_channels() {
            return Err(Error::Format(format!(
                "{} channel labels for {} channels",
                self.channel_labels.len(),
                self.n_channels()
            )));
        }
        let neural_s = self.duration_s();
        let audio_s = self.audio.len() as f64 / self.fs_audio;
        if (neural_s - audio_s).abs() > 1.0 / self.fs_neural + 1e-9 {
            return Err(Error::Format(format!(
                "neural spans {neural_s:.6} s but audio spans {audio_s:.6} s"
            )));
        }
        Ok(())
    }
}

pub fn pcm_to_f32(pcm: &[i16]) -> Vec<f32> {
    pcm.iter().map(|&s| s as f32 / 32768.0).collect()
}

/// Rounds and clips to 16-bit PCM.
pub fn f32_to_pcm(x: &[f32]) -> Vec<i16> {
    x.iter()
        .map(|&v| (v as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
        .collect()
}

// ---- SGV1 --------------------------------------------------------------

pub fn write_sgv(path: &Path, data: &Array2<f32>, fs: f64) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |b: &[u8]| w.write_all(b).map_err(|e| Error::io(path, e));
    put(SGV_MAGIC)?;
    put(&(data.nrows() as u32).to_le_bytes())?;
    put(&fs.to_le_bytes())?;
    put(&(data.ncols() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(data.len() * 4);
    for row in data.rows() {
        for &v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    put(&buf)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads an SGV1 file as `([channels, samples], fs)`.
pub fn read_sgv(path: &Path) -> Result<(Array2<f32>, f64)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_sgv(&bytes)
}

pub fn parse_sgv(bytes: &[u8]) -> Result<(Array2<f32>, f64)> {
    const HEADER: usize = 4 + 4 + 8 + 8;
    if bytes.len() < HEADER || &bytes[..4] != SGV_MAGIC {
        return Err(Error::Format("missing SGV1 header".into()));
    }
    let channels = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let fs = f64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let samples = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    if channels == 0 || !(fs.is_finite() && fs > 0.0) {
        return Err(Error::Format(format!("invalid header: {channels} channels at {fs} Hz")));
    }
    let payload = &bytes[HEADER..];
    let expected = channels.checked_mul(samples).and_then(|n| n.checked_mul(4));
    if expected != Some(payload.len()) {
        return Err(Error::Corruption(format!(
            "header declares {channels}x{samples} f32 values, payload holds {} bytes",
            payload.len()
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let data = Array2::from_shape_vec((channels, samples), values).expect("length checked");
    Ok((data, fs))
}

// ---- WAV ---------------------------------------------------------------

pub fn write_wav(path: &Path, pcm: &[i16], fs: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: fs,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in pcm {
        w.write_sample(s)?;
    }
    w.finalize()?;
    Ok(())
}

/// Reads mono 16-bit PCM; multichannel files are rejected.
pub fn read_wav(path: &Path) -> Result<(Vec<i16>, u32)> {
    let r = hound::WavReader::open(path)?;
    let spec = r.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format(format!(
            "{}: expected mono 16-bit PCM, found {} ch / {} bit",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    let samples = r.into_samples::<i16>().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((samples, spec.sample_rate))
}

// ---- manifest ----------------------------------------------------------

/// Named event time in seconds from recording start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    pub time_s: f64,
    pub label: String,
}

/// JSON session manifest; relative paths resolve against its directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub session_id: String,
    pub participant: String,
    pub neural_path: PathBuf,
    pub audio_path: PathBuf,
    pub fs_neural: f64,
    pub fs_audio: f64,
    pub channel_labels: Vec<String>,
    #[serde(default)]
    pub markers: Vec<Marker>,
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads the recording described by a manifest.
pub fn load_recording(manifest_path: &Path) -> Result<Recording> {
    let m = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let (neural, fs_neural) = read_sgv(&base.join(&m.neural_path))?;
    let (audio, fs_audio) = read_wav(&base.join(&m.audio_path))?;
    if fs_neural != m.fs_neural || fs_audio as f64 != m.fs_audio {
        return Err(Error::Format(format!(
            "manifest rates ({}, {}) disagree with files ({fs_neural}, {fs_audio})",
            m.fs_neural, m.fs_audio
        )));
    }
    if m.channel_labels.len() != neural.nrows() {
        return Err(Error::Corruption(format!(
            "manifest lists {} channels, neural file holds {}",
            m.channel_labels.len(),
            neural.nrows()
        )));
    }
    Ok(Recording {
        neural,
        fs_neural,
        audio,
        fs_audio: fs_audio as f64,
        session_id: m.session_id,
        channel_labels: m.channel_labels,
    })
}

/// Writes `neural.sgv`, `audio.wav` and `manifest.json` into `dir` and
/// returns the manifest path.
pub fn save_recording(rec: &Recording, dir: &Path, participant: &str, markers: Vec<Marker>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_sgv(&dir.join("neural.sgv"), &rec.neural, rec.fs_neural)?;
    write_wav(&dir.join("audio.wav"), &rec.audio, rec.fs_audio as u32)?;
    let manifest = Manifest {
        session_id: rec.session_id.clone(),
        participant: participant.to_string(),
        neural_path: "neural.sgv".into(),
        audio_path: "audio.wav".into(),
        fs_neural: rec.fs_neural,
        fs_audio: rec.fs_audio,
        channel_labels: rec.channel_labels.clone(),
        markers,
    };
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

// ---- splits ------------------------------------------------------------

/// Half-open interval in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub start: f64,
    pub end: f64,
}

impl Span {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Span,
    pub val: Span,
    pub test: Span,
}

/// Test is the final 90 s, validation the 90 s before it, training the rest.
pub fn split_for_duration(duration_s: f64) -> Result<SplitSpec> {
    let train_len = duration_s - 2.0 * EVAL_SPAN_S;
    if !(train_len >= MIN_TRAIN_S - 1e-9) {
        return Err(Error::InsufficientData(format!(
            "{duration_s:.3} s recording leaves {train_len:.3} s for training, need at least {MIN_TRAIN_S} s"
        )));
    }
    let test = Span::new(duration_s - EVAL_SPAN_S, duration_s);
    let val = Span::new(test.start - EVAL_SPAN_S, test.start);
    Ok(SplitSpec {
        train: Span::new(0.0, val.start),
        val,
        test,
    })
}

pub fn make_split(rec: &Recording) -> Result<SplitSpec> {
    split_for_duration(rec.duration_s())
}

// ---- checkpoints -------------------------------------------------------

/// Optimiser and schedule state persisted alongside the weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    /// Number of completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub base_lr: f64,
    pub best_val_mse: f64,
    pub adam_m: Buffers<f32>,
    pub adam_v: Buffers<f32>,
}

/// Everything needed to rebuild and resume a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Architecture configuration as JSON, echoed for auditing.
    pub config: serde_json::Value,
    pub params: ModelParams<f32>,
    pub buffers: Buffers<f32>,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    config: serde_json::Value,
    epoch: usize,
    step: u64,
    base_lr: f64,
    best_val_mse: f64,
    blobs: Vec<BlobEntry>,
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut blobs: Vec<(&str, &str, &Tensor<f32>)> = ck.params.iter().map(|(n, p)| ("param", n, &p.value)).collect();
    for (group, map) in [("buffer", &ck.buffers), ("adam_m", &ck.state.adam_m), ("adam_v", &ck.state.adam_v)] {
        blobs.extend(map.iter().map(|(n, t)| (group, n.as_str(), t)));
    }
    let header = CkptHeader {
        config: ck.config.clone(),
        epoch: ck.state.epoch,
        step: ck.state.step,
        base_lr: ck.state.base_lr,
        best_val_mse: ck.state.best_val_mse,
        blobs: blobs
            .iter()
            .map(|(group, name, t)| BlobEntry {
                group: group.to_string(),
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, _, t) in &blobs {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&out).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != CKPT_MAGIC {
        return Err(Error::Format(format!("{}: not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("checkpoint version {version} unsupported")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| Error::Corruption("truncated checkpoint header".into()))?;
    let header: CkptHeader = serde_json::from_slice(body)?;
    let mut payload = &bytes[16 + hlen..];
    let mut ck = Checkpoint {
        config: header.config,
        params: ModelParams::new(),
        buffers: IndexMap::new(),
        state: TrainState {
            epoch: header.epoch,
            step: header.step,
            base_lr: header.base_lr,
            best_val_mse: header.best_val_mse,
            ..Default::default()
        },
    };
    for e in header.blobs {
        let n: usize = e.shape.iter().product();
        if payload.len() < 4 * n {
            return Err(Error::Corruption(format!("blob {} truncated", e.name)));
        }
        let data = payload[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        payload = &payload[4 * n..];
        let t = Tensor::new(&e.shape, data)?;
        match e.group.as_str() {
            "param" => ck.params.insert(e.name, t)?,
            "buffer" => {
                ck.buffers.insert(e.name, t);
            }
            "adam_m" => {
                ck.state.adam_m.insert(e.name, t);
            }
            "adam_v" => {
                ck.state.adam_v.insert(e.name, t);
            }
            g => return Err(Error::Format(format!("unknown blob group {g}"))),
        }
    }
    if !payload.is_empty() {
        return Err(Error::Corruption(format!("{} trailing bytes", payload.len())));
    }
    Ok(ck)
}

impl Checkpoint {
    /// Fails unless names and shapes match `expected` exactly.
    pub fn check_compatible(&self, expected: &ModelParams<f32>) -> Result<()> {
        let have = self.params.signature();
        let want = expected.signature();
        if have == want {
            return Ok(());
        }
        let detail = want
            .iter()
            .zip(have.iter())
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("{} expects {:?}, checkpoint has {} {:?}", a.0, a.1, b.0, b.1))
            .unwrap_or_else(|| format!("{} parameters expected, checkpoint has {}", want.len(), have.len()));
        Err(Error::Incompatible(detail))
    }
}
