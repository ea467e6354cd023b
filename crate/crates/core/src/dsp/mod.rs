//! Neural feature extraction: anti-alias resampling to 1024 Hz, a causal
//! 70–170 Hz band-pass, elliptic notches at 100 and 150 Hz and the Hilbert
//! envelope.

pub mod filter;
pub mod hilbert;
pub mod resample;

pub use filter::{BandKind, Biquad, Design, FilterSpec, Sos, Zpk};
pub use resample::PolyphaseResampler;

use crate::data_io::Recording;
use crate::error::{Error, Result};
use ndarray::{Array2, Axis};
use rayon::prelude::*;

/// Rate consumed by every model.
pub const FEATURE_FS: f64 = 1024.0;
pub const HIGH_GAMMA: (f64, f64) = (70.0, 170.0);
pub const LINE_HARMONICS: [f64; 2] = [100.0, 150.0];
/// Half-width of each notch's rejected band.
pub const NOTCH_HALF_WIDTH_HZ: f64 = 3.0;
pub const FILTER_ORDER: usize = 8;
pub const NOTCH_RIPPLE_DB: f64 = 0.1;
pub const NOTCH_ATTENUATION_DB: f64 = 40.0;

/// Channels-by-samples matrix at a known rate.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub data: Array2<f32>,
    pub fs: f64,
    pub origin_time: f64,
}

impl FeatureSequence {
    pub fn n_channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.fs
    }

    fn map_rows<F>(&self, f: F) -> Result<FeatureSequence>
    where
        F: Fn(&[f32]) -> Vec<f32> + Sync,
    {
        let inputs: Vec<Vec<f32>> = self.data.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
        let rows: Vec<Vec<f32>> = inputs.par_iter().map(|r| f(r)).collect();
        let n = rows.first().map_or(0, Vec::len);
        let flat: Vec<f32> = rows.into_iter().flatten().collect();
        Ok(FeatureSequence {
            data: Array2::from_shape_vec((self.n_channels(), n), flat)
                .map_err(|e| Error::Graph(e.to_string()))?,
            fs: self.fs,
            origin_time: self.origin_time,
        })
    }
}

/// Anti-aliased integer or rational downsampling of every channel.
pub fn resample_neural(x: &FeatureSequence, fs_out: f64) -> Result<FeatureSequence> {
    if fs_out > x.fs {
        return Err(Error::Unsupported(format!("upsampling {} Hz to {fs_out} Hz", x.fs)));
    }
    if fs_out == x.fs {
        return Ok(x.clone());
    }
    let (up, down) = rational(fs_out, x.fs)?;
    let r = neural_resampler(up, down);
    let mut out = x.map_rows(|row| r.process(row))?;
    let want = (x.n_samples() as f64 * fs_out / x.fs).round() as usize;
    if out.n_samples() != want {
        out.data = out.data.slice(ndarray::s![.., ..want]).to_owned();
    }
    out.fs = fs_out;
    Ok(out)
}

/// Anti-alias filter used for neural downsampling.
pub fn neural_resampler(up: usize, down: usize) -> PolyphaseResampler {
    PolyphaseResampler::new(up, down, 16, 8.6, 1.0)
}

fn rational(num: f64, den: f64) -> Result<(usize, usize)> {
    let (a, b) = (num.round() as usize, den.round() as usize);
    if a as f64 != num || b as f64 != den || a == 0 {
        return Err(Error::Unsupported(format!("non-integer rate ratio {num}/{den}")));
    }
    Ok((a, b))
}

pub fn highgamma_spec() -> FilterSpec {
    FilterSpec {
        kind: BandKind::Bandpass,
        order: FILTER_ORDER,
        band: HIGH_GAMMA,
        design: Design::Butterworth,
    }
}

pub fn notch_spec(center: f64) -> FilterSpec {
    FilterSpec {
        kind: BandKind::Bandstop,
        order: FILTER_ORDER,
        band: (center - NOTCH_HALF_WIDTH_HZ, center + NOTCH_HALF_WIDTH_HZ),
        design: Design::Elliptic {
            ripple_db: NOTCH_RIPPLE_DB,
            attenuation_db: NOTCH_ATTENUATION_DB,
        },
    }
}

fn check_rate(fs: f64) -> Result<()> {
    if fs < 512.0 {
        return Err(Error::Unsupported(format!("filtering needs fs >= 512 Hz, got {fs}")));
    }
    Ok(())
}

pub fn bandpass_highgamma(x: &FeatureSequence) -> Result<FeatureSequence> {
    check_rate(x.fs)?;
    let sos = filter::design(&highgamma_spec(), x.fs)?;
    x.map_rows(|r| sos.filter(r))
}

/// Cascade of both line-noise notches.
pub fn notch_filters(fs: f64) -> Result<Vec<Sos>> {
    check_rate(fs)?;
    LINE_HARMONICS.iter().map(|&c| filter::design(&notch_spec(c), fs)).collect()
}

pub fn notch_line_noise(x: &FeatureSequence) -> Result<FeatureSequence> {
    let notches = notch_filters(x.fs)?;
    x.map_rows(|r| {
        let mut y = r.to_vec();
        for n in &notches {
            y = n.filter(&y);
        }
        y
    })
}

pub fn hilbert_envelope(x: &FeatureSequence) -> Result<FeatureSequence> {
    x.map_rows(hilbert::envelope)
}

/// Resample, band-pass, notch and envelope, in that order.
pub fn extract_features(rec: &Recording) -> Result<FeatureSequence> {
    let raw = FeatureSequence {
        data: rec.neural.clone(),
        fs: rec.fs_neural,
        origin_time: 0.0,
    };
    let x = resample_neural(&raw, FEATURE_FS)?;
    let x = bandpass_highgamma(&x)?;
    let x = notch_line_noise(&x)?;
    hilbert_envelope(&x)
}
