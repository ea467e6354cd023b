use neurovox_core::audio::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

fn tone(freq: f64, fs: f64, n: usize) -> Vec<f32> {
    (0..n).map(|i| (0.5 * (2.0 * PI * freq * i as f64 / fs).sin()) as f32).collect()
}

fn noise(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Gliding harmonic complex with a syllabic amplitude envelope.
fn speech_like(fs: f64, secs: f64) -> Vec<f32> {
    let n = (fs * secs) as usize;
    let mut phase = 0.0;
    (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            let f0 = 120.0 + 60.0 * t / secs;
            phase += 2.0 * PI * f0 / fs;
            let env = 0.5 * (1.0 - (2.0 * PI * 4.0 * t).cos());
            let s: f64 = (1..=30)
                .map(|h| {
                    let fh = h as f64 * f0;
                    let formant = (-((fh - 700.0) / 300.0).powi(2)).exp() + 0.5 * (-((fh - 1800.0) / 400.0).powi(2)).exp();
                    (0.05 + formant) / h as f64 * (h as f64 * phase).sin()
                })
                .sum();
            (0.3 * env * s) as f32
        })
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn resampling_rate_dc_and_tone_purity() {
    let y = resample_audio(&vec![0.25; 48000], 48000.0).unwrap();
    assert!((y.len() as i64 - 22050).abs() <= 1);
    for &v in &y[2000..20000] {
        assert!((v - 0.25).abs() < 1e-4, "{v}");
    }
    assert!(resample_audio(&[0.0; 10], 44100.0).is_err());

    let y = resample_audio(&tone(1000.0, 48000.0, 96000), 48000.0).unwrap();
    let seg = &y[4096..4096 + 32768];
    // Least-squares fit of the 1 kHz component; the residual is THD+N.
    let (mut cc, mut ss, mut cs, mut xc, mut xs) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, &v) in seg.iter().enumerate() {
        let w = 2.0 * PI * 1000.0 * (i + 4096) as f64 / AUDIO_FS;
        let (c, s) = (w.cos(), w.sin());
        cc += c * c;
        ss += s * s;
        cs += c * s;
        xc += v as f64 * c;
        xs += v as f64 * s;
    }
    let det = cc * ss - cs * cs;
    let (a, b) = ((xc * ss - xs * cs) / det, (xs * cc - xc * cs) / det);
    let mut resid = 0.0;
    let mut sig = 0.0;
    for (i, &v) in seg.iter().enumerate() {
        let w = 2.0 * PI * 1000.0 * (i + 4096) as f64 / AUDIO_FS;
        let fit = a * w.cos() + b * w.sin();
        resid += (v as f64 - fit).powi(2);
        sig += fit * fit;
    }
    let thdn_db = 10.0 * (resid / sig).log10();
    assert!(thdn_db < -60.0, "THD+N {thdn_db} dB");

    let mut planner = rustfft::FftPlanner::<f64>::new();
    let n = 32768;
    let fft = planner.plan_fft_forward(n);
    let mut buf: Vec<num_complex::Complex64> = seg.iter().map(|&v| num_complex::Complex64::new(v as f64, 0.0)).collect();
    fft.process(&mut buf);
    let peak = (0..n / 2).max_by(|&i, &j| buf[i].norm().total_cmp(&buf[j].norm())).unwrap();
    let expected = 1000.0 / AUDIO_FS * n as f64;
    assert!((peak as f64 - expected).abs() <= 1.0, "{peak} vs {expected}");
}

#[test]
fn frame_counts_and_silence() {
    let cfg = MelConfig::default();
    let m = mel_spectrogram(&vec![0.0; 8820], &cfg).unwrap();
    assert_eq!(m.data.dim(), (80, 32));
    assert!(m.data.iter().all(|&v| v == cfg.log_floor()));
    assert_eq!(mel_spectrogram(&[], &cfg).unwrap().n_frames(), 0);
    assert_eq!(cfg.n_frames(22050), 80);
    assert_eq!(cfg.n_frames(22050 * 90), 7200);
}

#[test]
fn tone_peaks_in_the_nearest_mel_band() {
    let cfg = MelConfig::default();
    let centers = mel_centers(&cfg);
    for f in [440.0, 1000.0, 3000.0] {
        let m = mel_spectrogram(&tone(f, AUDIO_FS, 11025), &cfg).unwrap();
        let nearest = (0..80).min_by(|&a, &b| (centers[a] - f).abs().total_cmp(&(centers[b] - f).abs())).unwrap();
        for k in 4..m.n_frames() - 4 {
            let col = m.data.column(k);
            let arg = (0..80).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
            assert_eq!(arg, nearest, "{f} Hz frame {k}");
        }
    }
}

#[test]
fn filterbank_rows_non_negative_and_cover_band() {
    let cfg = MelConfig::default();
    let fb = mel_filterbank(&cfg);
    assert!(fb.iter().all(|&w| w >= 0.0));
    for b in 0..fb.ncols() {
        let f = b as f64 * cfg.sample_rate / cfg.fft_size as f64;
        if f > 0.0 && f < 8000.0 {
            assert!(fb.column(b).sum() > 0.0, "bin {b} ({f} Hz) uncovered");
        }
    }
    // Slaney scale anchors.
    assert!((hz_to_mel(1000.0) - 15.0).abs() < 1e-12);
    assert!((mel_to_hz(hz_to_mel(5123.0)) - 5123.0).abs() < 1e-9);
}

#[test]
fn voice_activity_fractions() {
    let fs = AUDIO_FS;
    assert_eq!(voice_activity(&vec![0.0; 22050], fs, 1e-6).unwrap(), 0.0);
    assert_eq!(voice_activity(&noise(22050, 1), fs, 1e-6).unwrap(), 1.0);
    let mut half = noise(22050, 2);
    half[11025..].iter_mut().for_each(|v| *v = 0.0);
    let frac = voice_activity(&half, fs, 1e-6).unwrap();
    let frames = 80.0;
    assert!((frac - 0.5).abs() <= 1.0 / frames + 1e-12, "{frac}");
    assert!(voice_activity(&half, fs, 0.0).is_err());
}

#[test]
fn griffin_lim_silence_and_round_trip() {
    let cfg = MelConfig::default();
    let silent = mel_spectrogram(&vec![0.0; 22050], &cfg).unwrap();
    let out = griffin_lim(&silent, &cfg, 5, 0).unwrap();
    let rms = (out.audio.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / out.audio.len() as f64).sqrt();
    assert!(rms < 1e-3, "{rms}");
    assert!(griffin_lim(&silent, &cfg, 0, 0).is_err());

    let mel = mel_spectrogram(&speech_like(AUDIO_FS, 1.0), &cfg).unwrap();
    let rec = griffin_lim(&mel, &cfg, 60, 0).unwrap();
    assert_eq!(rec.convergence.len(), 60);
    let again = mel_spectrogram(&rec.audio, &cfg).unwrap();
    assert_eq!(again.data.dim(), mel.data.dim());
    let a: Vec<f64> = mel.data.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = again.data.iter().map(|&v| v as f64).collect();
    let r = pearson(&a, &b);
    assert!(r >= 0.9, "re-analysis r = {r}");
    for w in rec.convergence.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-9), "{} -> {}", w[0], w[1]);
    }
    for n in [1usize, 2, 4, 8, 16] {
        assert!(rec.convergence[2 * n - 1] <= rec.convergence[n - 1]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mel_is_bounded_below_and_finite(x in prop::collection::vec(-1e3f32..1e3, 0..3000)) {
        let cfg = MelConfig::default();
        let m = mel_spectrogram(&x, &cfg).unwrap();
        prop_assert_eq!(m.n_frames(), cfg.n_frames(x.len()));
        prop_assert!(m.data.iter().all(|v| v.is_finite() && *v >= cfg.log_floor()));
    }
}
