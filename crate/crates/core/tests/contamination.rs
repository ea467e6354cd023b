use ndarray::Array2;
use neurovox_core::contamination::*;
use neurovox_core::data_io::{pcm_to_f32, Recording};
use neurovox_core::synthdata::{generate, SynthConfig};
use neurovox_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn speech(seconds: f64, channels: usize, seed: u64) -> Recording {
    generate(&SynthConfig {
        duration_s: seconds,
        n_channels: channels,
        seed,
        ..Default::default()
    })
    .unwrap()
    .recording
}

fn quick() -> ContaminationConfig {
    ContaminationConfig {
        n_permutations: 199,
        ..Default::default()
    }
}

#[test]
fn audio_against_itself_has_unit_diagonal() {
    let rec = speech(20.0, 1, 1);
    let x = pcm_to_f32(&rec.audio);
    let same = Recording {
        neural: Array2::from_shape_vec((1, x.len()), x).unwrap(),
        fs_neural: rec.fs_audio,
        channel_labels: vec!["copy".into()],
        ..rec
    };
    let r = contamination_test(&same, &quick()).unwrap();
    for (i, row) in r.matrix.iter().enumerate() {
        assert!((row[i] - 1.0).abs() < 1e-9, "bin {i}: {}", row[i]);
        assert!(row.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    assert!((r.statistic - 1.0).abs() < 1e-9);
    assert!(r.p_value < 0.01);
}

#[test]
fn injected_copy_is_detected() {
    let rec = speech(60.0, 4, 2);
    let dirty = inject_audio(&rec, 2, 0.0).unwrap();
    let r = contamination_test(&dirty, &quick()).unwrap();
    assert_eq!(r.channel, 2);
    assert!(r.p_value < 0.01, "p = {}", r.p_value);
    assert!(r.method.contains("not an exact replication"));
}

#[test]
fn statistic_ignores_global_scaling() {
    let rec = speech(30.0, 2, 3);
    let base = contamination_test(&rec, &quick()).unwrap();
    let mut scaled = rec.clone();
    scaled.neural.mapv_inplace(|v| v * 7.5);
    scaled.audio.iter_mut().for_each(|s| *s /= 2);
    let s = contamination_test(&scaled, &quick()).unwrap();
    assert!((base.statistic - s.statistic).abs() < 1e-3, "{} vs {}", base.statistic, s.statistic);
}

#[test]
fn same_seed_same_report() {
    let rec = speech(30.0, 2, 4);
    let a = contamination_test(&rec, &quick()).unwrap();
    let b = contamination_test(&rec, &quick()).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a.p_value));
}

#[test]
fn independent_noise_gives_spread_out_p_values() {
    let mut ps = Vec::new();
    for trial in 0..20u64 {
        let rec = speech(30.0, 1, 100 + trial);
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let noise: Vec<f32> = (0..rec.neural.ncols()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let rec = Recording {
            neural: Array2::from_shape_vec((1, noise.len()), noise).unwrap(),
            ..rec
        };
        let cfg = ContaminationConfig { seed: trial, ..quick() };
        ps.push(contamination_test(&rec, &cfg).unwrap().p_value);
    }
    let mean = ps.iter().sum::<f64>() / ps.len() as f64;
    assert!((0.25..=0.75).contains(&mean), "mean p {mean}: {ps:?}");
    assert!(ps.iter().filter(|&&p| p < 0.01).count() <= 2);
}

#[test]
fn duration_mismatch_is_an_alignment_error() {
    let mut rec = speech(10.0, 1, 5);
    rec.audio.truncate(rec.audio.len() - 4800);
    assert!(matches!(contamination_test(&rec, &quick()), Err(Error::Alignment(_))));
}

#[test]
fn too_few_permutations_rejected() {
    let rec = speech(10.0, 1, 6);
    let cfg = ContaminationConfig {
        n_permutations: 99,
        ..Default::default()
    };
    assert!(matches!(contamination_test(&rec, &cfg), Err(Error::Config(_))));
}
