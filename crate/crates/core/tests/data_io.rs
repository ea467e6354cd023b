use ndarray::Array2;
use neurovox_core::data_io::*;
use neurovox_core::engine::{ModelParams, Tensor};
use neurovox_core::Error;
use proptest::prelude::*;

fn recording(channels: usize, samples: usize, fs: f64) -> Recording {
    let neural = Array2::from_shape_fn((channels, samples), |(c, i)| (c as f32 + 1.0) * (i as f32 * 0.01).sin());
    let audio_len = (samples as f64 / fs * 48000.0).round() as usize;
    Recording {
        neural,
        fs_neural: fs,
        audio: (0..audio_len).map(|i| ((i * 37) % 65536) as i32 as i16).collect(),
        fs_audio: 48000.0,
        session_id: "s01".into(),
        channel_labels: (0..channels).map(|c| format!("LA{c}")).collect(),
    }
}

#[test]
fn recording_round_trip_through_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let rec = recording(2, 1024, 1024.0);
    rec.validate().unwrap();
    let markers = vec![Marker { time_s: 0.25, label: "start".into() }];
    let path = save_recording(&rec, dir.path(), "P1", markers.clone()).unwrap();
    let back = load_recording(&path).unwrap();
    assert_eq!(back.neural.dim(), (2, 1024));
    assert_eq!(back, rec);
    assert_eq!(read_manifest(&path).unwrap().markers, markers);
}

#[test]
fn header_and_payload_errors() {
    let data = Array2::from_shape_fn((2, 16), |(c, i)| (c * 16 + i) as f32);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.sgv");
    write_sgv(&p, &data, 1024.0).unwrap();
    let mut bytes = std::fs::read(&p).unwrap();
    // Header claims 3 channels, payload holds 2·N.
    bytes[4..8].copy_from_slice(&3u32.to_le_bytes());
    assert!(matches!(parse_sgv(&bytes), Err(Error::Corruption(_))));
    bytes[0] = b'X';
    assert!(matches!(parse_sgv(&bytes), Err(Error::Format(_))));
    assert!(matches!(parse_sgv(b"SGV1"), Err(Error::Format(_))));
}

#[test]
fn splits_take_val_and_test_from_the_end() {
    let s = split_for_duration(17.0 * 60.0).unwrap();
    assert_eq!(s.train, Span::new(0.0, 14.0 * 60.0));
    assert_eq!(s.val.len(), 90.0);
    assert_eq!(s.test, Span::new(17.0 * 60.0 - 90.0, 17.0 * 60.0));
    assert_eq!(split_for_duration(181.0).unwrap().train.len(), 1.0);
    assert!(matches!(split_for_duration(120.0), Err(Error::InsufficientData(_))));
    assert!(split_for_duration(180.5).is_err());
}

fn model(hidden: usize) -> ModelParams<f32> {
    let mut p = ModelParams::new();
    p.insert("gru.w", Tensor::from_fn(&[4, hidden], |i| i as f32 * 0.5 - 1.0)).unwrap();
    p.insert("gru.b", Tensor::from_fn(&[hidden], |i| -(i as f32))).unwrap();
    p
}

fn checkpoint(hidden: usize, epoch: usize) -> Checkpoint {
    let params = model(hidden);
    let mut state = TrainState { epoch, step: 1234, base_lr: 5e-4, best_val_mse: 1.25, ..Default::default() };
    for (n, p) in params.iter() {
        state.adam_m.insert(n.into(), Tensor::from_fn(p.value.shape(), |i| 1e-3 * i as f32));
        state.adam_v.insert(n.into(), Tensor::from_fn(p.value.shape(), |i| 1e-7 * (i + 1) as f32));
    }
    let mut buffers = indexmap::IndexMap::new();
    buffers.insert("bn.running_mean".to_string(), Tensor::full(&[3], 0.1f32));
    Checkpoint { config: serde_json::json!({"hidden": hidden}), params, buffers, state }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.ckpt");
    let ck = checkpoint(5, 45);
    save_checkpoint(&p, &ck).unwrap();
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.state.epoch, 45);
    back.check_compatible(&model(5)).unwrap();
}

#[test]
fn checkpoint_shape_mismatch_is_incompatible() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.ckpt");
    save_checkpoint(&p, &checkpoint(333, 3)).unwrap();
    let back = load_checkpoint(&p).unwrap();
    let err = back.check_compatible(&model(300)).unwrap_err();
    assert!(matches!(err, Error::Incompatible(_)), "{err}");
    let mut bytes = std::fs::read(&p).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&p, bytes).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::Corruption(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sgv_round_trip_is_bitwise(c in 1usize..5, n in 0usize..64, bits in prop::collection::vec(any::<u32>(), 256)) {
        let data = Array2::from_shape_fn((c, n), |(i, j)| f32::from_bits(bits[(i * 64 + j) % 256]));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.sgv");
        write_sgv(&p, &data, 2048.0).unwrap();
        let (back, fs) = read_sgv(&p).unwrap();
        prop_assert_eq!(fs, 2048.0);
        prop_assert_eq!(back.dim(), data.dim());
        for (a, b) in back.iter().zip(data.iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn wav_round_trip_is_exact(pcm in prop::collection::vec(any::<i16>(), 0..500)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_wav(&p, &pcm, 48000).unwrap();
        prop_assert_eq!(read_wav(&p).unwrap(), (pcm, 48000));
    }

    #[test]
    fn split_spans_are_disjoint_and_cover(d in 181.0f64..5000.0) {
        let s = split_for_duration(d).unwrap();
        prop_assert!(!s.train.overlaps(&s.val) && !s.val.overlaps(&s.test) && !s.train.overlaps(&s.test));
        prop_assert!((s.train.len() + s.val.len() + s.test.len() - d).abs() < 1e-9);
        prop_assert_eq!(s.val.len(), 90.0);
        prop_assert!((s.test.len() - 90.0).abs() < 1e-9);
    }
}
