use ndarray::Array2;
use neurovox_core::audio::MelSpectrogram;
use neurovox_core::data_io::Span;
use neurovox_core::dsp::FeatureSequence;
use neurovox_core::windowing::*;
use proptest::prelude::*;

fn data(secs: f64) -> (FeatureSequence, MelSpectrogram) {
    let n = (secs * 1024.0).round() as usize;
    let frames = (secs * 80.0).round() as usize;
    let features = FeatureSequence {
        data: Array2::from_shape_fn((3, n), |(c, i)| 1.0 + c as f32 + i as f32 * 1e-3),
        fs: 1024.0,
        origin_time: 0.0,
    };
    let mel = MelSpectrogram {
        data: Array2::from_shape_fn((80, frames), |(m, k)| (m * 100000 + k) as f32),
        frame_shift_ms: 12.5,
        origin_time: 0.0,
    };
    (features, mel)
}

/// Number of windows by direct enumeration of start times.
fn count_windows(len_s: f64, hop_s: f64) -> usize {
    let mut k = 0;
    while k as f64 * hop_s + 0.4 <= len_s + 1e-9 {
        k += 1;
    }
    k
}

#[test]
fn pair_dimensions_follow_context() {
    let mut cfg = WindowConfig::default();
    assert_eq!(pair_dimensions(&cfg), (1229, 32));
    cfg.context_ms = 0.0;
    assert_eq!(pair_dimensions(&cfg), (410, 32));
    cfg.context_ms = 200.0;
    assert_eq!(pair_dimensions(&cfg), (819, 32));
}

#[test]
fn pair_counts_for_train_and_eval_hops() {
    let (f, m) = data(200.0);
    let cfg = WindowConfig::default();
    let train = PairSet::new(&f, &m, &cfg, Span::new(5.0, 15.0), cfg.hop_train_ms).unwrap();
    assert_eq!(train.len(), count_windows(10.0, 0.025));
    assert_eq!(train.len(), 385);
    let eval = PairSet::new(&f, &m, &cfg, Span::new(100.0, 190.0), cfg.hop_eval_ms).unwrap();
    assert_eq!(eval.len(), 225);
    assert!(PairSet::new(&f, &m, &cfg, Span::new(1.0, 1.3), 25.0).unwrap().is_empty());
}

#[test]
fn eval_targets_concatenate_to_the_split_spectrogram() {
    let (f, m) = data(200.0);
    let cfg = WindowConfig::default();
    let split = Span::new(110.0, 200.0);
    let pairs = make_pairs(&f, &m, &cfg, split, cfg.hop_eval_ms).unwrap();
    let cols: Vec<f32> = (0..80)
        .flat_map(|r| pairs.iter().flat_map(move |p| p.y.row(r).to_vec()))
        .collect();
    let expect = m.frames(8800, 7200);
    assert_eq!(cols.len(), expect.data.len());
    let got = Array2::from_shape_vec((80, 7200), cols).unwrap();
    assert_eq!(got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), expect.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn boundary_windows_are_zero_padded() {
    let (f, m) = data(200.0);
    let cfg = WindowConfig::default();
    let pairs = PairSet::new(&f, &m, &cfg, Span::new(0.0, 10.0), 25.0).unwrap();
    let p = pairs.get(0);
    assert_eq!(p.t0, 0.0);
    let ctx = 410;
    assert!(p.x.columns().into_iter().take(ctx).all(|c| c.iter().all(|&v| v == 0.0)));
    assert!(p.x.column(ctx).iter().all(|&v| v != 0.0));
    let tail = PairSet::new(&f, &m, &cfg, Span::new(190.0, 200.0), 400.0).unwrap();
    let last = tail.get(tail.len() - 1);
    assert!(last.x.columns().into_iter().skip(1229 - ctx).all(|c| c.iter().all(|&v| v == 0.0)));
}

#[test]
fn train_windows_overlap_by_375_ms() {
    let (f, m) = data(30.0);
    let cfg = WindowConfig::default();
    let ps = PairSet::new(&f, &m, &cfg, Span::new(0.0, 30.0), 25.0).unwrap();
    let (a, b) = (ps.get(3), ps.get(4));
    assert!((b.t0 - a.t0 - 0.025).abs() < 1e-12);
    // 30 of 32 frames shared = 375 ms.
    for r in 0..80 {
        assert_eq!(a.y.row(r).slice(ndarray::s![2..]), b.y.row(r).slice(ndarray::s![..30]));
    }
}

#[test]
fn batches_stack_examples_in_order() {
    let (f, m) = data(20.0);
    let cfg = WindowConfig::default();
    let ps = PairSet::new(&f, &m, &cfg, Span::new(0.0, 20.0), 400.0).unwrap();
    let (x, y) = ps.batch::<f32>(&[2, 0]);
    assert_eq!(x.shape(), &[2, 3, 1229]);
    assert_eq!(y.shape(), &[2, 80, 32]);
    assert_eq!(&x.data()[..3 * 1229], ps.get(2).x.as_slice().unwrap());
    assert_eq!(&y.data()[80 * 32..], ps.get(0).y.as_slice().unwrap());
}

#[test]
fn standardizer_uses_only_the_fit_span() {
    let (f, _) = data(20.0);
    let s = Standardizer::fit(&f, Span::new(0.0, 10.0)).unwrap();
    let g = s.apply(&f);
    let n = 10 * 1024;
    let mean: f32 = g.data.row(1).iter().take(n).sum::<f32>() / n as f32;
    assert!(mean.abs() < 1e-3);
    assert!(g.data.row(1)[n + 100] > 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn counts_match_enumeration_and_pairs_are_chronological(start_f in 0usize..400, len_f in 0usize..1200, hop_frames in 1usize..40) {
        let (f, m) = data(30.0);
        let cfg = WindowConfig::default();
        let start = start_f as f64 * 0.0125;
        let end = (start + len_f as f64 * 0.0125).min(30.0);
        let hop = hop_frames as f64 * 12.5;
        let ps = PairSet::new(&f, &m, &cfg, Span::new(start, end), hop).unwrap();
        prop_assert_eq!(ps.len(), count_windows(end - start, hop / 1000.0));
        for i in 1..ps.len() {
            prop_assert!(ps.t0(i) > ps.t0(i - 1));
        }
        for i in 0..ps.len() {
            prop_assert!(ps.t0(i) >= start - 1e-9 && ps.t0(i) + 0.4 <= end + 1e-9);
        }
    }
}
