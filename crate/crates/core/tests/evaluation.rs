use ndarray::Array2;
use neurovox_core::evaluation::*;
use neurovox_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

fn random(rows: usize, cols: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
}

fn report(mse: f64, r: f64, seed: u64) -> EvalReport {
    EvalReport {
        mse,
        mean_r: Some(r),
        per_bin_r: vec![Some(r)],
        n_undefined: 0,
        n_frames: 10,
        seed,
        config_hash: "abc".into(),
    }
}

#[test]
fn identical_prediction_has_unit_correlation() {
    let t = random(80, 200, 1);
    let c = pearson_per_bin(&t, &t).unwrap();
    assert!((c.mean.unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(c.n_undefined, 0);
    assert_eq!(mse(&t, &t).unwrap(), 0.0);
}

#[test]
fn negated_prediction_has_minus_one() {
    let t = random(80, 200, 2);
    let c = pearson_per_bin(&t.mapv(|v| 3.0 - v), &t).unwrap();
    for r in c.per_bin {
        assert!((r.unwrap() + 1.0).abs() < 1e-6);
    }
}

#[test]
fn equal_variance_noise_gives_attenuated_correlation() {
    // r = 1/sqrt(2) when the noise has the signal's variance.
    let t = random(80, 20_000, 3);
    let pred = &t + &random(80, 20_000, 4);
    let c = pearson_per_bin(&pred, &t).unwrap();
    for r in c.per_bin {
        assert!((r.unwrap() - 0.5f64.sqrt()).abs() < 0.05);
    }
}

#[test]
fn constant_bins_are_excluded_and_counted() {
    let mut t = random(4, 50, 5);
    t.row_mut(1).fill(-11.5);
    let c = pearson_per_bin(&t, &t).unwrap();
    assert_eq!(c.n_undefined, 1);
    assert_eq!(c.per_bin[1], None);
    assert!((c.mean.unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn shape_mismatch_and_short_series_rejected() {
    assert!(pearson_per_bin(&random(80, 10, 0), &random(80, 11, 0)).is_err());
    assert!(pearson_per_bin(&random(80, 1, 0), &random(80, 1, 0)).is_err());
}

#[test]
fn welch_separates_clearly_different_groups() {
    let t = welch_t_test(&[2.0, 2.1, 2.05, 1.95, 2.0], &[7.0, 8.0, 7.5, 6.9, 7.3]).unwrap();
    assert!(t.p.unwrap() < 0.001);
    assert!(t.t.unwrap() < 0.0);
    // Independent oracle: t and Welch-Satterthwaite df by hand.
    let (ma, mb) = (10.1 / 5.0, 36.7 / 5.0);
    let va = [2.0, 2.1, 2.05, 1.95, 2.0f64].iter().map(|v| (v - ma).powi(2)).sum::<f64>() / 4.0;
    let vb = [7.0, 8.0, 7.5, 6.9, 7.3f64].iter().map(|v| (v - mb).powi(2)).sum::<f64>() / 4.0;
    let se2 = va / 5.0 + vb / 5.0;
    assert!((t.t.unwrap() - (ma - mb) / se2.sqrt()).abs() < 1e-9);
    let df = se2 * se2 / ((va / 5.0).powi(2) / 4.0 + (vb / 5.0).powi(2) / 4.0);
    assert!((t.df.unwrap() - df).abs() < 1e-9);
}

#[test]
fn welch_p_matches_reference_value() {
    // scipy.stats.ttest_ind([1,2,3,4,5],[2,4,6,8,10],equal_var=False): p = 0.10753
    let t = welch_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 4.0, 6.0, 8.0, 10.0]).unwrap();
    assert!((t.p.unwrap() - 0.107531).abs() < 1e-5, "{:?}", t.p);
}

#[test]
fn identical_sets_give_p_one() {
    let a = [1.0, 1.5, 2.0];
    assert!((welch_t_test(&a, &a).unwrap().p.unwrap() - 1.0).abs() < 1e-12);
    let flat = welch_t_test(&[3.0, 3.0], &[3.0, 3.0]).unwrap();
    assert_eq!(flat.p, Some(1.0));
    assert!(flat.flag.is_some());
}

#[test]
fn welch_is_calibrated_under_the_null() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = Normal::new(5.0, 2.0).unwrap();
    let ps: Vec<f64> = (0..2000)
        .map(|_| {
            let a: Vec<f64> = (0..5).map(|_| n.sample(&mut rng)).collect();
            let b: Vec<f64> = (0..5).map(|_| n.sample(&mut rng)).collect();
            welch_t_test(&a, &b).unwrap().p.unwrap()
        })
        .collect();
    let below = |x: f64| ps.iter().filter(|&&p| p < x).count() as f64 / ps.len() as f64;
    // Welch is slightly conservative at small n, so allow a margin.
    assert!((below(0.05) - 0.05).abs() < 0.02, "{}", below(0.05));
    assert!((below(0.5) - 0.5).abs() < 0.05, "{}", below(0.5));
}

#[test]
fn paired_test_flags_zero_differences() {
    let a = [1.4, 1.5, 1.6];
    let t = paired_t_test(&a, &a).unwrap();
    assert_eq!(t.p, None);
    assert!(t.flag.unwrap().contains("zero"));
    assert!(paired_t_test(&a, &a[..2]).is_err());
}

#[test]
fn paired_test_matches_reference_value() {
    // scipy.stats.ttest_rel([1.61,1.70,1.55,1.66],[1.42,1.45,1.39,1.50]): t = 8.9567, p = 0.0029368
    let t = paired_t_test(&[1.61, 1.70, 1.55, 1.66], &[1.42, 1.45, 1.39, 1.50]).unwrap();
    let d = [0.19, 0.25, 0.16, 0.16f64];
    let md = d.iter().sum::<f64>() / 4.0;
    let sd = (d.iter().map(|v| (v - md).powi(2)).sum::<f64>() / 3.0).sqrt();
    assert!((t.t.unwrap() - md / (sd / 2.0)).abs() < 1e-9);
    assert_eq!(t.df, Some(3.0));
    assert!((t.p.unwrap() - 0.0029368).abs() < 1e-6, "{:?}", t.p);
}

#[test]
fn compare_models_needs_two_runs_per_side() {
    let a = [report(1.0, 0.5, 0)];
    let b = [report(2.0, 0.4, 0), report(2.1, 0.41, 1)];
    assert!(matches!(compare_models("a", &a, "b", &b), Err(Error::Evaluation(_))));
    let a = [report(1.0, 0.5, 0), report(1.1, 0.52, 1)];
    let c = compare_models("seq2seq", &a, "densenet", &b).unwrap();
    assert_eq!(c.mse.0.label, "seq2seq");
    assert!((c.r.0.mean - 0.51).abs() < 1e-12);
    let csv = comparison_csv(&c);
    assert!(csv.starts_with("model,mse_mean,mse_sd,r_mean,r_sd,runs\nseq2seq,"));
}

#[test]
fn padding_ablation_pairs_by_seed() {
    let a = padding_ablation(&[0.0, 200.0, 400.0], &[1, 2, 3], |p, s| Ok((s, 2.0 - p / 400.0 + 0.01 * s as f64 + 0.001 * (p * s as f64).sin()))).unwrap();
    assert_eq!(a.tests.len(), 2);
    assert_eq!(a.tests[0].0, 0.0);
    assert!(a.tests[0].1.p.unwrap() < 0.05);
    assert!(a.mse[0].mean > a.mse[2].mean);
    assert!(ablation_csv(&a).lines().count() == 4);

    let broken = padding_ablation(&[0.0, 400.0], &[1, 2], |_, s| Ok((s + 1, 1.0)));
    assert!(matches!(broken, Err(Error::Evaluation(_))));
}

#[test]
fn padding_against_itself_is_flagged() {
    let a = padding_ablation(&[0.0, 400.0], &[1, 2, 3], |_, s| Ok((s, 1.0 + s as f64))).unwrap();
    assert_eq!(a.tests[0].1.p, None);
    assert!(a.tests[0].1.flag.is_some());
}

#[test]
fn single_fraction_has_no_correlation() {
    let c = training_size_curve(&[1.0], &[0, 1], |f, _| Ok(Some((f * 10.0, 0.5)))).unwrap();
    assert_eq!(c.points.len(), 1);
    assert_eq!(c.correlation, None);
}

#[test]
fn size_curve_skips_empty_fractions_and_correlates() {
    let fr = [0.2, 0.4, 0.6, 0.8, 1.0];
    let c = training_size_curve(&fr, &[0, 1], |f, s| {
        Ok((f > 0.2).then(|| (f * 20.0, 0.3 + 0.5 * f + 0.01 * s as f64)))
    })
    .unwrap();
    assert_eq!(c.skipped, vec![0.2]);
    assert_eq!(c.points.len(), 4);
    assert!(c.correlation.unwrap() > 0.99);
    assert!(c.p.unwrap() < 0.01);
    assert!(training_size_curve(&[0.5, 0.2], &[0], |_, _| Ok(None)).is_err());
    assert!(size_curve_csv(&c).starts_with("fraction,minutes"));
}

#[test]
fn chance_accuracy_is_one_half() {
    let s = listening_chance_sim(20, 19, 2, 10_000, 0.5, 1).unwrap();
    assert!((s.mean - 0.5).abs() < 0.01);
    assert!(!s.above_chance);
    assert!(listening_chance_sim(20, 19, 2, 10_000, 0.9, 1).unwrap().above_chance);
}

#[test]
fn chance_threshold_tightens_with_more_trials() {
    let small = listening_chance_sim(10, 19, 2, 10_000, 0.5, 2).unwrap().threshold;
    let large = listening_chance_sim(100, 19, 2, 10_000, 0.5, 2).unwrap().threshold;
    assert!(large < small, "{large} vs {small}");
    assert!(listening_chance_sim(0, 19, 2, 10, 0.5, 0).is_err());
}

#[test]
fn attention_stats_find_diagonal_alignment() {
    let mut att = Array2::<f32>::zeros((6, 12));
    for i in 0..6 {
        att[[i, 2 * i]] = 0.75;
        att[[i, 2 * i + 1]] = 0.25;
    }
    let s = attention_stats(&att);
    assert!(s.max_row_error < 1e-6);
    assert!((s.alignment.unwrap() - 1.0).abs() < 1e-12);
    assert!((s.centroids[1] - 2.25).abs() < 1e-6);
}

#[test]
fn svg_output_is_well_formed() {
    let l = line_plot_svg("size", "minutes", "r", &[(1.0, 0.5, 0.1), (2.0, 0.6, 0.05)]);
    assert!(l.starts_with("<svg") && l.trim_end().ends_with("</svg>"));
    let h = heatmap_svg("attention", "encoder", "decoder", &random(4, 5, 0));
    assert!(h.contains("<rect"));
}

#[test]
fn report_serialises_round_trip() {
    let t = random(3, 40, 7);
    let p = &t + &random(3, 40, 8);
    let r = EvalReport::new(&p, &t, 7, "cafe").unwrap();
    let back: EvalReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back, r);
    assert_eq!(EvalReport::new(&p, &t, 7, "cafe").unwrap(), r);
}

proptest! {
    #[test]
    fn per_bin_r_is_affine_invariant(seed in 0u64..1000, scale in 0.01f32..100.0, shift in -50.0f32..50.0) {
        let t = random(5, 64, seed);
        let p = &t + &random(5, 64, seed + 1);
        let base = pearson_per_bin(&p, &t).unwrap();
        let moved = pearson_per_bin(&p.mapv(|v| v * scale + shift), &t).unwrap();
        for (a, b) in base.per_bin.iter().zip(&moved.per_bin) {
            prop_assert!((a.unwrap() - b.unwrap()).abs() < 1e-4);
        }
    }

    #[test]
    fn correlations_stay_in_range(seed in 0u64..1000) {
        let c = pearson_per_bin(&random(6, 30, seed), &random(6, 30, seed + 7)).unwrap();
        for r in c.per_bin.into_iter().flatten() {
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }
}
