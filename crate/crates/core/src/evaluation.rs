//! Metrics, significance tests, ablation aggregation and report output.

use crate::error::{Error, Result};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::fmt::Write as _;

/// Per-bin Pearson correlations over time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinCorrelation {
    /// `None` where either side is constant over time.
    pub per_bin: Vec<Option<f64>>,
    /// Mean over the defined bins.
    pub mean: Option<f64>,
    pub n_undefined: usize,
}

/// Pearson correlation of two equal-length series; `None` when either is
/// constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Correlates each row (mel bin) of `pred` with the same row of `truth`
/// and averages the defined values.
pub fn pearson_per_bin(pred: &Array2<f32>, truth: &Array2<f32>) -> Result<BinCorrelation> {
    if pred.dim() != truth.dim() {
        return Err(Error::shape("pearson_per_bin", pred.shape(), truth.shape()));
    }
    if pred.ncols() < 2 {
        return Err(Error::Evaluation(format!("{} frames; correlation needs at least 2", pred.ncols())));
    }
    let per_bin: Vec<Option<f64>> = pred
        .rows()
        .into_iter()
        .zip(truth.rows())
        .map(|(p, t)| {
            let p: Vec<f64> = p.iter().map(|&v| v as f64).collect();
            let t: Vec<f64> = t.iter().map(|&v| v as f64).collect();
            pearson(&p, &t)
        })
        .collect();
    let defined: Vec<f64> = per_bin.iter().flatten().copied().collect();
    let n_undefined = per_bin.len() - defined.len();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(BinCorrelation {
        per_bin,
        mean,
        n_undefined,
    })
}

pub fn mse(pred: &Array2<f32>, truth: &Array2<f32>) -> Result<f64> {
    if pred.dim() != truth.dim() || pred.is_empty() {
        return Err(Error::shape("mse", pred.shape(), truth.shape()));
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| (p as f64 - t as f64).powi(2))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    pearson(&ranks(a), &ranks(b))
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = if x.len() > 1 {
        x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v.sqrt())
}

fn two_sided_p(t: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

/// Outcome of a two-sample or paired t-test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub mean_a: f64,
    pub sd_a: f64,
    pub mean_b: f64,
    pub sd_b: f64,
    pub t: Option<f64>,
    pub df: Option<f64>,
    /// Two-sided; `None` when the statistic is undefined.
    pub p: Option<f64>,
    /// Why the statistic is degenerate, when it is.
    pub flag: Option<String>,
}

/// Welch's unequal-variance two-sample t-test.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Evaluation(format!("t-test needs ≥ 2 runs per side, got {} and {}", a.len(), b.len())));
    }
    let (ma, sa) = mean_sd(a);
    let (mb, sb) = mean_sd(b);
    let (va, vb) = (sa * sa / a.len() as f64, sb * sb / b.len() as f64);
    let se2 = va + vb;
    let mut r = TTest {
        mean_a: ma,
        sd_a: sa,
        mean_b: mb,
        sd_b: sb,
        t: None,
        df: None,
        p: None,
        flag: None,
    };
    if se2 == 0.0 {
        if ma == mb {
            r.p = Some(1.0);
            r.flag = Some("zero variance, equal means".into());
        } else {
            r.p = Some(0.0);
            r.flag = Some("zero variance, different means".into());
        }
        return Ok(r);
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (va * va / (a.len() as f64 - 1.0) + vb * vb / (b.len() as f64 - 1.0));
    r.t = Some(t);
    r.df = Some(df);
    r.p = Some(two_sided_p(t, df));
    Ok(r)
}

/// Paired t-test on `a[i] - b[i]`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Evaluation(format!("paired test on {} vs {} runs", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Evaluation("paired test needs ≥ 2 pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (ma, sa) = mean_sd(a);
    let (mb, sb) = mean_sd(b);
    let (md, sd) = mean_sd(&d);
    let mut r = TTest {
        mean_a: ma,
        sd_a: sa,
        mean_b: mb,
        sd_b: sb,
        t: None,
        df: None,
        p: None,
        flag: None,
    };
    if sd == 0.0 {
        r.flag = Some(if md == 0.0 {
            "all differences are zero".into()
        } else {
            "constant non-zero difference".into()
        });
        return Ok(r);
    }
    let df = d.len() as f64 - 1.0;
    let t = md / (sd / (d.len() as f64).sqrt());
    r.t = Some(t);
    r.df = Some(df);
    r.p = Some(two_sided_p(t, df));
    Ok(r)
}

/// Per-run outcome on the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse: f64,
    pub mean_r: Option<f64>,
    pub per_bin_r: Vec<Option<f64>>,
    pub n_undefined: usize,
    pub n_frames: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl EvalReport {
    pub fn new(pred: &Array2<f32>, truth: &Array2<f32>, seed: u64, config_hash: &str) -> Result<Self> {
        let c = pearson_per_bin(pred, truth)?;
        Ok(Self {
            mse: mse(pred, truth)?,
            mean_r: c.mean,
            per_bin_r: c.per_bin,
            n_undefined: c.n_undefined,
            n_frames: pred.ncols(),
            seed,
            config_hash: config_hash.to_string(),
        })
    }
}

/// Mean/SD of a metric across runs of one condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub label: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

impl Summary {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Self {
        let (mean, sd) = mean_sd(&values);
        Self {
            label: label.into(),
            values,
            mean,
            sd,
        }
    }
}

/// Two architectures over the same seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub mse: (Summary, Summary),
    pub r: (Summary, Summary),
    pub mse_test: TTest,
    pub r_test: TTest,
}

pub fn compare_models(label_a: &str, a: &[EvalReport], label_b: &str, b: &[EvalReport]) -> Result<Comparison> {
    let m = |rs: &[EvalReport]| rs.iter().map(|r| r.mse).collect::<Vec<_>>();
    let c = |rs: &[EvalReport]| rs.iter().map(|r| r.mean_r.unwrap_or(f64::NAN)).collect::<Vec<_>>();
    if c(a).iter().chain(&c(b)).any(|v| v.is_nan()) {
        return Err(Error::Evaluation("a run has no defined correlation".into()));
    }
    Ok(Comparison {
        mse_test: welch_t_test(&m(a), &m(b))?,
        r_test: welch_t_test(&c(a), &c(b))?,
        mse: (Summary::new(label_a, m(a)), Summary::new(label_b, m(b))),
        r: (Summary::new(label_a, c(a)), Summary::new(label_b, c(b))),
    })
}

/// Table of mean ± SD per model.
pub fn comparison_csv(c: &Comparison) -> String {
    let mut s = String::from("model,mse_mean,mse_sd,r_mean,r_sd,runs\n");
    for (m, r) in [(&c.mse.0, &c.r.0), (&c.mse.1, &c.r.1)] {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6},{:.6},{}", m.label, m.mean, m.sd, r.mean, r.sd, m.values.len());
    }
    let p = |t: &TTest| t.p.map_or("NA".to_string(), |p| format!("{p:.3e}"));
    let _ = writeln!(s, "welch_p,{},,{},,", p(&c.mse_test), p(&c.r_test));
    s
}

/// Test MSE per padding with paired tests of every padding against the
/// reference (largest) padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaddingAblation {
    pub paddings_ms: Vec<f64>,
    pub seeds: Vec<u64>,
    pub mse: Vec<Summary>,
    /// `(padding, test against the reference)` for every other padding.
    pub tests: Vec<(f64, TTest)>,
}

/// Runs `run(padding, seed) -> test MSE` for every pair and aggregates.
pub fn padding_ablation<F>(paddings_ms: &[f64], seeds: &[u64], mut run: F) -> Result<PaddingAblation>
where
    F: FnMut(f64, u64) -> Result<(u64, f64)>,
{
    if paddings_ms.is_empty() || seeds.len() < 2 {
        return Err(Error::Evaluation("ablation needs paddings and ≥ 2 seeds".into()));
    }
    let mut mse = Vec::new();
    for &p in paddings_ms {
        let mut vals = Vec::new();
        for &s in seeds {
            let (used, v) = run(p, s)?;
            if used != s {
                return Err(Error::Evaluation(format!("run for seed {s} reported seed {used}; pairing broken")));
            }
            vals.push(v);
        }
        mse.push(Summary::new(format!("{p} ms"), vals));
    }
    let reference = paddings_ms
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("non-empty");
    let mut tests = Vec::new();
    for (i, &p) in paddings_ms.iter().enumerate() {
        if i != reference {
            tests.push((p, paired_t_test(&mse[i].values, &mse[reference].values)?));
        }
    }
    Ok(PaddingAblation {
        paddings_ms: paddings_ms.to_vec(),
        seeds: seeds.to_vec(),
        mse,
        tests,
    })
}

pub fn ablation_csv(a: &PaddingAblation) -> String {
    let mut s = String::from("padding_ms,mse_mean,mse_sd,paired_t,paired_p\n");
    for (p, m) in a.paddings_ms.iter().zip(&a.mse) {
        let t = a.tests.iter().find(|(q, _)| q == p).map(|(_, t)| t);
        let ts = t.and_then(|t| t.t).map_or(String::new(), |v| format!("{v:.4}"));
        let ps = t.and_then(|t| t.p).map_or(String::new(), |v| format!("{v:.3e}"));
        let _ = writeln!(s, "{p},{:.6},{:.6},{ts},{ps}", m.mean, m.sd);
    }
    s
}

/// One point of the training-size curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizePoint {
    pub fraction: f64,
    pub minutes: f64,
    pub r: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeCurve {
    pub points: Vec<SizePoint>,
    /// Fractions skipped because they yield no window.
    pub skipped: Vec<f64>,
    /// Pearson r between minutes and mean r; `None` with fewer than two
    /// points.
    pub correlation: Option<f64>,
    pub p: Option<f64>,
}

/// Runs `run(fraction, seed) -> Some((minutes, r))`, or `None` when the
/// fraction is too small, and correlates minutes with mean r.
pub fn training_size_curve<F>(fractions: &[f64], seeds: &[u64], mut run: F) -> Result<SizeCurve>
where
    F: FnMut(f64, u64) -> Result<Option<(f64, f64)>>,
{
    if fractions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Evaluation("fractions must be strictly ascending".into()));
    }
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    'frac: for &f in fractions {
        let mut rs = Vec::new();
        let mut minutes = 0.0;
        for &s in seeds {
            match run(f, s)? {
                Some((m, r)) => {
                    minutes = m;
                    rs.push(r);
                }
                None => {
                    log::warn!("fraction {f} yields no training window; skipped");
                    skipped.push(f);
                    continue 'frac;
                }
            }
        }
        points.push(SizePoint {
            fraction: f,
            minutes,
            r: Summary::new(format!("{f}"), rs),
        });
    }
    let (correlation, p) = if points.len() >= 2 {
        let x: Vec<f64> = points.iter().map(|p| p.minutes).collect();
        let y: Vec<f64> = points.iter().map(|p| p.r.mean).collect();
        match pearson(&x, &y) {
            Some(r) if points.len() > 2 => {
                let df = points.len() as f64 - 2.0;
                let p = if r.abs() >= 1.0 { 0.0 } else { two_sided_p(r * (df / (1.0 - r * r)).sqrt(), df) };
                (Some(r), Some(p))
            }
            r => (r, None),
        }
    } else {
        (None, None)
    };
    Ok(SizeCurve {
        points,
        skipped,
        correlation,
        p,
    })
}

pub fn size_curve_csv(c: &SizeCurve) -> String {
    let mut s = String::from("fraction,minutes,r_mean,r_sd,runs\n");
    for p in &c.points {
        let _ = writeln!(s, "{},{:.4},{:.6},{:.6},{}", p.fraction, p.minutes, p.r.mean, p.r.sd, p.r.values.len());
    }
    s
}

/// Randomly guessing listeners as a null for a forced-choice test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChanceSim {
    /// Mean accuracy over repetitions.
    pub mean: f64,
    /// 95th percentile of per-repetition mean accuracy.
    pub threshold: f64,
    pub observed: f64,
    pub above_chance: bool,
}

pub fn listening_chance_sim(
    n_sentences: usize,
    n_raters: usize,
    n_choices: usize,
    reps: usize,
    observed_accuracy: f64,
    seed: u64,
) -> Result<ChanceSim> {
    if n_sentences == 0 || n_raters == 0 || n_choices == 0 || reps == 0 {
        return Err(Error::Evaluation("listening simulation counts must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trials = n_sentences * n_raters;
    let mut acc: Vec<f64> = (0..reps)
        .map(|_| {
            let hits = (0..trials).filter(|_| rng.random_range(0..n_choices) == 0).count();
            hits as f64 / trials as f64
        })
        .collect();
    let mean = acc.iter().sum::<f64>() / reps as f64;
    acc.sort_by(f64::total_cmp);
    let threshold = acc[((0.95 * reps as f64).ceil() as usize).clamp(1, reps) - 1];
    Ok(ChanceSim {
        mean,
        threshold,
        observed: observed_accuracy,
        above_chance: observed_accuracy > threshold,
    })
}

/// Attention diagnostics for one `[steps, T_enc]` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    /// Largest `|Σ_row - 1|`.
    pub max_row_error: f64,
    /// Attention-weighted mean encoder position per decoder step.
    pub centroids: Vec<f64>,
    /// Spearman correlation of step index and centroid.
    pub alignment: Option<f64>,
}

pub fn attention_stats(att: &Array2<f32>) -> AttentionStats {
    let mut max_row_error: f64 = 0.0;
    let centroids: Vec<f64> = att
        .rows()
        .into_iter()
        .map(|row| {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            max_row_error = max_row_error.max((s - 1.0).abs());
            row.iter().enumerate().map(|(i, &w)| i as f64 * w as f64).sum::<f64>() / s
        })
        .collect();
    let steps: Vec<f64> = (0..centroids.len()).map(|i| i as f64).collect();
    AttentionStats {
        max_row_error,
        alignment: spearman(&steps, &centroids),
        centroids,
    }
}

// ---- SVG ---------------------------------------------------------------

const W: f64 = 480.0;
const H: f64 = 320.0;
const M: f64 = 48.0;

fn extent(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Line chart with optional ± error bars per point.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64, f64)]) -> String {
    let (x0, x1) = extent(points.iter().map(|p| p.0));
    let (y0, y1) = extent(points.iter().flat_map(|p| [p.1 - p.2, p.1 + p.2]));
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{title}</text>", W / 2.0);
    let _ = writeln!(
        s,
        "<line x1=\"{M}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/><line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{b}\" stroke=\"black\"/>",
        b = H - M,
        r = W - M
    );
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>", W / 2.0, H - 10.0);
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{y_label}</text>",
        H / 2.0,
        H / 2.0
    );
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"{anchor}\">{v:.3}</text>", sx(v), H - M + 14.0);
    }
    for v in [y0, y1] {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{v:.3}</text>", M - 4.0, sy(v) + 4.0);
    }
    let path: Vec<String> = points.iter().map(|p| format!("{:.1},{:.1}", sx(p.0), sy(p.1))).collect();
    let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>", path.join(" "));
    for &(x, y, e) in points {
        let _ = writeln!(
            s,
            "<line x1=\"{0:.1}\" y1=\"{1:.1}\" x2=\"{0:.1}\" y2=\"{2:.1}\" stroke=\"steelblue\"/><circle cx=\"{0:.1}\" cy=\"{3:.1}\" r=\"3\" fill=\"steelblue\"/>",
            sx(x),
            sy(y - e),
            sy(y + e),
            sy(y)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Greyscale heatmap, rows top to bottom, darker for larger values.
pub fn heatmap_svg(title: &str, x_label: &str, y_label: &str, m: &Array2<f32>) -> String {
    let (rows, cols) = m.dim();
    let (lo, hi) = extent(m.iter().map(|&v| v as f64));
    let cw = (W - 2.0 * M) / cols.max(1) as f64;
    let ch = (H - 2.0 * M) / rows.max(1) as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{title}</text>", W / 2.0);
    for ((r, c), &v) in m.indexed_iter() {
        let g = (255.0 * (1.0 - (v as f64 - lo) / (hi - lo))).round() as u8;
        let _ = writeln!(
            s,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"rgb({g},{g},{g})\"/>",
            M + c as f64 * cw,
            M + r as f64 * ch,
            cw + 0.05,
            ch + 0.05
        );
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>", W / 2.0, H - 16.0);
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{y_label}</text>",
        H / 2.0,
        H / 2.0
    );
    s.push_str("</svg>\n");
    s
}
