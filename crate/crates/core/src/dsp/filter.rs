//! IIR design by analog prototype, band transformation and the bilinear
//! transform, realised as cascaded second-order sections.

use crate::error::{Error, Result};
use num_complex::Complex64 as C64;
use std::f64::consts::PI;

/// Prototype family.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Design {
    Butterworth,
    /// Passband ripple and stopband attenuation, both in dB.
    Elliptic { ripple_db: f64, attenuation_db: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandKind {
    Bandpass,
    Bandstop,
}

/// Band filter specification. `order` is the prototype order; the band
/// transformation doubles the pole count.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FilterSpec {
    pub kind: BandKind,
    pub order: usize,
    pub band: (f64, f64),
    pub design: Design,
}

/// Zeros, poles and gain.
#[derive(Clone, Debug)]
pub struct Zpk {
    pub zeros: Vec<C64>,
    pub poles: Vec<C64>,
    pub gain: f64,
}

impl Zpk {
    /// `H(e^{jω})` evaluated directly from the factored form.
    pub fn response(&self, freq: f64, fs: f64) -> C64 {
        let z = C64::from_polar(1.0, 2.0 * PI * freq / fs);
        let num: C64 = self.zeros.iter().map(|&q| z - q).product();
        let den: C64 = self.poles.iter().map(|&p| z - p).product();
        // Degree difference is zero after the bilinear transform.
        num / den * self.gain
    }
}

/// One biquad `b0 + b1 z^-1 + b2 z^-2 / 1 + a1 z^-1 + a2 z^-2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

/// Cascade of biquads.
#[derive(Clone, Debug, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
}

impl Sos {
    pub fn response(&self, freq: f64, fs: f64) -> C64 {
        let w = 2.0 * PI * freq / fs;
        let z1 = C64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        self.sections
            .iter()
            .map(|s| (s.b[0] + z1 * s.b[1] + z2 * s.b[2]) / (s.a[0] + z1 * s.a[1] + z2 * s.a[2]))
            .product()
    }

    pub fn gain_db(&self, freq: f64, fs: f64) -> f64 {
        20.0 * self.response(freq, fs).norm().log10()
    }

    /// Causal single-pass filtering, transposed direct form II per section.
    pub fn filter(&self, x: &[f32]) -> Vec<f32> {
        let mut y: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        for s in &self.sections {
            let (mut z1, mut z2) = (0.0, 0.0);
            for v in y.iter_mut() {
                let xin = *v;
                let out = s.b[0] * xin + z1;
                z1 = s.b[1] * xin - s.a[1] * out + z2;
                z2 = s.b[2] * xin - s.a[2] * out;
                *v = out;
            }
        }
        y.into_iter().map(|v| v as f32).collect()
    }

    pub fn poles(&self) -> Vec<C64> {
        self.sections.iter().flat_map(|s| quad_roots(s.a)).collect()
    }

    pub fn is_stable(&self) -> bool {
        self.poles().iter().all(|p| p.norm() < 1.0)
    }
}

fn quad_roots(c: [f64; 3]) -> Vec<C64> {
    if c[2] == 0.0 {
        if c[1] == 0.0 {
            return vec![];
        }
        return vec![C64::new(-c[1] / c[0], 0.0)];
    }
    let disc = C64::new(c[1] * c[1] - 4.0 * c[0] * c[2], 0.0).sqrt();
    vec![(-c[1] + disc) / (2.0 * c[0]), (-c[1] - disc) / (2.0 * c[0])]
}

// ---- analog prototypes -----------------------------------------------

fn butterworth_prototype(n: usize) -> Zpk {
    let poles = (1..=n)
        .map(|k| C64::from_polar(1.0, PI * (2 * k + n - 1) as f64 / (2 * n) as f64))
        .collect();
    Zpk {
        zeros: vec![],
        poles,
        gain: 1.0,
    }
}

/// Descending Landen sequence of moduli.
fn landen(k: f64) -> Vec<f64> {
    let mut v = Vec::new();
    let mut k = k;
    if k == 0.0 || k == 1.0 {
        return vec![k];
    }
    while k > 1e-16 && v.len() < 32 {
        let kp = (1.0 - k * k).sqrt();
        k = (k / (1.0 + kp)).powi(2);
        v.push(k);
    }
    v
}

fn ellipk(k: f64) -> f64 {
    landen(k).iter().fold(PI / 2.0, |acc, &v| acc * (1.0 + v))
}

/// `cd(uK, k)` for complex normalised argument `u`.
fn cde(u: C64, k: f64) -> C64 {
    let mut w = (u * (PI / 2.0)).cos();
    for &v in landen(k).iter().rev() {
        w = w * (1.0 + v) / (1.0 + w * w * v);
    }
    w
}

/// `sn(uK, k)` for complex normalised argument `u`.
fn sne(u: C64, k: f64) -> C64 {
    let mut w = (u * (PI / 2.0)).sin();
    for &v in landen(k).iter().rev() {
        w = w * (1.0 + v) / (1.0 + w * w * v);
    }
    w
}

fn srem(x: f64, y: f64) -> f64 {
    let r = x - y * (x / y).round();
    if r.abs() == y / 2.0 {
        r.abs()
    } else {
        r
    }
}

/// Inverse of [`cde`]: normalised `u` with `cd(uK, k) = w`.
fn acde(w: C64, k: f64) -> C64 {
    let v = landen(k);
    let mut w = w;
    for (n, &vn) in v.iter().enumerate() {
        let v1 = if n == 0 { k } else { v[n - 1] };
        w = w / (1.0 + (1.0 - w * w * v1 * v1).sqrt()) * (2.0 / (1.0 + vn));
    }
    let u = w.acos() * (2.0 / PI);
    let kp = (1.0 - k * k).sqrt();
    let r = ellipk(kp) / ellipk(k);
    C64::new(srem(u.re, 4.0), srem(u.im, 2.0 * r))
}

fn asne(w: C64, k: f64) -> C64 {
    C64::new(1.0, 0.0) - acde(w, k)
}

/// Selectivity modulus from the degree equation, given order and the
/// discrimination modulus `k1`. Returns `(k, k')`.
fn ellipdeg(n: usize, k1: f64) -> (f64, f64) {
    let l = n / 2;
    let k1p = (1.0 - k1 * k1).sqrt();
    let prod: f64 = (1..=l)
        .map(|i| sne(C64::new((2 * i - 1) as f64 / n as f64, 0.0), k1p).re)
        .product();
    let kp = k1p.powi(n as i32) * prod.powi(4);
    ((1.0 - kp * kp).sqrt(), kp)
}

/// Normalised elliptic low-pass prototype with passband edge at 1 rad/s.
fn elliptic_prototype(n: usize, ripple_db: f64, attenuation_db: f64) -> Result<Zpk> {
    if ripple_db <= 0.0 || attenuation_db <= ripple_db {
        return Err(Error::Design(format!(
            "elliptic needs 0 < ripple ({ripple_db}) < attenuation ({attenuation_db})"
        )));
    }
    let ep = (10f64.powf(ripple_db / 10.0) - 1.0).sqrt();
    let es = (10f64.powf(attenuation_db / 10.0) - 1.0).sqrt();
    let k1 = ep / es;
    let (k, _) = ellipdeg(n, k1);
    let l = n / 2;
    let odd = n % 2 == 1;
    let j = C64::new(0.0, 1.0);
    let v0 = (-j * asne(j / ep, k1) / n as f64).re;
    let mut zeros = Vec::new();
    let mut poles = Vec::new();
    for i in 1..=l {
        let u = (2 * i - 1) as f64 / n as f64;
        let zeta = cde(C64::new(u, 0.0), k);
        let z = j / (zeta * k);
        let p = j * cde(C64::new(u, -v0), k);
        zeros.push(z);
        zeros.push(z.conj());
        poles.push(p);
        poles.push(p.conj());
    }
    if odd {
        let p0 = j * sne(C64::new(0.0, v0), k);
        poles.push(C64::new(p0.re, 0.0));
    }
    let h0 = if odd { 1.0 } else { 1.0 / (1.0 + ep * ep).sqrt() };
    // Normalise so that |H(0)| = h0.
    let num: C64 = zeros.iter().map(|&z| -z).product();
    let den: C64 = poles.iter().map(|&p| -p).product();
    let gain = h0 * (den / num).norm();
    Ok(Zpk { zeros, poles, gain })
}

// ---- transformations -------------------------------------------------

fn lp2bp(proto: &Zpk, wo: f64, bw: f64) -> Zpk {
    let degree = proto.poles.len() - proto.zeros.len();
    let split = |r: &C64| {
        let s = r * (bw / 2.0);
        let d = (s * s - wo * wo).sqrt();
        [s + d, s - d]
    };
    let mut zeros: Vec<C64> = proto.zeros.iter().flat_map(split).collect();
    zeros.extend(std::iter::repeat_n(C64::new(0.0, 0.0), degree));
    let poles = proto.poles.iter().flat_map(split).collect();
    Zpk {
        zeros,
        poles,
        gain: proto.gain * bw.powi(degree as i32),
    }
}

fn lp2bs(proto: &Zpk, wo: f64, bw: f64) -> Zpk {
    let degree = proto.poles.len() - proto.zeros.len();
    let split = |r: &C64| {
        let s = (bw / 2.0) / r;
        let d = (s * s - wo * wo).sqrt();
        [s + d, s - d]
    };
    let mut zeros: Vec<C64> = proto.zeros.iter().flat_map(split).collect();
    for _ in 0..degree {
        zeros.push(C64::new(0.0, wo));
        zeros.push(C64::new(0.0, -wo));
    }
    let poles = proto.poles.iter().flat_map(split).collect();
    let num: C64 = proto.zeros.iter().map(|&z| -z).product();
    let den: C64 = proto.poles.iter().map(|&p| -p).product();
    Zpk {
        zeros,
        poles,
        gain: proto.gain * (num / den).re,
    }
}

fn bilinear(analog: &Zpk, fs: f64) -> Zpk {
    let fs2 = 2.0 * fs;
    let degree = analog.poles.len() - analog.zeros.len();
    let mut zeros: Vec<C64> = analog.zeros.iter().map(|&z| (fs2 + z) / (fs2 - z)).collect();
    zeros.extend(std::iter::repeat_n(C64::new(-1.0, 0.0), degree));
    let poles = analog.poles.iter().map(|&p| (fs2 + p) / (fs2 - p)).collect();
    let num: C64 = analog.zeros.iter().map(|&z| fs2 - z).product();
    let den: C64 = analog.poles.iter().map(|&p| fs2 - p).product();
    Zpk {
        zeros,
        poles,
        gain: analog.gain * (num / den).re,
    }
}

/// Splits roots into conjugate pairs (upper half plane representative)
/// and real roots.
fn pair_roots(roots: &[C64]) -> Vec<[C64; 2]> {
    let tol = 1e-9;
    let mut complex: Vec<C64> = roots.iter().copied().filter(|r| r.im > tol).collect();
    let mut real: Vec<f64> = roots.iter().filter(|r| r.im.abs() <= tol).map(|r| r.re).collect();
    complex.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    real.sort_by(f64::total_cmp);
    let mut out: Vec<[C64; 2]> = complex.into_iter().map(|c| [c, c.conj()]).collect();
    for pair in real.chunks(2) {
        let a = C64::new(pair[0], 0.0);
        let b = pair.get(1).map_or(C64::new(0.0, 0.0), |&v| C64::new(v, 0.0));
        out.push([a, b]);
    }
    out
}

fn poly2(r: [C64; 2]) -> [f64; 3] {
    [1.0, -(r[0] + r[1]).re, (r[0] * r[1]).re]
}

/// Second-order sections; poles closest to the unit circle are matched
/// first with their nearest zero pair.
pub fn zpk_to_sos(zpk: &Zpk) -> Sos {
    let mut pole_pairs = pair_roots(&zpk.poles);
    let mut zero_pairs = pair_roots(&zpk.zeros);
    pole_pairs.sort_by(|a, b| (1.0 - a[0].norm()).abs().total_cmp(&(1.0 - b[0].norm()).abs()));
    let mut sections = Vec::with_capacity(pole_pairs.len());
    for pp in &pole_pairs {
        let b = if zero_pairs.is_empty() {
            [1.0, 0.0, 0.0]
        } else {
            let (best, _) = zero_pairs
                .iter()
                .enumerate()
                .map(|(i, zp)| (i, (zp[0] - pp[0]).norm().min((zp[1] - pp[0]).norm())))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("non-empty");
            poly2(zero_pairs.remove(best))
        };
        sections.push(Biquad { b, a: poly2(*pp) });
    }
    if let Some(first) = sections.first_mut() {
        first.b.iter_mut().for_each(|v| *v *= zpk.gain);
    }
    Sos { sections }
}

fn prewarp(f: f64, fs: f64) -> f64 {
    2.0 * fs * (PI * f / fs).tan()
}

/// Digital band filter in factored form.
pub fn design_zpk(spec: &FilterSpec, fs: f64) -> Result<Zpk> {
    let (lo, hi) = spec.band;
    if spec.order == 0 || !(0.0 < lo && lo < hi && hi < fs / 2.0) {
        return Err(Error::Design(format!(
            "band ({lo}, {hi}) Hz must satisfy 0 < low < high < fs/2 = {}",
            fs / 2.0
        )));
    }
    let proto = match spec.design {
        Design::Butterworth => butterworth_prototype(spec.order),
        Design::Elliptic {
            ripple_db,
            attenuation_db,
        } => elliptic_prototype(spec.order, ripple_db, attenuation_db)?,
    };
    let (w1, w2) = (prewarp(lo, fs), prewarp(hi, fs));
    let (wo, bw) = ((w1 * w2).sqrt(), w2 - w1);
    let analog = match spec.kind {
        BandKind::Bandpass => lp2bp(&proto, wo, bw),
        BandKind::Bandstop => lp2bs(&proto, wo, bw),
    };
    Ok(bilinear(&analog, fs))
}

/// Designs the filter and checks stability.
pub fn design(spec: &FilterSpec, fs: f64) -> Result<Sos> {
    let zpk = design_zpk(spec, fs)?;
    let sos = zpk_to_sos(&zpk);
    if !sos.is_stable() || sos.sections.iter().any(|s| s.b.iter().chain(&s.a).any(|v| !v.is_finite())) {
        return Err(Error::Design(format!("unstable design for {spec:?} at fs={fs}")));
    }
    Ok(sos)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn analog_gain(zpk: &Zpk, w: f64) -> f64 {
        let s = C64::new(0.0, w);
        let num: C64 = zpk.zeros.iter().map(|&z| s - z).product();
        let den: C64 = zpk.poles.iter().map(|&p| s - p).product();
        (num / den * zpk.gain).norm()
    }

    #[test]
    fn elliptic_prototype_meets_ripple_and_attenuation() {
        for n in [3usize, 4, 8] {
            let (rp, rs) = (0.5, 40.0);
            let proto = elliptic_prototype(n, rp, rs).unwrap();
            let ep = (10f64.powf(rp / 10.0) - 1.0).sqrt();
            let es = (10f64.powf(rs / 10.0) - 1.0).sqrt();
            let (k, _) = ellipdeg(n, ep / es);
            let pass_min = 10f64.powf(-rp / 20.0);
            for i in 0..=200 {
                let w = i as f64 / 200.0;
                let g = analog_gain(&proto, w);
                assert!(g <= 1.0 + 1e-9 && g >= pass_min - 1e-9, "n={n} w={w} g={g}");
            }
            let stop_max = 10f64.powf(-rs / 20.0);
            for i in 0..200 {
                let w = 1.0 / k * (1.0 + i as f64 * 0.05);
                assert!(analog_gain(&proto, w) <= stop_max * (1.0 + 1e-6), "n={n} w={w}");
            }
        }
    }

    #[test]
    fn jacobi_functions_are_consistent() {
        // sn^2 + cn^2 = 1 implies cd(0) = 1 and sn(K) = 1.
        let k = 0.7;
        assert!((cde(C64::new(0.0, 0.0), k) - 1.0).norm() < 1e-12);
        assert!((sne(C64::new(1.0, 0.0), k) - 1.0).norm() < 1e-12);
        let u = C64::new(0.3, 0.0);
        let back = acde(cde(u, k), k);
        assert!((back - u).norm() < 1e-10, "{back}");
        // Complete integral K(0.5) from tables.
        assert!((ellipk(0.5) - 1.685_750_354_812_596).abs() < 1e-12);
    }

    #[test]
    fn sos_response_matches_factored_response() {
        let spec = FilterSpec {
            kind: BandKind::Bandpass,
            order: 8,
            band: (70.0, 170.0),
            design: Design::Butterworth,
        };
        let zpk = design_zpk(&spec, 1024.0).unwrap();
        let sos = zpk_to_sos(&zpk);
        for f in [10.0, 70.0, 120.0, 170.0, 300.0] {
            let a = zpk.response(f, 1024.0).norm();
            let b = sos.response(f, 1024.0).norm();
            assert!((a - b).abs() < 1e-9 * a.max(1e-12) + 1e-12, "f={f}: {a} vs {b}");
        }
    }

    #[test]
    fn invalid_bands_are_rejected() {
        let spec = FilterSpec {
            kind: BandKind::Bandpass,
            order: 8,
            band: (70.0, 600.0),
            design: Design::Butterworth,
        };
        assert!(design(&spec, 1024.0).is_err());
    }
}
