//! Rational-ratio polyphase resampling with a Kaiser-windowed sinc.

use std::f64::consts::PI;

/// Windowed-sinc anti-alias filter shared by all output phases.
#[derive(Clone, Debug)]
pub struct PolyphaseResampler {
    up: usize,
    down: usize,
    half: usize,
    taps: Vec<f64>,
}

/// Zeroth-order modified Bessel function of the first kind.
pub fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl PolyphaseResampler {
    /// `zero_crossings` counts sinc lobes on each side at the lower of the
    /// two rates; `rolloff` scales the cutoff below the lower Nyquist.
    pub fn new(up: usize, down: usize, zero_crossings: usize, beta: f64, rolloff: f64) -> Self {
        let g = gcd(up, down);
        let (up, down) = (up / g, down / g);
        let m = up.max(down);
        let half = zero_crossings * m;
        let fc = rolloff / m as f64;
        let i0b = bessel_i0(beta);
        let len = 2 * half + 1;
        let mut taps: Vec<f64> = (0..len)
            .map(|i| {
                let t = i as f64 - half as f64;
                let r = t / half as f64;
                let w = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / i0b;
                fc * sinc(fc * t) * w
            })
            .collect();
        // Every polyphase branch is normalised to unit DC gain.
        for phase in 0..up {
            let s: f64 = taps.iter().skip(phase).step_by(up).sum();
            if s != 0.0 {
                taps.iter_mut().skip(phase).step_by(up).for_each(|v| *v /= s);
            }
        }
        Self { up, down, half, taps }
    }

    pub fn ratio(&self) -> (usize, usize) {
        (self.up, self.down)
    }

    pub fn output_len(&self, n: usize) -> usize {
        (n * self.up).div_ceil(self.down)
    }

    /// Delay-compensated resampling; output sample `n` is centred on input
    /// time `n·down/up`.
    pub fn process(&self, x: &[f32]) -> Vec<f32> {
        let (up, down, half) = (self.up as i64, self.down as i64, self.half as i64);
        let nx = x.len() as i64;
        let len = self.taps.len() as i64;
        (0..self.output_len(x.len()) as i64)
            .map(|n| {
                let center = n * down + half;
                // tap index i = center - k·up must lie in [0, len)
                let k_lo = ((center - len + 1).max(0) + up - 1) / up;
                let k_hi = (center / up).min(nx - 1);
                let mut acc = 0.0f64;
                let mut k = k_lo;
                while k <= k_hi {
                    acc += x[k as usize] as f64 * self.taps[(center - k * up) as usize];
                    k += 1;
                }
                acc as f32
            })
            .collect()
    }

    /// Magnitude response of the prototype at `freq`, expressed in cycles
    /// per sample of the output rate, normalised by the per-branch gain.
    pub fn response(&self, freq_out: f64) -> f64 {
        // Upsampled rate is out_rate · down.
        let w = 2.0 * PI * freq_out / self.down as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &h) in self.taps.iter().enumerate() {
            re += h * (w * i as f64).cos();
            im -= h * (w * i as f64).sin();
        }
        (re * re + im * im).sqrt() / self.up as f64
    }
}
