use num_complex::Complex64 as C64;
use rustfft::FftPlanner;

/// Analytic signal by the frequency-domain method with an FFT length equal
/// to the next power of two at or above the signal length. The returned
/// vector has the input length.
pub fn analytic_signal(x: &[f32]) -> Vec<C64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let nfft = n.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(nfft);
    let inv = planner.plan_fft_inverse(nfft);
    let mut buf: Vec<C64> = x.iter().map(|&v| C64::new(v as f64, 0.0)).collect();
    buf.resize(nfft, C64::new(0.0, 0.0));
    fwd.process(&mut buf);
    // h = [1, 2, ..., 2, 1 (Nyquist), 0, ..., 0]
    for (k, v) in buf.iter_mut().enumerate() {
        let h = if k == 0 || (nfft % 2 == 0 && k == nfft / 2) {
            1.0
        } else if k < nfft.div_ceil(2) {
            2.0
        } else {
            0.0
        };
        *v *= h / nfft as f64;
    }
    inv.process(&mut buf);
    buf.truncate(n);
    buf
}

/// Magnitude of the analytic signal.
pub fn envelope(x: &[f32]) -> Vec<f32> {
    analytic_signal(x).into_iter().map(|c| c.norm() as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn real_part_is_the_input() {
        let x: Vec<f32> = (0..37).map(|i| ((i * 7 % 11) as f32) - 5.0).collect();
        let a = analytic_signal(&x);
        for (v, c) in x.iter().zip(&a) {
            assert!((*v as f64 - c.re).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_maps_to_sine_quadrature() {
        let n = 256;
        let x: Vec<f32> = (0..n).map(|i| (2.0 * std::f32::consts::PI * 8.0 * i as f32 / n as f32).cos()).collect();
        let a = analytic_signal(&x);
        for (i, c) in a.iter().enumerate() {
            let want = (2.0 * std::f64::consts::PI * 8.0 * i as f64 / n as f64).sin();
            assert!((c.im - want).abs() < 1e-5);
        }
    }
}
