//! Real-signal FFT helpers on top of rustfft.

use num_complex::Complex64;
use rustfft::FftPlanner;

/// One-sided spectrum (n/2 + 1 bins) of `x` zero-padded or cut to `n`.
pub fn rfft(x: &[f64], n: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = (0..n)
        .map(|i| Complex64::new(x.get(i).copied().unwrap_or(0.0), 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf.truncate(n / 2 + 1);
    buf
}

/// Inverse of [`rfft`] for a length-`n` real signal.
pub fn irfft(spec: &[Complex64], n: usize) -> Vec<f64> {
    let half = n / 2 + 1;
    assert!(spec.len() >= half, "spectrum too short for length {n}");
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    buf[..half].copy_from_slice(&spec[..half]);
    for k in half..n {
        buf[k] = spec[n - k].conj();
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
    let scale = 1.0 / n as f64;
    buf.iter().map(|v| v.re * scale).collect()
}

/// Linear convolution by FFT.
pub fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let fa = rfft(a, n);
    let fb = rfft(b, n);
    let prod: Vec<Complex64> = fa.iter().zip(&fb).map(|(x, y)| x * y).collect();
    let mut y = irfft(&prod, n);
    y.truncate(out_len);
    y
}
