//! Spherical Bessel/Hankel functions and Legendre polynomials used by the
//! rigid-sphere array model.

use num_complex::Complex64;

/// Below this argument the rigid-sphere radial terms switch to their
/// leading-order expansion.
pub const SMALL_KR: f64 = 1e-3;

fn double_factorial_odd(n: usize) -> f64 {
    // (2n-1)!!, with (-1)!! = 1
    (1..=n).fold(1.0, |acc, k| acc * (2 * k - 1) as f64)
}

/// j_n(x) by its power series; accurate for x below roughly n + 1.
fn sph_jn_series(n: usize, x: f64) -> f64 {
    let lead = x.powi(n as i32) / double_factorial_odd(n + 1);
    let q = -0.5 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k as f64 * (2 * n + 2 * k + 1) as f64);
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    lead * sum
}

/// Spherical Bessel functions of the first kind, orders `0..=nmax`.
pub fn sph_jn(nmax: usize, x: f64) -> Vec<f64> {
    let mut out = vec![0.0; nmax + 1];
    if x == 0.0 {
        out[0] = 1.0;
        return out;
    }
    if x < 1.0 {
        for (n, v) in out.iter_mut().enumerate() {
            *v = sph_jn_series(n, x);
        }
        return out;
    }
    // upward recurrence is stable while n <= x
    let (s, c) = x.sin_cos();
    out[0] = s / x;
    if nmax >= 1 {
        out[1] = s / (x * x) - c / x;
    }
    for n in 1..nmax {
        if (n + 1) as f64 <= x {
            out[n + 1] = (2 * n + 1) as f64 / x * out[n] - out[n - 1];
        } else {
            out[n + 1] = sph_jn_series(n + 1, x);
        }
    }
    out
}

/// Spherical Bessel functions of the second kind, orders `0..=nmax`.
pub fn sph_yn(nmax: usize, x: f64) -> Vec<f64> {
    let mut out = vec![0.0; nmax + 1];
    let (s, c) = x.sin_cos();
    out[0] = -c / x;
    if nmax >= 1 {
        out[1] = -c / (x * x) - s / x;
    }
    for n in 1..nmax {
        out[n + 1] = (2 * n + 1) as f64 / x * out[n] - out[n - 1];
    }
    out
}

/// Rigid-sphere radial functions b_n(x) = j_n(x) - j_n'(x) h_n(x) / h_n'(x)
/// for orders `0..=nmax`, evaluated on the sphere surface. The outgoing wave
/// under the `exp(+iωt)` convention is h_n = j_n - i y_n, and the Wronskian
/// gives b_n = -i / (x^2 h_n'(x)).
pub fn rigid_sphere_radial(nmax: usize, x: f64) -> Vec<Complex64> {
    if x < SMALL_KR {
        // b_n(x) ~ x^n / ((n+1) (2n-1)!!)
        return (0..=nmax)
            .map(|n| {
                let v = x.powi(n as i32) / ((n + 1) as f64 * double_factorial_odd(n));
                Complex64::new(v, 0.0)
            })
            .collect();
    }
    let j = sph_jn(nmax + 1, x);
    let y = sph_yn(nmax + 1, x);
    (0..=nmax)
        .map(|n| {
            // f_n' = (n / x) f_n - f_{n+1}
            let jd = n as f64 / x * j[n] - j[n + 1];
            let yd = n as f64 / x * y[n] - y[n + 1];
            let hd = Complex64::new(jd, -yd);
            -Complex64::i() / (hd * (x * x))
        })
        .collect()
}

/// Legendre polynomials P_0..=P_nmax at t, written into `out`.
pub fn legendre_into(t: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = t;
    }
    for n in 1..out.len() - 1 {
        out[n + 1] = ((2 * n + 1) as f64 * t * out[n] - n as f64 * out[n - 1]) / (n + 1) as f64;
    }
}
