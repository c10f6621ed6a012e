//! Impulse-response rendering and room-acoustic measures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::room::ReflectionSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpulseResponse {
    pub samples: Vec<f64>,
    pub fs: f64,
    /// Set when some arrival fell beyond the rendered length.
    pub truncated: bool,
}

impl ImpulseResponse {
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    /// Backward-integrated energy decay curve in dB re. total energy.
    pub fn energy_decay_curve(&self) -> Vec<f64> {
        let mut edc = vec![0.0; self.samples.len()];
        let mut acc = 0.0;
        for i in (0..self.samples.len()).rev() {
            acc += self.samples[i] * self.samples[i];
            edc[i] = acc;
        }
        let total = acc;
        edc.iter()
            .map(|e| if *e > 0.0 { 10.0 * (e / total).log10() } else { f64::NEG_INFINITY })
            .collect()
    }
}

/// Each arrival becomes an impulse of its amplitude at the nearest sample.
pub fn render_rir(refs: &ReflectionSet, fs: f64, length: f64) -> ImpulseResponse {
    let n = (length * fs).round().max(1.0) as usize;
    let mut samples = vec![0.0; n];
    let mut truncated = false;
    for r in refs.arrivals() {
        let idx = (r.delay * fs).round() as usize;
        if idx < n {
            samples[idx] += r.amplitude;
        } else {
            truncated = true;
        }
    }
    ImpulseResponse { samples, fs, truncated }
}

/// Energy envelope: each sample holds the root of the summed squared
/// amplitudes of the arrivals rounded to it. Dense late arrivals that share a
/// sample add in energy rather than coherently.
pub fn render_energy_rir(refs: &ReflectionSet, fs: f64, length: f64) -> ImpulseResponse {
    let n = (length * fs).round().max(1.0) as usize;
    let mut energy = vec![0.0; n];
    let mut truncated = false;
    for r in refs.arrivals() {
        let idx = (r.delay * fs).round() as usize;
        if idx < n {
            energy[idx] += r.amplitude * r.amplitude;
        } else {
            truncated = true;
        }
    }
    ImpulseResponse {
        samples: energy.into_iter().map(f64::sqrt).collect(),
        fs,
        truncated,
    }
}

/// Least-squares decay rate of the energy decay curve between `start_db` and
/// `end_db`, extrapolated to -60 dB.
fn decay_time(edc: &[f64], fs: f64, start_db: f64, end_db: f64) -> Result<f64> {
    let i_start = edc.iter().position(|v| *v <= start_db);
    let i_end = edc.iter().position(|v| *v <= end_db);
    let (i_start, i_end) = match (i_start, i_end) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::InsufficientDecay(format!(
                "energy decay never spans [{end_db}, {start_db}] dB"
            )))
        }
    };
    let pts: Vec<(f64, f64)> = (i_start..i_end)
        .filter(|&i| edc[i].is_finite())
        .map(|i| (i as f64 / fs, edc[i]))
        .collect();
    if pts.len() < 2 {
        return Err(Error::InsufficientDecay(
            "too few samples inside the fitting span".into(),
        ));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    if !(slope < 0.0) {
        return Err(Error::InsufficientDecay("decay slope is not negative".into()));
    }
    Ok(-60.0 / slope)
}

/// T60 from the Schroeder integral, fitted over -5..-25 dB (T20) and
/// extrapolated to 60 dB of decay.
pub fn schroeder_t60(rir: &ImpulseResponse) -> Result<f64> {
    if rir.energy() <= 0.0 {
        return Err(Error::InsufficientDecay("impulse response has no energy".into()));
    }
    decay_time(&rir.energy_decay_curve(), rir.fs, -5.0, -25.0)
}

/// Direct-to-reverberant ratio in dB. The direct part is `[0, direct_window]`.
/// Returns `f64::INFINITY` when there is no reverberant energy.
pub fn drr(rir: &ImpulseResponse, direct_window: f64) -> Result<f64> {
    if !(direct_window > 0.0) {
        return Err(Error::invalid("direct_window", "must be positive"));
    }
    let split = ((direct_window * rir.fs).floor() as usize + 1).min(rir.samples.len());
    let direct: f64 = rir.samples[..split].iter().map(|v| v * v).sum();
    let rest: f64 = rir.samples[split..].iter().map(|v| v * v).sum();
    if rest <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (direct / rest).log10())
}
