//! Multichannel array signals for a source in a room.
//!
//! In the frequency domain every arrival contributes
//! `h(f, Ω_k) α_k exp(-i2πfτ_k) S(f)` to the array pressure. The time-domain
//! simulator evaluates that sum on an FFT grid to obtain per-microphone impulse
//! responses (exact continuous delays, no sample rounding) and convolves them
//! with the source.

use std::f64::consts::PI;
use std::path::PathBuf;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::array::{dot, ArrayGeometry, ArrayModel, FrequencyResponse, Vec3};
use crate::dsp::{fft_convolve, irfft, rfft};
use crate::error::{Error, Result};
use crate::room::{image_sources, ReflectionSet, RoomSpec};
use crate::rir::{drr, render_energy_rir};
use crate::seeding::stream_rng;
use crate::special::legendre_into;

#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelSignal {
    pub fs: f64,
    /// One vector of samples per microphone, all the same length.
    pub channels: Vec<Vec<f64>>,
}

impl MultichannelSignal {
    pub fn new(fs: f64, channels: Vec<Vec<f64>>) -> Result<Self> {
        if !(fs > 0.0) {
            return Err(Error::invalid("fs", "sampling rate must be positive"));
        }
        if channels.is_empty() {
            return Err(Error::Dimension("signal has no channels".into()));
        }
        let n = channels[0].len();
        if channels.iter().any(|c| c.len() != n) {
            return Err(Error::Dimension("channels differ in length".into()));
        }
        Ok(MultichannelSignal { fs, channels })
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, |c| c.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Frequency-domain array pressure: column `b` is p(f_b).
#[derive(Debug, Clone, PartialEq)]
pub struct ArraySpectrum {
    pub freqs: Vec<f64>,
    pub data: DMatrix<Complex64>,
}

/// Σ_k h(f, Ω_k) α_k exp(-i2πf(τ_k + extra_delay)) for every frequency.
pub fn array_transfer(
    array: &ArrayGeometry,
    refs: &ReflectionSet,
    freqs: &[f64],
    extra_delay: f64,
) -> DMatrix<Complex64> {
    let q = array.num_mics();
    let arrivals: Vec<_> = refs.arrivals().filter(|r| r.amplitude != 0.0).collect();
    let mut out = DMatrix::zeros(q, freqs.len());
    match array.model {
        ArrayModel::Open => {
            // phase of arrival k at mic q: 2πf (û_k·r_q / c - τ_k)
            let offsets: Vec<Vec<f64>> = arrivals
                .iter()
                .map(|r| {
                    let u = r.doa.unit_vector();
                    array
                        .mic_positions
                        .iter()
                        .map(|p| dot(&u, p) / array.speed_of_sound - r.delay - extra_delay)
                        .collect()
                })
                .collect();
            for (b, &f) in freqs.iter().enumerate() {
                let w = 2.0 * PI * f;
                let mut col = out.column_mut(b);
                for (r, offs) in arrivals.iter().zip(&offsets) {
                    for (qi, t) in offs.iter().enumerate() {
                        col[qi] += Complex64::from_polar(r.amplitude, w * t);
                    }
                }
            }
        }
        ArrayModel::RigidSphere { .. } => {
            let modes = array.sh_order + 1;
            let mic_dirs: Vec<Vec3> = array
                .mic_positions
                .iter()
                .map(|p| {
                    let r = crate::array::norm(p);
                    [p[0] / r, p[1] / r, p[2] / r]
                })
                .collect();
            // legendre[k][q * modes + n] = P_n(û_k · r̂_q)
            let legendre: Vec<Vec<f64>> = arrivals
                .iter()
                .map(|r| {
                    let u = r.doa.unit_vector();
                    let mut row = vec![0.0; q * modes];
                    for (qi, d) in mic_dirs.iter().enumerate() {
                        legendre_into(
                            dot(&u, d).clamp(-1.0, 1.0),
                            &mut row[qi * modes..(qi + 1) * modes],
                        );
                    }
                    row
                })
                .collect();
            let mut acc = vec![Complex64::new(0.0, 0.0); q * modes];
            for (b, &f) in freqs.iter().enumerate() {
                let resp = FrequencyResponse::new(array, array.wavenumber(f));
                let coeffs = resp.mode_coefficients();
                acc.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
                let w = 2.0 * PI * f;
                for (r, leg) in arrivals.iter().zip(&legendre) {
                    let phasor = Complex64::from_polar(r.amplitude, -w * (r.delay + extra_delay));
                    for (a, p) in acc.iter_mut().zip(leg) {
                        *a += phasor * p;
                    }
                }
                let mut col = out.column_mut(b);
                for qi in 0..q {
                    col[qi] = coeffs
                        .iter()
                        .zip(&acc[qi * modes..(qi + 1) * modes])
                        .fold(Complex64::new(0.0, 0.0), |s, (c, a)| s + c * a);
                }
            }
        }
    }
    out
}

/// p(f) = Σ_k h(f,Ω_k) α_k e^{-i2πfτ_k} S(f) + n(f) with n circular white
/// Gaussian of standard deviation `noise_level · rms(S)`.
pub fn simulate_array_pressure(
    array: &ArrayGeometry,
    refs: &ReflectionSet,
    freqs: &[f64],
    source_spectrum: &[Complex64],
    noise_level: f64,
    seed: u64,
) -> Result<ArraySpectrum> {
    if freqs.len() != source_spectrum.len() {
        return Err(Error::Dimension("one source value per frequency required".into()));
    }
    let mut data = array_transfer(array, refs, freqs, 0.0);
    for (b, s) in source_spectrum.iter().enumerate() {
        data.column_mut(b).iter_mut().for_each(|v| *v *= s);
    }
    if noise_level > 0.0 && !freqs.is_empty() {
        let rms = (source_spectrum.iter().map(|s| s.norm_sqr()).sum::<f64>()
            / source_spectrum.len() as f64)
            .sqrt();
        let sigma = noise_level * rms / 2f64.sqrt();
        let mut rng = stream_rng(seed, "pressure-noise");
        for v in data.iter_mut() {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            *v += Complex64::new(re * sigma, im * sigma);
        }
    }
    Ok(ArraySpectrum {
        freqs: freqs.to_vec(),
        data,
    })
}

/// Bulk delay added to the simulated impulse responses so that scattering
/// and fractional-delay tails stay causal.
const PRE_DELAY_SAMPLES: usize = 64;

/// Per-microphone impulse responses of all arrivals, sampled at `fs`.
pub fn array_impulse_responses(
    array: &ArrayGeometry,
    refs: &ReflectionSet,
    fs: f64,
) -> Vec<Vec<f64>> {
    let max_delay = refs.arrivals().map(|r| r.delay).fold(0.0, f64::max);
    let n = ((max_delay * fs).ceil() as usize + 2 * PRE_DELAY_SAMPLES + 256).next_power_of_two();
    let freqs: Vec<f64> = (0..=n / 2).map(|b| b as f64 * fs / n as f64).collect();
    let pre = PRE_DELAY_SAMPLES as f64 / fs;
    let mut h = array_transfer(array, refs, &freqs, pre);
    // the Nyquist bin of a real signal is real
    let last = n / 2;
    h.column_mut(last).iter_mut().for_each(|v| *v = Complex64::new(v.re, 0.0));
    (0..array.num_mics())
        .map(|qi| {
            let row: Vec<Complex64> = h.row(qi).iter().copied().collect();
            irfft(&row, n)
        })
        .collect()
}

/// Time-domain microphone signals: source convolved with every
/// microphone's impulse response, plus white noise at `noise_level` times the
/// clean signal RMS.
pub fn simulate_array_signals(
    array: &ArrayGeometry,
    refs: &ReflectionSet,
    source: &[f64],
    fs: f64,
    noise_level: f64,
    seed: u64,
) -> Result<MultichannelSignal> {
    if source.is_empty() {
        return Err(Error::SignalTooShort { needed: 1, got: 0 });
    }
    let irs = array_impulse_responses(array, refs, fs);
    let mut channels: Vec<Vec<f64>> = irs.iter().map(|h| fft_convolve(source, h)).collect();
    if noise_level > 0.0 {
        let count: usize = channels.iter().map(|c| c.len()).sum();
        let rms = (channels.iter().flatten().map(|v| v * v).sum::<f64>() / count as f64).sqrt();
        let sigma = noise_level * rms;
        let mut rng = stream_rng(seed, "sensor-noise");
        for c in channels.iter_mut() {
            for v in c.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += sigma * n;
            }
        }
    }
    MultichannelSignal::new(fs, channels)
}

/// Pink noise with a 4 Hz raised-cosine envelope, a stand-in for speech.
pub fn speech_like<R: Rng + ?Sized>(duration: f64, fs: f64, rng: &mut R) -> Vec<f64> {
    let n = (duration * fs).round() as usize;
    if n == 0 {
        return Vec::new();
    }
    let white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let nfft = n.next_power_of_two();
    let mut spec = rfft(&white, nfft);
    for (b, v) in spec.iter_mut().enumerate() {
        let f = (b as f64 * fs / nfft as f64).max(20.0);
        *v /= f.sqrt();
    }
    spec[0] = Complex64::new(0.0, 0.0);
    let mut pink = irfft(&spec, nfft);
    pink.truncate(n);
    let phase: f64 = rng.random_range(0.0..1.0);
    for (i, v) in pink.iter_mut().enumerate() {
        let t = i as f64 / fs;
        *v *= 0.5 * (1.0 - (2.0 * PI * (4.0 * t + phase)).cos());
    }
    let peak = pink.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        pink.iter_mut().for_each(|v| *v /= peak);
    }
    pink
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SourceSignal {
    /// Speech-like noise with a duration drawn from [min_duration, max_duration].
    SpeechLike { min_duration: f64, max_duration: f64 },
    /// First channel of a WAV file.
    Wav { path: PathBuf },
}

impl Default for SourceSignal {
    fn default() -> Self {
        SourceSignal::SpeechLike {
            min_duration: 2.5,
            max_duration: 3.0,
        }
    }
}

impl SourceSignal {
    pub fn generate(&self, fs: f64, seed: u64) -> Result<Vec<f64>> {
        match self {
            SourceSignal::SpeechLike { min_duration, max_duration } => {
                if !(*min_duration > 0.0) || max_duration < min_duration {
                    return Err(Error::invalid("scene.source", "bad duration range"));
                }
                let mut rng = stream_rng(seed, "source");
                let d = if max_duration > min_duration {
                    rng.random_range(*min_duration..*max_duration)
                } else {
                    *min_duration
                };
                Ok(speech_like(d, fs, &mut rng))
            }
            SourceSignal::Wav { path } => {
                let sig = crate::io::read_wav(path)?;
                if (sig.fs - fs).abs() > 1e-9 {
                    return Err(Error::Format(format!(
                        "source WAV sampled at {} Hz, expected {fs} Hz",
                        sig.fs
                    )));
                }
                Ok(sig.channels.into_iter().next().unwrap_or_default())
            }
        }
    }
}

/// Everything needed to simulate one recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub room: RoomSpec,
    pub source_pos: Vec3,
    pub array_pos: Vec3,
    pub array: ArrayGeometry,
    pub source: SourceSignal,
    pub noise_level: f64,
    pub seed: u64,
    pub fs: f64,
    /// Image sources up to this delay are simulated.
    pub max_delay: f64,
    /// Ground truth keeps reflections up to this delay.
    pub truth_horizon: f64,
}

#[derive(Debug, Clone)]
pub struct SimulatedScene {
    pub signals: MultichannelSignal,
    /// Every simulated arrival.
    pub arrivals: ReflectionSet,
    /// Reflections within the truth horizon.
    pub truth: ReflectionSet,
    pub drr_db: f64,
}

/// Direct-path window used for DRR.
pub const DRR_DIRECT_WINDOW: f64 = 0.0025;

impl SceneConfig {
    pub fn reflections(&self) -> Result<ReflectionSet> {
        image_sources(&self.room, &self.source_pos, &self.array_pos, self.max_delay)
    }

    /// DRR of the omnidirectional energy response at the array center.
    pub fn drr_db(&self, refs: &ReflectionSet) -> Result<f64> {
        let ir = render_energy_rir(refs, self.fs, self.max_delay + 0.01);
        drr(&ir, DRR_DIRECT_WINDOW)
    }

    pub fn simulate(&self) -> Result<SimulatedScene> {
        let arrivals = self.reflections()?;
        self.simulate_with(arrivals)
    }

    /// Simulates the recording for an explicit set of arrivals.
    pub fn simulate_with(&self, arrivals: ReflectionSet) -> Result<SimulatedScene> {
        let source = self.source.generate(self.fs, self.seed)?;
        let signals = simulate_array_signals(
            &self.array,
            &arrivals,
            &source,
            self.fs,
            self.noise_level,
            self.seed,
        )?;
        let drr_db = self.drr_db(&arrivals)?;
        let truth = arrivals.truncated(self.truth_horizon);
        Ok(SimulatedScene {
            signals,
            arrivals,
            truth,
            drr_db,
        })
    }
}
