//! Short-time Fourier analysis, band plan, and spatial correlation matrices.

use std::f64::consts::PI;
use std::ops::Range;

use log::warn;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::MultichannelSignal;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    /// Window length in seconds.
    pub window: f64,
    /// Fraction of the window shared by consecutive frames.
    pub overlap: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            window: 0.15,
            overlap: 0.75,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window > 0.0) {
            return Err(Error::invalid("stft.window", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::invalid("stft.overlap", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn window_len(&self, fs: f64) -> usize {
        (self.window * fs).round() as usize
    }

    pub fn hop(&self, fs: f64) -> usize {
        ((self.window_len(fs) as f64 * (1.0 - self.overlap)).round() as usize).max(1)
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos()))
        .collect()
}

/// One-sided STFT of every channel. The FFT length equals the window length.
#[derive(Debug, Clone)]
pub struct StftTensor {
    pub fs: f64,
    pub window_len: usize,
    pub hop: usize,
    pub frames: usize,
    pub bins: usize,
    pub channels: usize,
    /// Indexed `[frame][bin][channel]`.
    data: Vec<Complex64>,
}

impl StftTensor {
    pub fn bin_spacing(&self) -> f64 {
        self.fs / self.window_len as f64
    }

    /// Array snapshot p(f_bin) of one frame.
    pub fn snapshot(&self, frame: usize, bin: usize) -> &[Complex64] {
        let start = (frame * self.bins + bin) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Q × frames matrix of the snapshots at one bin.
    pub fn bin_matrix(&self, bin: usize) -> DMatrix<Complex64> {
        DMatrix::from_fn(self.channels, self.frames, |q, t| self.snapshot(t, bin)[q])
    }
}

pub fn stft(signal: &MultichannelSignal, cfg: &StftConfig) -> Result<StftTensor> {
    cfg.validate()?;
    let n = cfg.window_len(signal.fs);
    let hop = cfg.hop(signal.fs);
    if n < 2 {
        return Err(Error::invalid("stft.window", "shorter than two samples"));
    }
    if signal.len() < n {
        return Err(Error::SignalTooShort {
            needed: n,
            got: signal.len(),
        });
    }
    let frames = 1 + (signal.len() - n) / hop;
    let bins = n / 2 + 1;
    let q = signal.num_channels();
    let window = hann(n);
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut data = vec![Complex64::new(0.0, 0.0); frames * bins * q];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (ch, x) in signal.channels.iter().enumerate() {
        for t in 0..frames {
            let seg = &x[t * hop..t * hop + n];
            for ((b, s), w) in buf.iter_mut().zip(seg).zip(&window) {
                *b = Complex64::new(s * w, 0.0);
            }
            fft.process(&mut buf);
            for (k, v) in buf[..bins].iter().enumerate() {
                data[(t * bins + k) * q + ch] = *v;
            }
        }
    }
    Ok(StftTensor {
        fs: signal.fs,
        window_len: n,
        hop,
        frames,
        bins,
        channels: q,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BandPlanConfig {
    pub f_lo: f64,
    pub f_hi: f64,
    pub bandwidth: f64,
    pub n_bands: usize,
    /// Frequencies per band used by the phase-alignment sum.
    pub bins_per_band: usize,
}

impl Default for BandPlanConfig {
    fn default() -> Self {
        BandPlanConfig {
            f_lo: 500.0,
            f_hi: 5000.0,
            bandwidth: 2000.0,
            n_bands: 11,
            bins_per_band: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub index: usize,
    pub start_hz: f64,
    /// Focusing frequency f_0.
    pub center_hz: f64,
    pub center_bin: usize,
    /// FFT bins of the J_f phase-alignment frequencies.
    pub bins: Vec<usize>,
    pub freqs: Vec<f64>,
    /// Spacing of consecutive phase-alignment frequencies.
    pub spacing: f64,
}

impl Band {
    /// f_j − f_first for every phase-alignment frequency.
    pub fn offsets(&self) -> Vec<f64> {
        self.freqs.iter().map(|f| f - self.freqs[0]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandPlan {
    pub bands: Vec<Band>,
    pub bin_spacing: f64,
}

/// Bands of width `bandwidth` with starts evenly spaced between `f_lo` and
/// `f_hi − bandwidth`, snapped to the FFT grid of spacing `bin_spacing`.
pub fn band_plan(cfg: &BandPlanConfig, bin_spacing: f64) -> Result<BandPlan> {
    if !(bin_spacing > 0.0) {
        return Err(Error::invalid("bin_spacing", "must be positive"));
    }
    if !(cfg.f_lo >= 0.0 && cfg.bandwidth > 0.0 && cfg.f_lo + cfg.bandwidth <= cfg.f_hi + 1e-9) {
        return Err(Error::Config(format!(
            "band plan infeasible: f_lo {} + bandwidth {} exceeds f_hi {}",
            cfg.f_lo, cfg.bandwidth, cfg.f_hi
        )));
    }
    if cfg.n_bands == 0 {
        return Err(Error::invalid("bands.n_bands", "must be at least 1"));
    }
    if cfg.bins_per_band < 2 {
        return Err(Error::invalid("bands.bins_per_band", "must be at least 2"));
    }
    let stride = (cfg.bandwidth / (cfg.bins_per_band as f64 * bin_spacing)).round() as usize;
    if stride == 0 {
        return Err(Error::Config(format!(
            "{} frequencies per band do not fit in {} Hz at {bin_spacing} Hz resolution",
            cfg.bins_per_band, cfg.bandwidth
        )));
    }
    let spacing = stride as f64 * bin_spacing;
    if (spacing * cfg.bins_per_band as f64 - cfg.bandwidth).abs() > bin_spacing + 1e-9 {
        warn!(
            "J_f·Δf = {:.1} Hz differs from the {} Hz bandwidth by more than one bin",
            spacing * cfg.bins_per_band as f64,
            cfg.bandwidth
        );
    }
    let step = if cfg.n_bands > 1 {
        (cfg.f_hi - cfg.f_lo - cfg.bandwidth) / (cfg.n_bands - 1) as f64
    } else {
        0.0
    };
    let half = (cfg.bandwidth / 2.0 / bin_spacing).round() as usize;
    let bands = (0..cfg.n_bands)
        .map(|i| {
            let start_bin = ((cfg.f_lo + i as f64 * step) / bin_spacing).round() as usize;
            let bins: Vec<usize> = (0..cfg.bins_per_band).map(|j| start_bin + j * stride).collect();
            let freqs = bins.iter().map(|b| *b as f64 * bin_spacing).collect();
            Band {
                index: i,
                start_hz: start_bin as f64 * bin_spacing,
                center_hz: (start_bin + half) as f64 * bin_spacing,
                center_bin: start_bin + half,
                bins,
                freqs,
                spacing,
            }
        })
        .collect();
    Ok(BandPlan { bands, bin_spacing })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupingConfig {
    /// Consecutive frames averaged into one SCM.
    pub frames_per_group: usize,
    /// Advance between consecutive groups, in frames.
    pub group_hop: usize,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        GroupingConfig {
            frames_per_group: 8,
            group_hop: 1,
        }
    }
}

/// Frame ranges of the SCM groups. Fewer frames than one group gives a single
/// shortened group.
pub fn group_ranges(frames: usize, cfg: &GroupingConfig) -> Result<Vec<Range<usize>>> {
    if cfg.frames_per_group == 0 {
        return Err(Error::invalid("grouping.frames_per_group", "must be at least 1"));
    }
    if cfg.group_hop == 0 {
        return Err(Error::invalid("grouping.group_hop", "must be at least 1"));
    }
    if frames == 0 {
        return Ok(Vec::new());
    }
    if frames < cfg.frames_per_group {
        warn!(
            "only {frames} frames for groups of {}; using one shortened group",
            cfg.frames_per_group
        );
        return Ok(vec![0..frames]);
    }
    Ok((0..=frames - cfg.frames_per_group)
        .step_by(cfg.group_hop)
        .map(|s| s..s + cfg.frames_per_group)
        .collect())
}

/// (1/F) Σ p pᴴ over the columns of `snapshots`.
pub fn scm(snapshots: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let f = snapshots.ncols().max(1) as f64;
    let mut r = snapshots * snapshots.adjoint();
    r /= Complex64::new(f, 0.0);
    hermitize(&mut r);
    r
}

/// Replaces `r` by (r + rᴴ)/2.
pub(crate) fn hermitize(r: &mut DMatrix<Complex64>) {
    let n = r.nrows();
    for i in 0..n {
        r[(i, i)].im = 0.0;
        for j in i + 1..n {
            let v = (r[(i, j)] + r[(j, i)].conj()) * 0.5;
            r[(i, j)] = v;
            r[(j, i)] = v.conj();
        }
    }
}

/// SCMs of one band: `groups[g][j]` is R(f_j) of group g.
#[derive(Debug, Clone)]
pub struct BandScms {
    pub band: usize,
    pub groups: Vec<Vec<DMatrix<Complex64>>>,
}

#[derive(Debug, Clone)]
pub struct ScmStack {
    pub bands: Vec<BandScms>,
}

/// SCMs at every band frequency for every frame group.
pub fn estimate_scm(
    tensor: &StftTensor,
    plan: &BandPlan,
    grouping: &GroupingConfig,
) -> Result<ScmStack> {
    let ranges = group_ranges(tensor.frames, grouping)?;
    let mut bands = Vec::with_capacity(plan.bands.len());
    for band in &plan.bands {
        if let Some(&b) = band.bins.iter().find(|&&b| b >= tensor.bins) {
            return Err(Error::Dimension(format!("band {} needs bin {b}, tensor has {}", band.index, tensor.bins)));
        }
        let per_bin: Vec<DMatrix<Complex64>> = band.bins.iter().map(|&b| tensor.bin_matrix(b)).collect();
        let groups = ranges
            .iter()
            .map(|r| {
                per_bin
                    .iter()
                    .map(|m| scm(&m.columns(r.start, r.len()).into_owned()))
                    .collect()
            })
            .collect();
        bands.push(BandScms {
            band: band.index,
            groups,
        });
    }
    Ok(ScmStack { bands })
}
