//! Statistical early-reflection model: reflection counts from the room volume,
//! randomly placed arrivals, and amplitudes fitted to an exponential decay.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::{Direction, SPEED_OF_SOUND};
use crate::error::{Error, Result};
use crate::room::{Reflection, ReflectionSet};
use crate::seeding::stream_rng;

/// How fractional per-interval counts become integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileRounding {
    /// round(N(t_{i+1})) − round(N(t_i)): totals follow N(t).
    #[default]
    Cumulative,
    /// round(N(t_{i+1}) − N(t_i)).
    PerInterval,
}

/// Level of the reflections relative to the unit direct sound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Anchor {
    /// Image-source energy rate 4πc·r²/V for a source at `meters`.
    Distance { meters: f64 },
    /// Whole reverberant tail at the given direct-to-reverberant ratio.
    Drr { db: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Estimated room volume, m³.
    pub volume: f64,
    pub t60: f64,
    /// Width of one counting interval, seconds.
    pub interval: f64,
    /// Reflections are synthesized in (0, horizon].
    pub horizon: f64,
    pub seed: u64,
    pub speed_of_sound: f64,
    pub rounding: ProfileRounding,
    pub anchor: Anchor,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            volume: 390.0,
            t60: 0.57,
            interval: 1e-3,
            horizon: 20e-3,
            seed: 0,
            speed_of_sound: SPEED_OF_SOUND,
            rounding: ProfileRounding::Cumulative,
            anchor: Anchor::Distance { meters: 2.69 },
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.volume > 0.0 && self.volume.is_finite()) {
            return Err(Error::invalid("synth.volume", "must be positive"));
        }
        if !(self.t60 > 0.0) {
            return Err(Error::invalid("synth.t60", "must be positive"));
        }
        if !(self.interval > 0.0 && self.interval.is_finite()) {
            return Err(Error::invalid("synth.interval", "must be positive"));
        }
        if !(self.horizon > self.interval && self.horizon.is_finite()) {
            return Err(Error::invalid("synth.horizon", "must exceed the interval width"));
        }
        if !(self.speed_of_sound > 0.0) {
            return Err(Error::invalid("synth.speed_of_sound", "must be positive"));
        }
        match self.anchor {
            Anchor::Distance { meters } if !(meters > 0.0 && meters.is_finite()) => {
                Err(Error::invalid("synth.anchor.meters", "must be positive"))
            }
            Anchor::Drr { db } if !db.is_finite() => Err(Error::invalid("synth.anchor.db", "must be finite")),
            Anchor::Drr { .. } if !self.t60.is_finite() => Err(Error::invalid(
                "synth.anchor",
                "DRR anchoring needs a finite T60",
            )),
            _ => Ok(()),
        }
    }

    /// Decay constant of the energy envelope: −60 dB after T60.
    pub fn alpha(&self) -> f64 {
        if self.t60.is_finite() {
            1e6f64.ln() / self.t60
        } else {
            0.0
        }
    }

    /// Reflected energy per second at t = 0, before decay.
    fn energy_rate(&self) -> f64 {
        match self.anchor {
            Anchor::Distance { meters } => 4.0 * PI * self.speed_of_sound * meters * meters / self.volume,
            Anchor::Drr { db } => self.alpha() * 10f64.powf(-db / 10.0),
        }
    }
}

/// Mean number of image sources that arrived by time `t`.
pub fn mean_reflection_count(t: f64, volume: f64, speed_of_sound: f64) -> f64 {
    4.0 * PI * (speed_of_sound * t).powi(3) / (3.0 * volume)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionProfile {
    pub interval: f64,
    pub counts: Vec<usize>,
}

impl ReflectionProfile {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

pub fn reflection_count_profile(cfg: &SynthConfig) -> Result<ReflectionProfile> {
    cfg.validate()?;
    let n = (cfg.horizon / cfg.interval - 1e-9).ceil() as usize;
    let big_n = |i: usize| mean_reflection_count(i as f64 * cfg.interval, cfg.volume, cfg.speed_of_sound);
    let counts = (0..n)
        .map(|i| match cfg.rounding {
            ProfileRounding::Cumulative => (big_n(i + 1).round() - big_n(i).round()) as usize,
            ProfileRounding::PerInterval => (big_n(i + 1) - big_n(i)).round() as usize,
        })
        .collect();
    Ok(ReflectionProfile {
        interval: cfg.interval,
        counts,
    })
}

/// Unit-amplitude reflections spread evenly inside each interval, with
/// elevation uniform on [0, π] and azimuth uniform on (−π, π].
pub fn synthesize_reflections(profile: &ReflectionProfile, direct: Direction, seed: u64) -> ReflectionSet {
    let mut rng = stream_rng(seed, "synth");
    let mut set = ReflectionSet::direct_only(direct);
    for (i, &n) in profile.counts.iter().enumerate() {
        let start = i as f64 * profile.interval;
        for m in 0..n {
            let delay = start + (m as f64 + 0.5) * profile.interval / n as f64;
            let elevation = rng.random_range(0.0..=PI);
            let azimuth = -rng.random_range(-PI..PI);
            set.reflections.push(Reflection {
                delay,
                amplitude: 1.0,
                doa: Direction::new(elevation, azimuth),
                order: 1,
            });
        }
    }
    set
}

/// Energy of the decay envelope over [start, start + width].
fn interval_energy(cfg: &SynthConfig, start: f64, width: f64) -> f64 {
    let a = cfg.alpha();
    let shape = if a * width < 1e-12 {
        width
    } else {
        -(-a * width).exp_m1() / a
    };
    cfg.energy_rate() * (-a * start).exp() * shape
}

/// Sets each reflection's amplitude so that every interval carries the decay
/// envelope's energy, split equally among its reflections. The direct sound
/// becomes 1.
pub fn fit_amplitudes(refs: &ReflectionSet, cfg: &SynthConfig) -> Result<ReflectionSet> {
    cfg.validate()?;
    let mut out = refs.clone();
    out.direct.amplitude = 1.0;
    let slot = |d: f64| (d / cfg.interval).floor().max(0.0) as usize;
    let mut counts = std::collections::BTreeMap::<usize, usize>::new();
    for r in &out.reflections {
        *counts.entry(slot(r.delay)).or_default() += 1;
    }
    for r in &mut out.reflections {
        let i = slot(r.delay);
        let energy = interval_energy(cfg, i as f64 * cfg.interval, cfg.interval);
        r.amplitude = (energy / counts[&i] as f64).sqrt();
    }
    Ok(out)
}

/// Statistical RIR with the delays and DoAs replaced by estimates.
pub fn build_estimated_rir(estimates: &ReflectionSet, cfg: &SynthConfig) -> Result<ReflectionSet> {
    let mut sorted = estimates.clone();
    sorted.sort();
    fit_amplitudes(&sorted, cfg)
}

/// Profile, random reflections and fitted amplitudes in one step.
pub fn synthesize_rir(cfg: &SynthConfig, direct: Direction) -> Result<ReflectionSet> {
    let profile = reflection_count_profile(cfg)?;
    fit_amplitudes(&synthesize_reflections(&profile, direct, cfg.seed), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rir::{render_energy_rir, render_rir, schroeder_t60};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cfg() -> SynthConfig {
        SynthConfig::default()
    }

    fn direct() -> Direction {
        Direction::new(PI / 2.0, 0.7)
    }

    #[test]
    fn count_at_twenty_ms() {
        let n = mean_reflection_count(0.02, 390.0, 343.0);
        // 4π·6.86³ / 1170
        let oracle = 4.0 * PI * 6.86f64 * 6.86 * 6.86 / 1170.0;
        assert_relative_eq!(n, oracle, epsilon = 1e-12);
        assert!((n - 3.47).abs() < 0.01);
        assert_eq!(mean_reflection_count(0.0, 390.0, 343.0), 0.0);
    }

    #[test]
    fn profile_totals() {
        let p = reflection_count_profile(&cfg()).unwrap();
        assert_eq!(p.counts.len(), 20);
        let big = mean_reflection_count(0.02, 390.0, 343.0);
        assert_eq!(p.total(), big.round() as usize);
        let per = reflection_count_profile(&SynthConfig {
            rounding: ProfileRounding::PerInterval,
            ..cfg()
        })
        .unwrap();
        assert!((per.total() as f64 - big).abs() <= per.counts.len() as f64 / 2.0);
        // every per-interval increment is below one half at V = 390
        assert_eq!(per.total(), 0);
    }

    #[test]
    fn profile_validation() {
        assert!(reflection_count_profile(&SynthConfig { horizon: 1e-3, ..cfg() }).is_err());
        assert!(reflection_count_profile(&SynthConfig { volume: 0.0, ..cfg() }).is_err());
    }

    #[test]
    fn even_placement() {
        let mut counts = vec![0; 20];
        counts[5] = 2;
        let s = synthesize_reflections(&ReflectionProfile { interval: 1e-3, counts }, direct(), 1);
        let d: Vec<f64> = s.reflections.iter().map(|r| r.delay).collect();
        assert_relative_eq!(d[0], 5.25e-3, epsilon = 1e-15);
        assert_relative_eq!(d[1], 5.75e-3, epsilon = 1e-15);
        let none = synthesize_reflections(&ReflectionProfile { interval: 1e-3, counts: vec![0; 20] }, direct(), 1);
        assert!(none.reflections.is_empty());
    }

    #[test]
    fn elevation_is_uniform() {
        let p = ReflectionProfile { interval: 1.0, counts: vec![10_000] };
        let s = synthesize_reflections(&p, direct(), 3);
        let bins = 10;
        let mut h = vec![0.0; bins];
        for r in &s.reflections {
            h[((r.doa.elevation / PI * bins as f64) as usize).min(bins - 1)] += 1.0;
            assert!(r.doa.azimuth > -PI - 1e-12 && r.doa.azimuth <= PI + 1e-12);
        }
        let e = 1000.0;
        let chi2: f64 = h.iter().map(|o| (o - e) * (o - e) / e).sum();
        // χ²(9) at p = 0.01
        assert!(chi2 < 21.67, "chi2 {chi2}");
    }

    #[test]
    fn synthesis_is_seeded() {
        let a = synthesize_rir(&cfg(), direct()).unwrap();
        assert_eq!(a, synthesize_rir(&cfg(), direct()).unwrap());
        let b = synthesize_rir(&SynthConfig { seed: 1, ..cfg() }, direct()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn schroeder_round_trip() {
        // 200 ms must cover the -25 dB end of the T20 fit, so T60 ≤ 0.3 s
        let c = SynthConfig {
            t60: 0.3,
            horizon: 0.2,
            ..cfg()
        };
        let s = synthesize_rir(&c, direct()).unwrap();
        // late arrivals share samples: sum their energies
        let ir = render_energy_rir(&s, 16_000.0, 0.21);
        let t = schroeder_t60(&ir).unwrap();
        assert!((t - 0.3).abs() <= 0.15 * 0.3, "T60 {t}");
    }

    #[test]
    fn infinite_t60_gives_equal_interval_energy() {
        let c = SynthConfig { t60: f64::INFINITY, ..cfg() };
        let e: Vec<f64> = (0..20).map(|i| interval_energy(&c, i as f64 * 1e-3, 1e-3)).collect();
        for v in &e {
            assert_relative_eq!(*v, e[0], max_relative = 1e-12);
        }
        assert!(SynthConfig { t60: f64::INFINITY, anchor: Anchor::Drr { db: 0.0 }, ..cfg() }.validate().is_err());
    }

    #[test]
    fn energy_splits_within_interval() {
        let one = ReflectionProfile { interval: 1e-3, counts: vec![0, 0, 1] };
        let two = ReflectionProfile { interval: 1e-3, counts: vec![0, 0, 2] };
        let a = fit_amplitudes(&synthesize_reflections(&one, direct(), 0), &cfg()).unwrap();
        let b = fit_amplitudes(&synthesize_reflections(&two, direct(), 0), &cfg()).unwrap();
        assert_relative_eq!(b.reflections[0].amplitude, a.reflections[0].amplitude / 2f64.sqrt(), max_relative = 1e-12);
        assert_relative_eq!(b.reflections[0].amplitude, b.reflections[1].amplitude);
        assert_eq!(a.direct.amplitude, 1.0);
    }

    #[test]
    fn drr_anchor_matches_tail_energy() {
        let c = SynthConfig {
            anchor: Anchor::Drr { db: 3.0 },
            horizon: 3.0,
            interval: 1e-3,
            ..cfg()
        };
        let total: f64 = (0..3000).map(|i| interval_energy(&c, i as f64 * 1e-3, 1e-3)).sum();
        assert_relative_eq!(10.0 * (1.0 / total).log10(), 3.0, epsilon = 1e-6);
    }

    #[test]
    fn estimated_rir_passes_delays_through() {
        let truth = synthesize_rir(&SynthConfig { volume: 60.0, ..cfg() }, direct()).unwrap();
        let est = build_estimated_rir(&truth, &cfg()).unwrap();
        assert_eq!(est.reflections.len(), truth.reflections.len());
        for (a, b) in est.reflections.iter().zip(&truth.reflections) {
            assert_eq!(a.delay, b.delay);
            assert_eq!(a.doa, b.doa);
        }
        let empty = build_estimated_rir(&ReflectionSet::direct_only(direct()), &cfg()).unwrap();
        assert!(empty.reflections.is_empty());
        assert_eq!(empty.direct.amplitude, 1.0);
    }

    #[test]
    fn rendered_support_matches_delays() {
        let truth = synthesize_rir(&SynthConfig { volume: 60.0, ..cfg() }, direct()).unwrap();
        let fs = 16_000.0;
        let ir = render_rir(&truth, fs, 0.02 + 2.0 / fs);
        let taps: Vec<usize> = ir
            .samples
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
            .collect();
        let mut expected: Vec<usize> = truth.reflections.iter().map(|r| (r.delay * fs).round() as usize).collect();
        expected.dedup();
        assert_eq!(taps, expected);
    }

    proptest! {
        #[test]
        fn profile_is_monotone_and_in_range(volume in 30.0f64..2000.0, horizon_ms in 2u32..60) {
            let c = SynthConfig { volume, horizon: horizon_ms as f64 * 1e-3, ..SynthConfig::default() };
            let p = reflection_count_profile(&c).unwrap();
            let mut acc = 0usize;
            for (i, n) in p.counts.iter().enumerate() {
                acc += n;
                let big = mean_reflection_count((i + 1) as f64 * 1e-3, volume, 343.0);
                prop_assert!((acc as f64 - big).abs() <= 0.5 + 1e-9);
            }
            let s = synthesize_reflections(&p, Direction::new(1.0, 0.0), 5);
            prop_assert!(s.reflections.iter().all(|r| r.delay > 0.0 && r.delay <= c.horizon));
            prop_assert!(s.reflections.windows(2).all(|w| w[0].delay <= w[1].delay));
        }

        #[test]
        fn early_energy_ignores_split(n1 in 1usize..6, n2 in 1usize..6) {
            let c = SynthConfig::default();
            let energy = |n: usize| {
                let p = ReflectionProfile { interval: 1e-3, counts: vec![0, 0, 0, n] };
                let s = fit_amplitudes(&synthesize_reflections(&p, Direction::new(1.0, 0.0), 0), &c).unwrap();
                s.reflections.iter().map(|r| r.amplitude * r.amplitude).sum::<f64>()
            };
            prop_assert!((energy(n1) - energy(n2)).abs() < 1e-12);
        }
    }
}
