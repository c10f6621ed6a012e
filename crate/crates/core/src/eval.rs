//! Matching against ground truth, detection metrics, and the Monte Carlo
//! campaign over the four simulated rooms.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{ArrayGeometry, Direction};
use crate::clustering::{collapse_to_azimuth, estimate_reflections, ClusterConfig, EstimateSet};
use crate::error::{Error, Result};
use crate::focusing::{build_focusing, load_or_build, FocusingOperator};
use crate::grid::{make_direction_grid, DirectionGrid, GridScheme};
use crate::phalcor::{detect_candidates, Detection, DetectionCandidate, DetectorConfig, DetectorSetup};
use crate::room::{image_sources, sample_placement, PlacementRules, Reflection, ReflectionSet, RoomPreset};
use crate::scene::{MultichannelSignal, SceneConfig, SourceSignal};
use crate::seeding::{scene_seed, stream_rng};
use crate::stft::{band_plan, stft, BandPlan, BandPlanConfig, GroupingConfig, StftConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchMode {
    /// Great-circle angle between directions.
    Full,
    /// Estimates carry azimuth only: the angle from the truth to the
    /// half-plane of all directions at the estimated azimuth.
    Azimuth,
    /// Elevations folded into the upper hemisphere before comparing.
    Mirror,
}

impl MatchMode {
    pub fn parse(label: &str) -> Result<Self> {
        match label {
            "full" => Ok(MatchMode::Full),
            "azimuth" | "azimuth-only" => Ok(MatchMode::Azimuth),
            "mirror" | "mirror-corrected" => Ok(MatchMode::Mirror),
            other => Err(Error::Config(format!("unknown match mode `{other}`"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            MatchMode::Full => "full",
            MatchMode::Azimuth => "azimuth",
            MatchMode::Mirror => "mirror",
        }
    }

    /// Angular error of `estimate` against `truth`. Never exceeds the full
    /// great-circle angle.
    pub fn angle(&self, estimate: &Direction, truth: &Direction) -> f64 {
        match self {
            MatchMode::Full => estimate.angle_to(truth),
            MatchMode::Azimuth => meridian_distance(estimate.azimuth, truth),
            MatchMode::Mirror => fold(estimate).angle_to(&fold(truth)),
        }
    }
}

/// Angle between `d` and the closed half-plane of directions at `azimuth`
/// (poles included).
pub fn meridian_distance(azimuth: f64, d: &Direction) -> f64 {
    let da = crate::array::wrap_angle(d.azimuth - azimuth).abs();
    if da <= std::f64::consts::FRAC_PI_2 {
        (d.elevation.sin() * da.sin()).clamp(-1.0, 1.0).asin()
    } else {
        d.elevation.min(std::f64::consts::PI - d.elevation)
    }
}

fn fold(d: &Direction) -> Direction {
    Direction::new(d.elevation.min(std::f64::consts::PI - d.elevation), d.azimuth)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub delay_tol: f64,
    pub angle_tol_deg: f64,
    pub mode: MatchMode,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            delay_tol: 0.5e-3,
            angle_tol_deg: 15.0,
            mode: MatchMode::Full,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delay_tol > 0.0) {
            return Err(Error::invalid("matching.delay_tol", "must be positive"));
        }
        if !(self.angle_tol_deg > 0.0) {
            return Err(Error::invalid("matching.angle_tol_deg", "must be positive"));
        }
        Ok(())
    }

    /// Normalized distance, or `None` when either tolerance is exceeded.
    /// Boundary values match.
    pub fn distance(&self, est_delay: f64, est_doa: &Direction, truth: &Reflection) -> Option<f64> {
        const SLACK: f64 = 1e-12;
        let dt = (est_delay - truth.delay).abs();
        let da = self.mode.angle(est_doa, &truth.doa);
        let tol_a = self.angle_tol_deg.to_radians();
        if dt > self.delay_tol * (1.0 + SLACK) + SLACK * 1e-3 || da > tol_a * (1.0 + SLACK) + SLACK {
            return None;
        }
        Some((dt / self.delay_tol).hypot(da / tol_a))
    }
}

/// One-to-one assignment of estimates to ground-truth reflections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// For each estimate, the index of its truth reflection.
    pub estimate_match: Vec<Option<usize>>,
    /// For each truth reflection, the index of its estimate.
    pub truth_match: Vec<Option<usize>>,
}

impl Matching {
    pub fn true_positives(&self) -> usize {
        self.estimate_match.iter().flatten().count()
    }
}

/// Estimates in delay order each claim the nearest unclaimed truth within
/// both tolerances; ties go to the earlier truth.
pub fn match_reflections(estimates: &EstimateSet, truth: &ReflectionSet, cfg: &MatchConfig) -> Matching {
    let mut order: Vec<usize> = (0..estimates.len()).collect();
    order.sort_by(|&a, &b| {
        estimates.estimates[a]
            .delay
            .total_cmp(&estimates.estimates[b].delay)
            .then(a.cmp(&b))
    });
    let mut m = Matching {
        estimate_match: vec![None; estimates.len()],
        truth_match: vec![None; truth.reflections.len()],
    };
    for e in order {
        let est = &estimates.estimates[e];
        let mut best: Option<(f64, usize)> = None;
        for (t, r) in truth.reflections.iter().enumerate() {
            if m.truth_match[t].is_some() {
                continue;
            }
            if let Some(d) = cfg.distance(est.delay, &est.doa, r) {
                if best.is_none_or(|b| d < b.0) {
                    best = Some((d, t));
                }
            }
        }
        if let Some((_, t)) = best {
            m.truth_match[t] = Some(e);
            m.estimate_match[e] = Some(t);
        }
    }
    m
}

/// Size of a maximum one-to-one matching by exhaustive search; intended for
/// at most 8 estimates and 8 truths.
pub fn optimal_match_count(estimates: &EstimateSet, truth: &ReflectionSet, cfg: &MatchConfig) -> usize {
    let ok: Vec<Vec<bool>> = estimates
        .estimates
        .iter()
        .map(|e| {
            truth
                .reflections
                .iter()
                .map(|r| cfg.distance(e.delay, &e.doa, r).is_some())
                .collect()
        })
        .collect();
    fn go(i: usize, ok: &[Vec<bool>], used: &mut Vec<bool>) -> usize {
        if i == ok.len() {
            return 0;
        }
        let mut best = go(i + 1, ok, used);
        for t in 0..used.len() {
            if ok[i][t] && !used[t] {
                used[t] = true;
                best = best.max(1 + go(i + 1, ok, used));
                used[t] = false;
            }
        }
        best
    }
    go(0, &ok, &mut vec![false; truth.reflections.len()])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub true_positives: usize,
    pub false_positives: usize,
    pub truth_count: usize,
    pub detected_count: usize,
    /// Undefined without ground-truth reflections.
    pub p_d: Option<f64>,
    /// Zero when nothing was detected; see `no_detections`.
    pub p_fa: f64,
    pub p_m: Option<f64>,
    pub no_detections: bool,
}

pub fn compute_metrics(m: &Matching) -> SceneMetrics {
    let tp = m.true_positives();
    let detected = m.estimate_match.len();
    let truth = m.truth_match.len();
    let p_d = (truth > 0).then(|| tp as f64 / truth as f64);
    SceneMetrics {
        true_positives: tp,
        false_positives: detected - tp,
        truth_count: truth,
        detected_count: detected,
        p_d,
        p_fa: if detected > 0 { (detected - tp) as f64 / detected as f64 } else { 0.0 },
        p_m: p_d.map(|p| 1.0 - p),
        no_detections: detected == 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthOutcome {
    pub delay: f64,
    pub amplitude: f64,
    pub matched: bool,
    /// Missed while an estimate matched to another reflection lies within
    /// tolerance of it: the two were merged into one cluster.
    pub merged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateOutcome {
    pub delay: f64,
    pub true_positive: bool,
}

pub fn outcomes(
    estimates: &EstimateSet,
    truth: &ReflectionSet,
    m: &Matching,
    cfg: &MatchConfig,
) -> (Vec<TruthOutcome>, Vec<EstimateOutcome>) {
    let t = truth
        .reflections
        .iter()
        .zip(&m.truth_match)
        .map(|(r, hit)| {
            let merged = hit.is_none()
                && estimates
                    .estimates
                    .iter()
                    .zip(&m.estimate_match)
                    .any(|(e, em)| em.is_some() && cfg.distance(e.delay, &e.doa, r).is_some());
            TruthOutcome {
                delay: r.delay,
                amplitude: r.amplitude,
                matched: hit.is_some(),
                merged,
            }
        })
        .collect();
    let e = estimates
        .estimates
        .iter()
        .zip(&m.estimate_match)
        .map(|(e, hit)| EstimateOutcome {
            delay: e.delay,
            true_positive: hit.is_some(),
        })
        .collect();
    (t, e)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub points: usize,
    pub scheme: GridScheme,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            points: 900,
            scheme: GridScheme::Fibonacci,
        }
    }
}

/// Everything the estimator needs besides the array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub stft: StftConfig,
    pub bands: BandPlanConfig,
    pub grid: GridConfig,
    pub grouping: GroupingConfig,
    pub detector: DetectorConfig,
    pub clustering: ClusterConfig,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            stft: StftConfig::default(),
            bands: BandPlanConfig::default(),
            grid: GridConfig::default(),
            grouping: GroupingConfig::default(),
            detector: DetectorConfig::default(),
            clustering: ClusterConfig::default(),
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.detector.validate()?;
        self.clustering.validate()?;
        if self.grid.points < 2 {
            return Err(Error::invalid("grid.points", "need at least 2 directions"));
        }
        if self.grouping.frames_per_group == 0 {
            return Err(Error::invalid("grouping.frames_per_group", "must be at least 1"));
        }
        if self.grouping.group_hop == 0 {
            return Err(Error::invalid("grouping.group_hop", "must be at least 1"));
        }
        Ok(())
    }
}

/// The estimator prepared for one array: band plan, grid and focusing
/// matrices.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub array: ArrayGeometry,
    pub estimator: EstimatorConfig,
    pub fs: f64,
    pub plan: BandPlan,
    pub grid: DirectionGrid,
    pub focusing: FocusingOperator,
}

impl Pipeline {
    /// Builds the focusing operator, or loads it from `cache_dir`.
    pub fn new(
        array: ArrayGeometry,
        estimator: EstimatorConfig,
        fs: f64,
        cache_dir: Option<&Path>,
    ) -> Result<Self> {
        estimator.validate()?;
        array.validate()?;
        let bin_spacing = fs / estimator.stft.window_len(fs) as f64;
        let plan = band_plan(&estimator.bands, bin_spacing)?;
        let grid = make_direction_grid(estimator.grid.points, estimator.grid.scheme)?;
        let focusing = match cache_dir {
            Some(dir) => load_or_build(dir, &array, &plan, &grid)?,
            None => build_focusing(&array, &plan, &grid)?,
        };
        Ok(Pipeline {
            array,
            estimator,
            fs,
            plan,
            grid,
            focusing,
        })
    }

    pub fn detect(&self, signals: &MultichannelSignal) -> Result<Detection> {
        if (signals.fs - self.fs).abs() > 1e-9 {
            return Err(Error::Dimension(format!(
                "signal sampled at {} Hz, pipeline built for {} Hz",
                signals.fs, self.fs
            )));
        }
        let tensor = stft(signals, &self.estimator.stft)?;
        let setup = DetectorSetup::new(
            &self.array,
            &self.plan,
            &self.focusing,
            &self.grid,
            self.estimator.grouping,
            self.estimator.detector,
        )?;
        detect_candidates(&tensor, &setup)
    }
}

/// A clustering and matching setting evaluated on shared detector output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub cluster: ClusterConfig,
    pub matching: MatchConfig,
}

/// The configured variant first, then sub-clustering on and off, azimuth-only
/// scoring and mirror-corrected scoring of the configured clustering.
pub fn standard_variants(cluster: &ClusterConfig, matching: &MatchConfig) -> Vec<Variant> {
    let primary = Variant {
        label: "primary".into(),
        cluster: cluster.clone(),
        matching: *matching,
    };
    let full = |sub: bool| ClusterConfig {
        subcluster: sub,
        azimuth_only: false,
        ..cluster.clone()
    };
    let with = |mode| MatchConfig { mode, ..*matching };
    vec![
        primary,
        Variant {
            label: "subcluster".into(),
            cluster: full(true),
            matching: with(MatchMode::Full),
        },
        Variant {
            label: "no-subcluster".into(),
            cluster: full(false),
            matching: with(MatchMode::Full),
        },
        Variant {
            label: "azimuth".into(),
            cluster: cluster.clone(),
            matching: with(MatchMode::Azimuth),
        },
        Variant {
            label: "mirror".into(),
            cluster: full(cluster.subcluster),
            matching: with(MatchMode::Mirror),
        },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantOutcome {
    pub label: String,
    pub estimates: EstimateSet,
    pub matching: Matching,
    pub metrics: SceneMetrics,
    pub truth_outcomes: Vec<TruthOutcome>,
    pub estimate_outcomes: Vec<EstimateOutcome>,
}

pub fn evaluate_candidates(
    candidates: &[DetectionCandidate],
    cells: usize,
    truth: &ReflectionSet,
    variant: &Variant,
) -> VariantOutcome {
    let mut estimates = estimate_reflections(candidates, cells, &variant.cluster);
    if variant.matching.mode == MatchMode::Azimuth && !estimates.azimuth_only {
        estimates = collapse_to_azimuth(&estimates);
    }
    let matching = match_reflections(&estimates, truth, &variant.matching);
    let metrics = compute_metrics(&matching);
    let (truth_outcomes, estimate_outcomes) = outcomes(&estimates, truth, &matching, &variant.matching);
    VariantOutcome {
        label: variant.label.clone(),
        estimates,
        matching,
        metrics,
        truth_outcomes,
        estimate_outcomes,
    }
}

#[derive(Debug, Clone)]
pub struct SceneResult {
    pub truth: ReflectionSet,
    pub drr_db: f64,
    pub detection: Detection,
    /// Angle between the estimated and true direct-sound DoA, degrees.
    pub direct_error_deg: Option<f64>,
    pub variants: Vec<VariantOutcome>,
}

/// Simulates, detects, clusters and scores one scene.
pub fn run_scene(scene: &SceneConfig, pipeline: &Pipeline, variants: &[Variant]) -> Result<SceneResult> {
    let sim = scene.simulate()?;
    evaluate_recording(&sim.signals, &sim.truth, sim.drr_db, pipeline, variants)
}

/// Detection and scoring of an existing recording.
pub fn evaluate_recording(
    signals: &MultichannelSignal,
    truth: &ReflectionSet,
    drr_db: f64,
    pipeline: &Pipeline,
    variants: &[Variant],
) -> Result<SceneResult> {
    let detection = pipeline.detect(signals)?;
    let direct_error_deg = Some(detection.direct_doa.angle_to(&truth.direct.doa).to_degrees());
    let variants = variants
        .iter()
        .map(|v| evaluate_candidates(&detection.candidates, detection.cells, truth, v))
        .collect();
    Ok(SceneResult {
        truth: truth.clone(),
        drr_db,
        detection,
        direct_error_deg,
        variants,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub n_scenes: usize,
    /// Room presets drawn with equal probability.
    pub rooms: Vec<u8>,
    pub seed: u64,
    pub array: String,
    pub drr_range: [f64; 2],
    /// Ground truth keeps reflections up to this delay.
    pub truncation: f64,
    /// Image sources up to this delay are simulated.
    pub max_delay: f64,
    pub max_attempts: usize,
    pub max_skip_fraction: f64,
    pub noise_level: f64,
    pub fs: f64,
    pub source: SourceSignal,
    pub placement: PlacementRules,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            n_scenes: 300,
            rooms: vec![1, 2, 3, 4],
            seed: 0,
            array: "em32".into(),
            drr_range: [-10.0, 10.0],
            truncation: 0.02,
            max_delay: 0.1,
            max_attempts: 50,
            max_skip_fraction: 0.1,
            noise_level: 0.0,
            fs: 16_000.0,
            source: SourceSignal::default(),
            placement: PlacementRules::default(),
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_scenes == 0 {
            return Err(Error::invalid("campaign.n_scenes", "must be at least 1"));
        }
        if self.rooms.is_empty() {
            return Err(Error::invalid("campaign.rooms", "no rooms selected"));
        }
        for &id in &self.rooms {
            RoomPreset::by_id(id).map_err(|_| Error::invalid("campaign.rooms", format!("unknown room {id}")))?;
        }
        if !(self.drr_range[0] <= self.drr_range[1]) {
            return Err(Error::invalid("campaign.drr_range", "lower bound exceeds upper bound"));
        }
        if !(self.truncation > 0.0 && self.max_delay >= self.truncation) {
            return Err(Error::invalid("campaign.max_delay", "must be at least the truncation"));
        }
        if self.max_attempts == 0 {
            return Err(Error::invalid("campaign.max_attempts", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.max_skip_fraction) {
            return Err(Error::invalid("campaign.max_skip_fraction", "must lie in [0, 1]"));
        }
        if !(self.noise_level >= 0.0) {
            return Err(Error::invalid("campaign.noise_level", "must be non-negative"));
        }
        if !(self.fs > 0.0) {
            return Err(Error::invalid("campaign.fs", "must be positive"));
        }
        Ok(())
    }
}

/// A sampled campaign scene with its precomputed arrivals.
#[derive(Debug, Clone)]
pub struct SampledScene {
    pub index: usize,
    pub room_id: u8,
    pub scene: SceneConfig,
    pub arrivals: ReflectionSet,
    pub drr_db: f64,
    pub attempts: usize,
}

/// Draws the room, then placements until the DRR lies in range. The draw
/// depends only on the campaign seed and the scene index.
pub fn sample_scene(cfg: &CampaignConfig, index: usize, array: &ArrayGeometry) -> Result<SampledScene> {
    let seed = scene_seed(cfg.seed, index);
    let mut rng = stream_rng(seed, "placement");
    let room_id = cfg.rooms[rng.random_range(0..cfg.rooms.len())];
    let room = RoomPreset::by_id(room_id)?.room()?;
    let mut last = f64::NAN;
    for attempt in 1..=cfg.max_attempts {
        let p = sample_placement(&room, &cfg.placement, &mut rng)?;
        let scene = SceneConfig {
            room: room.clone(),
            source_pos: p.source,
            array_pos: p.array,
            array: array.clone(),
            source: cfg.source.clone(),
            noise_level: cfg.noise_level,
            seed,
            fs: cfg.fs,
            max_delay: cfg.max_delay,
            truth_horizon: cfg.truncation,
        };
        let arrivals = image_sources(&room, &p.source, &p.array, cfg.max_delay)?;
        let drr_db = scene.drr_db(&arrivals)?;
        last = drr_db;
        if drr_db >= cfg.drr_range[0] && drr_db <= cfg.drr_range[1] {
            return Ok(SampledScene {
                index,
                room_id,
                scene,
                arrivals,
                drr_db,
                attempts: attempt,
            });
        }
    }
    Err(Error::SceneGeneration(format!(
        "scene {index}: DRR outside [{}, {}] dB after {} attempts (last {last:.1} dB)",
        cfg.drr_range[0], cfg.drr_range[1], cfg.max_attempts
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRow {
    pub scene: usize,
    pub seed: u64,
    pub room: u8,
    pub array: String,
    pub variant: String,
    pub drr_db: f64,
    pub candidates: usize,
    pub direct_error_deg: Option<f64>,
    pub truth_count: usize,
    pub detected_count: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub p_d: Option<f64>,
    pub p_fa: f64,
    pub p_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthOutcomeRow {
    pub scene: usize,
    pub variant: String,
    pub truth_count: usize,
    pub delay_s: f64,
    pub amplitude: f64,
    pub matched: bool,
    pub merged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateOutcomeRow {
    pub scene: usize,
    pub variant: String,
    pub truth_count: usize,
    pub delay_s: f64,
    pub true_positive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedScene {
    pub scene: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub scenes: usize,
    pub mean_p_d: Option<f64>,
    pub std_p_d: Option<f64>,
    pub mean_p_fa: f64,
    pub std_p_fa: f64,
    pub mean_p_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub array: String,
    pub seed: u64,
    pub n_scenes: usize,
    pub completed: usize,
    pub skipped: Vec<SkippedScene>,
    pub summaries: Vec<VariantSummary>,
    pub rows: Vec<SceneRow>,
    pub truth_outcomes: Vec<TruthOutcomeRow>,
    pub estimate_outcomes: Vec<EstimateOutcomeRow>,
}

fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

/// Mean and standard deviation of the per-scene rows of one variant.
pub fn summarize(rows: &[SceneRow], variant: &str) -> VariantSummary {
    let sel: Vec<&SceneRow> = rows.iter().filter(|r| r.variant == variant).collect();
    let pd: Vec<f64> = sel.iter().filter_map(|r| r.p_d).collect();
    let pfa: Vec<f64> = sel.iter().map(|r| r.p_fa).collect();
    let (mean_p_d, std_p_d) = match mean_std(&pd) {
        Some((m, s)) => (Some(m), Some(s)),
        None => (None, None),
    };
    let (mean_p_fa, std_p_fa) = mean_std(&pfa).unwrap_or((0.0, 0.0));
    VariantSummary {
        variant: variant.to_string(),
        scenes: sel.len(),
        mean_p_d,
        std_p_d,
        mean_p_fa,
        std_p_fa,
        mean_p_m: mean_p_d.map(|p| 1.0 - p),
    }
}

impl CampaignReport {
    pub fn summary(&self, variant: &str) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.variant == variant)
    }

    /// Report restricted to scenes accepted by `keep`, with summaries
    /// recomputed.
    pub fn filtered(&self, keep: impl Fn(&SceneRow) -> bool) -> CampaignReport {
        let scenes: std::collections::BTreeSet<usize> =
            self.rows.iter().filter(|r| keep(r)).map(|r| r.scene).collect();
        let rows: Vec<SceneRow> = self.rows.iter().filter(|r| scenes.contains(&r.scene)).cloned().collect();
        let summaries = self.summaries.iter().map(|s| summarize(&rows, &s.variant)).collect();
        CampaignReport {
            array: self.array.clone(),
            seed: self.seed,
            n_scenes: self.n_scenes,
            completed: scenes.len(),
            skipped: self.skipped.clone(),
            summaries,
            rows,
            truth_outcomes: self
                .truth_outcomes
                .iter()
                .filter(|r| scenes.contains(&r.scene))
                .cloned()
                .collect(),
            estimate_outcomes: self
                .estimate_outcomes
                .iter()
                .filter(|r| scenes.contains(&r.scene))
                .cloned()
                .collect(),
        }
    }
}

struct SceneRecord {
    rows: Vec<SceneRow>,
    truth: Vec<TruthOutcomeRow>,
    estimates: Vec<EstimateOutcomeRow>,
}

fn run_campaign_scene(
    cfg: &CampaignConfig,
    index: usize,
    pipeline: &Pipeline,
    variants: &[Variant],
) -> Result<SceneRecord> {
    let sampled = sample_scene(cfg, index, &pipeline.array)?;
    let sim = sampled.scene.simulate_with(sampled.arrivals)?;
    let result = evaluate_recording(&sim.signals, &sim.truth, sim.drr_db, pipeline, variants)?;
    let n_truth = result.truth.reflections.len();
    let mut rec = SceneRecord {
        rows: Vec::new(),
        truth: Vec::new(),
        estimates: Vec::new(),
    };
    for v in &result.variants {
        let m = &v.metrics;
        rec.rows.push(SceneRow {
            scene: index,
            seed: sampled.scene.seed,
            room: sampled.room_id,
            array: pipeline.array.label.clone(),
            variant: v.label.clone(),
            drr_db: result.drr_db,
            candidates: result.detection.candidates.len(),
            direct_error_deg: result.direct_error_deg,
            truth_count: n_truth,
            detected_count: m.detected_count,
            true_positives: m.true_positives,
            false_positives: m.false_positives,
            p_d: m.p_d,
            p_fa: m.p_fa,
            p_m: m.p_m,
        });
        rec.truth.extend(v.truth_outcomes.iter().map(|t| TruthOutcomeRow {
            scene: index,
            variant: v.label.clone(),
            truth_count: n_truth,
            delay_s: t.delay,
            amplitude: t.amplitude,
            matched: t.matched,
            merged: t.merged,
        }));
        rec.estimates.extend(v.estimate_outcomes.iter().map(|e| EstimateOutcomeRow {
            scene: index,
            variant: v.label.clone(),
            truth_count: n_truth,
            delay_s: e.delay,
            true_positive: e.true_positive,
        }));
    }
    Ok(rec)
}

/// Runs every scene (in parallel on the current rayon pool) and aggregates in
/// scene order. Scenes whose generation fails are skipped; the campaign fails
/// when more than `max_skip_fraction` of them are.
pub fn run_campaign(cfg: &CampaignConfig, pipeline: &Pipeline, variants: &[Variant]) -> Result<CampaignReport> {
    cfg.validate()?;
    if variants.is_empty() {
        return Err(Error::Config("no evaluation variants".into()));
    }
    let results: Vec<Result<SceneRecord>> = (0..cfg.n_scenes)
        .into_par_iter()
        .map(|i| run_campaign_scene(cfg, i, pipeline, variants))
        .collect();
    let mut report = CampaignReport {
        array: pipeline.array.label.clone(),
        seed: cfg.seed,
        n_scenes: cfg.n_scenes,
        completed: 0,
        skipped: Vec::new(),
        summaries: Vec::new(),
        rows: Vec::new(),
        truth_outcomes: Vec::new(),
        estimate_outcomes: Vec::new(),
    };
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(rec) => {
                report.completed += 1;
                report.rows.extend(rec.rows);
                report.truth_outcomes.extend(rec.truth);
                report.estimate_outcomes.extend(rec.estimates);
            }
            Err(e @ Error::SceneGeneration(_)) => {
                log::warn!("skipping scene {i}: {e}");
                report.skipped.push(SkippedScene {
                    scene: i,
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    if report.skipped.len() as f64 > cfg.max_skip_fraction * cfg.n_scenes as f64 {
        return Err(Error::Campaign(format!(
            "{} of {} scenes skipped",
            report.skipped.len(),
            cfg.n_scenes
        )));
    }
    report.summaries = variants.iter().map(|v| summarize(&report.rows, &v.label)).collect();
    Ok(report)
}

/// One bin of a binned analysis. `rate` is null for empty bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub events: usize,
    pub rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountBin {
    pub lo: f64,
    pub hi: f64,
    pub scenes: usize,
    pub mean_p_d: Option<f64>,
    pub mean_p_fa: Option<f64>,
    pub reflections: usize,
    pub misses: usize,
    /// Fraction of the bin's reflections that were missed because they were
    /// merged with another reflection.
    pub merged_miss_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinTables {
    pub variant: String,
    /// Misses over reflections, amplitude bins of width 0.1.
    pub miss_vs_amplitude: Vec<Bin>,
    /// Misses over reflections, delay bins of width 2 ms.
    pub miss_vs_delay: Vec<Bin>,
    /// False positives over estimates, delay bins of width 2 ms.
    pub false_positives_vs_delay: Vec<Bin>,
    pub by_reflection_count: Vec<CountBin>,
}

fn fixed_bins(width: f64, n: usize, items: impl Iterator<Item = (f64, bool)>) -> Vec<Bin> {
    let mut bins: Vec<Bin> = (0..n)
        .map(|i| Bin {
            lo: i as f64 * width,
            hi: (i + 1) as f64 * width,
            count: 0,
            events: 0,
            rate: None,
        })
        .collect();
    for (x, event) in items {
        let i = ((x / width).floor().max(0.0) as usize).min(n - 1);
        bins[i].count += 1;
        bins[i].events += usize::from(event);
    }
    for b in &mut bins {
        b.rate = (b.count > 0).then(|| b.events as f64 / b.count as f64);
    }
    bins
}

/// Binned analyses of one variant of a campaign.
pub fn bin_analysis(report: &CampaignReport, variant: &str, horizon: f64) -> BinTables {
    let truth: Vec<&TruthOutcomeRow> = report.truth_outcomes.iter().filter(|t| t.variant == variant).collect();
    let ests: Vec<&EstimateOutcomeRow> = report.estimate_outcomes.iter().filter(|e| e.variant == variant).collect();
    let delay_bins = ((horizon / 2e-3).ceil() as usize).max(1);
    let miss_vs_amplitude = fixed_bins(0.1, 10, truth.iter().map(|t| (t.amplitude, !t.matched)));
    let miss_vs_delay = fixed_bins(2e-3, delay_bins, truth.iter().map(|t| (t.delay_s, !t.matched)));
    let false_positives_vs_delay = fixed_bins(2e-3, delay_bins, ests.iter().map(|e| (e.delay_s, !e.true_positive)));

    let rows: Vec<&SceneRow> = report.rows.iter().filter(|r| r.variant == variant).collect();
    let mut by_reflection_count = Vec::new();
    if let (Some(lo), Some(hi)) = (
        rows.iter().map(|r| r.truth_count).min(),
        rows.iter().map(|r| r.truth_count).max(),
    ) {
        let (lo, hi) = (lo as f64, hi as f64);
        let width = ((hi - lo) / 5.0).max(f64::MIN_POSITIVE);
        let index = |n: usize| (((n as f64 - lo) / width).floor() as usize).min(4);
        for b in 0..5 {
            let in_bin: Vec<&&SceneRow> = rows.iter().filter(|r| index(r.truth_count) == b).collect();
            let scenes: std::collections::BTreeSet<usize> = in_bin.iter().map(|r| r.scene).collect();
            let pd: Vec<f64> = in_bin.iter().filter_map(|r| r.p_d).collect();
            let pfa: Vec<f64> = in_bin.iter().map(|r| r.p_fa).collect();
            let refl: Vec<&&TruthOutcomeRow> = truth.iter().filter(|t| scenes.contains(&t.scene)).collect();
            let merged = refl.iter().filter(|t| t.merged).count();
            by_reflection_count.push(CountBin {
                lo: lo + b as f64 * width,
                hi: lo + (b + 1) as f64 * width,
                scenes: scenes.len(),
                mean_p_d: mean_std(&pd).map(|m| m.0),
                mean_p_fa: mean_std(&pfa).map(|m| m.0),
                reflections: refl.len(),
                misses: refl.iter().filter(|t| !t.matched).count(),
                merged_miss_fraction: (!refl.is_empty()).then(|| merged as f64 / refl.len() as f64),
            });
        }
    }
    BinTables {
        variant: variant.to_string(),
        miss_vs_amplitude,
        miss_vs_delay,
        false_positives_vs_delay,
        by_reflection_count,
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    Ok(csv::Reader::from_path(path)?
        .into_deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CampaignSummaryFile {
    array: String,
    seed: u64,
    n_scenes: usize,
    completed: usize,
    skipped: Vec<SkippedScene>,
    summaries: Vec<VariantSummary>,
}

pub const SUMMARY_FILE: &str = "summary.json";
pub const ROWS_FILE: &str = "scenes.csv";
pub const TRUTH_OUTCOMES_FILE: &str = "truth_outcomes.csv";
pub const ESTIMATE_OUTCOMES_FILE: &str = "estimate_outcomes.csv";

/// Writes the JSON summary and the per-scene and per-reflection CSVs;
/// returns the written paths.
pub fn write_campaign(dir: &Path, report: &CampaignReport) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let summary = CampaignSummaryFile {
        array: report.array.clone(),
        seed: report.seed,
        n_scenes: report.n_scenes,
        completed: report.completed,
        skipped: report.skipped.clone(),
        summaries: report.summaries.clone(),
    };
    let paths: Vec<_> = [SUMMARY_FILE, ROWS_FILE, TRUTH_OUTCOMES_FILE, ESTIMATE_OUTCOMES_FILE]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    std::fs::write(&paths[0], serde_json::to_string_pretty(&summary)? + "\n")?;
    write_rows(&paths[1], &report.rows)?;
    write_rows(&paths[2], &report.truth_outcomes)?;
    write_rows(&paths[3], &report.estimate_outcomes)?;
    Ok(paths)
}

pub fn read_campaign(dir: &Path) -> Result<CampaignReport> {
    let summary: CampaignSummaryFile = serde_json::from_str(&std::fs::read_to_string(dir.join(SUMMARY_FILE))?)?;
    Ok(CampaignReport {
        array: summary.array,
        seed: summary.seed,
        n_scenes: summary.n_scenes,
        completed: summary.completed,
        skipped: summary.skipped,
        summaries: summary.summaries,
        rows: read_rows(&dir.join(ROWS_FILE))?,
        truth_outcomes: read_rows(&dir.join(TRUTH_OUTCOMES_FILE))?,
        estimate_outcomes: read_rows(&dir.join(ESTIMATE_OUTCOMES_FILE))?,
    })
}

#[derive(Debug, Serialize)]
struct CountRow<'a> {
    array: &'a str,
    variant: &'a str,
    count_lo: f64,
    count_hi: f64,
    scenes: usize,
    mean_p_d: Option<f64>,
    mean_p_fa: Option<f64>,
    reflections: usize,
    misses: usize,
    merged_miss_fraction: Option<f64>,
}

#[derive(Debug, Serialize)]
struct BinRow<'a> {
    array: &'a str,
    variant: &'a str,
    lo: f64,
    hi: f64,
    count: usize,
    events: usize,
    rate: Option<f64>,
}

/// Plot-ready tables: detection and false alarms against reflection count,
/// misses against amplitude and delay, false positives against delay, and the
/// sub-clustering and ambiguity-mode comparisons. Every variant of every
/// report is included, keyed by array and variant.
pub fn write_plot_csvs(dir: &Path, reports: &[CampaignReport], horizon: f64) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut counts = Vec::new();
    let mut amp = Vec::new();
    let mut delay = Vec::new();
    let mut fp = Vec::new();
    let mut tables = Vec::new();
    for r in reports {
        for s in &r.summaries {
            tables.push((r.array.as_str(), bin_analysis(r, &s.variant, horizon)));
        }
    }
    for (array, t) in &tables {
        let variant = t.variant.as_str();
        for c in &t.by_reflection_count {
            counts.push(CountRow {
                array,
                variant,
                count_lo: c.lo,
                count_hi: c.hi,
                scenes: c.scenes,
                mean_p_d: c.mean_p_d,
                mean_p_fa: c.mean_p_fa,
                reflections: c.reflections,
                misses: c.misses,
                merged_miss_fraction: c.merged_miss_fraction,
            });
        }
        let bin_rows = |bins: &[Bin]| -> Vec<BinRow<'_>> {
            bins.iter()
                .map(|b| BinRow {
                    array,
                    variant,
                    lo: b.lo,
                    hi: b.hi,
                    count: b.count,
                    events: b.events,
                    rate: b.rate,
                })
                .collect()
        };
        amp.extend(bin_rows(&t.miss_vs_amplitude));
        delay.extend(bin_rows(&t.miss_vs_delay));
        fp.extend(bin_rows(&t.false_positives_vs_delay));
    }
    let files = [
        "by_reflection_count.csv",
        "miss_vs_amplitude.csv",
        "miss_vs_delay.csv",
        "false_positives_vs_delay.csv",
    ];
    let paths: Vec<_> = files.iter().map(|f| dir.join(f)).collect();
    write_rows(&paths[0], &counts)?;
    write_rows(&paths[1], &amp)?;
    write_rows(&paths[2], &delay)?;
    write_rows(&paths[3], &fp)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::Estimate;
    use proptest::prelude::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn refl(delay_ms: f64, el: f64, az: f64) -> Reflection {
        Reflection {
            delay: delay_ms * 1e-3,
            amplitude: 0.5,
            doa: Direction::from_degrees(el, az),
            order: 1,
        }
    }

    fn truth(r: &[Reflection]) -> ReflectionSet {
        let mut t = ReflectionSet::direct_only(Direction::from_degrees(90.0, 0.0));
        t.reflections = r.to_vec();
        t
    }

    fn ests(e: &[(f64, f64, f64)]) -> EstimateSet {
        EstimateSet {
            azimuth_only: false,
            estimates: e
                .iter()
                .map(|&(d, el, az)| Estimate {
                    delay: d * 1e-3,
                    doa: Direction::from_degrees(el, az),
                    weight: 10,
                })
                .collect(),
        }
    }

    #[test]
    fn tolerances_and_boundaries() {
        let cfg = MatchConfig::default();
        let t = truth(&[refl(3.0, 90.0, 40.0)]);
        let m = match_reflections(&ests(&[(3.0, 90.0, 40.0)]), &t, &cfg);
        assert_eq!(m.true_positives(), 1);
        assert_eq!(match_reflections(&ests(&[(3.6, 90.0, 40.0)]), &t, &cfg).true_positives(), 0);
        // exactly on both limits
        assert_eq!(match_reflections(&ests(&[(3.5, 90.0, 55.0)]), &t, &cfg).true_positives(), 1);
        assert_eq!(match_reflections(&ests(&[(3.0, 90.0, 56.0)]), &t, &cfg).true_positives(), 0);
    }

    #[test]
    fn two_estimates_one_truth() {
        let cfg = MatchConfig::default();
        let t = truth(&[refl(3.0, 90.0, 40.0)]);
        let e = ests(&[(2.9, 90.0, 45.0), (3.1, 90.0, 38.0)]);
        let m = match_reflections(&e, &t, &cfg);
        let metrics = compute_metrics(&m);
        assert_eq!((metrics.true_positives, metrics.false_positives), (1, 1));
        assert_eq!(optimal_match_count(&e, &t, &cfg), 1);
    }

    #[test]
    fn metric_arithmetic() {
        let m = Matching {
            estimate_match: vec![Some(0), Some(1), Some(2), None, None],
            truth_match: vec![Some(0), Some(1), Some(2), None],
        };
        let r = compute_metrics(&m);
        assert_eq!(r.p_d, Some(0.75));
        assert_eq!(r.p_fa, 0.4);
        assert_eq!(r.p_m, Some(0.25));
        let none = compute_metrics(&Matching {
            estimate_match: vec![],
            truth_match: vec![None],
        });
        assert!(none.no_detections && none.p_fa == 0.0);
        let empty = compute_metrics(&Matching {
            estimate_match: vec![None],
            truth_match: vec![],
        });
        assert_eq!(empty.p_d, None);
    }

    #[test]
    fn modes() {
        let a = Direction::from_degrees(30.0, 40.0);
        let b = Direction::from_degrees(150.0, 40.0);
        assert!(MatchMode::Full.angle(&a, &b) > 1.0);
        assert!(MatchMode::Mirror.angle(&a, &b) < 1e-12);
        assert!(MatchMode::Azimuth.angle(&a, &b) < 1e-12);
    }

    #[test]
    fn meridian_distance_cases() {
        // on the equator it is the azimuth difference
        let t = Direction::from_degrees(90.0, 50.0);
        assert_relative_eq!(meridian_distance(20f64.to_radians(), &t), 30f64.to_radians(), epsilon = 1e-12);
        // near the pole any azimuth is close
        let pole = Direction::from_degrees(5.0, 170.0);
        assert_relative_eq!(meridian_distance(0.0, &pole), 5f64.to_radians(), epsilon = 1e-12);
        let south = Direction::from_degrees(178.0, -100.0);
        assert!(meridian_distance(80f64.to_radians(), &south) <= 2.0001f64.to_radians());
    }

    #[test]
    fn bins_partition_and_perfect_detection() {
        let cfg = MatchConfig::default();
        let t = truth(&[refl(1.0, 90.0, 10.0), refl(5.0, 60.0, 100.0), refl(13.0, 120.0, -50.0)]);
        let e = ests(&[(1.0, 90.0, 10.0), (5.0, 60.0, 100.0), (13.0, 120.0, -50.0)]);
        let m = match_reflections(&e, &t, &cfg);
        let (to, eo) = outcomes(&e, &t, &m, &cfg);
        let mk_row = |scene| SceneRow {
            scene,
            seed: 0,
            room: 1,
            array: "x".into(),
            variant: "v".into(),
            drr_db: 0.0,
            candidates: 0,
            direct_error_deg: None,
            truth_count: 3,
            detected_count: 3,
            true_positives: 3,
            false_positives: 0,
            p_d: Some(1.0),
            p_fa: 0.0,
            p_m: Some(0.0),
        };
        let report = CampaignReport {
            array: "x".into(),
            seed: 0,
            n_scenes: 1,
            completed: 1,
            skipped: vec![],
            summaries: vec![],
            rows: vec![mk_row(0)],
            truth_outcomes: to
                .iter()
                .map(|t| TruthOutcomeRow {
                    scene: 0,
                    variant: "v".into(),
                    truth_count: 3,
                    delay_s: t.delay,
                    amplitude: t.amplitude,
                    matched: t.matched,
                    merged: t.merged,
                })
                .collect(),
            estimate_outcomes: eo
                .iter()
                .map(|e| EstimateOutcomeRow {
                    scene: 0,
                    variant: "v".into(),
                    truth_count: 3,
                    delay_s: e.delay,
                    true_positive: e.true_positive,
                })
                .collect(),
        };
        let b = bin_analysis(&report, "v", 0.02);
        assert_eq!(b.miss_vs_delay.len(), 10);
        assert_eq!(b.miss_vs_delay.iter().map(|x| x.count).sum::<usize>(), 3);
        assert_eq!(b.miss_vs_amplitude.iter().map(|x| x.count).sum::<usize>(), 3);
        assert!(b.miss_vs_delay.iter().all(|x| x.rate.is_none_or(|r| r == 0.0)));
        assert!(b.miss_vs_delay[1].rate.is_none());
        assert_eq!(b.by_reflection_count.iter().map(|c| c.scenes).sum::<usize>(), 1);
    }

    #[test]
    fn merged_miss_is_flagged() {
        let cfg = MatchConfig::default();
        let t = truth(&[refl(4.0, 90.0, 40.0), refl(4.2, 90.0, 48.0)]);
        let e = ests(&[(4.1, 90.0, 44.0)]);
        let m = match_reflections(&e, &t, &cfg);
        let (to, _) = outcomes(&e, &t, &m, &cfg);
        assert_eq!(to.iter().filter(|o| o.matched).count(), 1);
        assert_eq!(to.iter().filter(|o| o.merged).count(), 1);
    }

    fn small_set() -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
        prop::collection::vec((0.5f64..6.0, 60.0f64..120.0, -40.0f64..40.0), 0..6)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn meridian_distance_bounds(el_a in 0.0f64..180.0, az_a in -180.0f64..180.0, el_b in 0.0f64..180.0, az_b in -180.0f64..180.0) {
            let a = Direction::from_degrees(el_a, az_a);
            let b = Direction::from_degrees(el_b, az_b);
            let m = MatchMode::Azimuth.angle(&a, &b);
            prop_assert!(m >= 0.0);
            prop_assert!(m <= a.angle_to(&b) + 1e-9);
            // brute force over the half-plane
            let brute = (0..=1800)
                .map(|k| Direction::new(k as f64 * PI / 1800.0, a.azimuth).angle_to(&b))
                .fold(f64::INFINITY, f64::min);
            prop_assert!((m - brute).abs() < 2e-3);
        }

        #[test]
        fn greedy_is_one_to_one_and_bounded(e in small_set(), t in small_set()) {
            let cfg = MatchConfig::default();
            let t = truth(&t.iter().map(|&(d, el, az)| refl(d, el, az)).collect::<Vec<_>>());
            let e = ests(&e);
            let m = match_reflections(&e, &t, &cfg);
            let tp = m.true_positives();
            prop_assert!(tp <= e.len().min(t.reflections.len()));
            prop_assert!(tp <= optimal_match_count(&e, &t, &cfg));
            // greedy maximal matching is at least half of the optimum
            prop_assert!(2 * tp >= optimal_match_count(&e, &t, &cfg));
            for (ei, ti) in m.estimate_match.iter().enumerate() {
                if let Some(ti) = ti {
                    prop_assert_eq!(m.truth_match[*ti], Some(ei));
                }
            }
            let r = compute_metrics(&m);
            if let (Some(pd), Some(pm)) = (r.p_d, r.p_m) {
                prop_assert!((0.0..=1.0).contains(&pd));
                prop_assert_eq!(pm, 1.0 - pd);
            }
            prop_assert!((0.0..=1.0).contains(&r.p_fa));
            let mirror = MatchConfig { mode: MatchMode::Mirror, ..cfg };
            prop_assert!(optimal_match_count(&e, &t, &mirror) >= optimal_match_count(&e, &t, &cfg));
        }

        #[test]
        fn relaxed_modes_never_raise_false_alarms(
            e in small_set(),
            gaps in prop::collection::vec((1.05f64..3.0, 20.0f64..160.0, -180.0f64..180.0), 0..5),
        ) {
            // truths more than two delay tolerances apart: each estimate can
            // reach at most one of them, in any mode
            let mut d = 0.0;
            let t: Vec<Reflection> = gaps.iter().map(|&(g, el, az)| { d += g; refl(d, el, az) }).collect();
            let t = truth(&t);
            let e = ests(&e);
            let full = compute_metrics(&match_reflections(&e, &t, &MatchConfig::default()));
            for mode in [MatchMode::Mirror, MatchMode::Azimuth] {
                let relaxed = MatchConfig { mode, ..Default::default() };
                let mm = compute_metrics(&match_reflections(&e, &t, &relaxed));
                prop_assert!(mm.p_fa <= full.p_fa);
                prop_assert!(mm.true_positives >= full.true_positives);
            }
        }
    }
}
