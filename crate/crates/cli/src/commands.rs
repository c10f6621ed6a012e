use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use early_reflections::array::{ArrayGeometry, Direction};
use early_reflections::clustering::{read_estimates_csv, write_estimates_csv, ClusterConfig, EstimateSet};
use early_reflections::config::{load_config, ConfigBundle, RunManifest, StageTiming};
use early_reflections::error::Error as CoreError;
use early_reflections::eval::{
    evaluate_candidates, read_campaign, run_campaign, sample_scene, standard_variants, write_campaign,
    write_plot_csvs, MatchConfig, MatchMode, Pipeline, SceneMetrics, TruthOutcome, Variant,
};
use early_reflections::io::{read_signal, read_truth_csv, write_truth_csv, write_wav};
use early_reflections::phalcor::{read_candidates_csv, write_candidates_csv, Detection};
use early_reflections::rir::render_rir;
use early_reflections::room::ReflectionSet;
use early_reflections::scene::{MultichannelSignal, SceneConfig};
use early_reflections::synth::{build_estimated_rir, synthesize_rir};

use crate::GlobalArgs;

/// Error category of a failure, used for the exit code.
pub fn category(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<CoreError>() {
            return c.category();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "other"
}

/// Configuration, output directory and manifest of one invocation.
struct Run {
    bundle: ConfigBundle,
    out: PathBuf,
    manifest: RunManifest,
    timings: bool,
    clock: Instant,
}

impl Run {
    fn start(g: &GlobalArgs, command: &str) -> Result<Self> {
        let mut bundle = match &g.config {
            Some(p) => load_config(p).with_context(|| format!("loading {}", p.display()))?,
            None => ConfigBundle::default(),
        };
        if let Some(seed) = g.seed {
            bundle.set_seed(seed);
        }
        bundle.validate()?;
        if g.workers > 0 {
            // a second build in the same process is harmless
            let _ = rayon::ThreadPoolBuilder::new().num_threads(g.workers).build_global();
        }
        std::fs::create_dir_all(&g.out_dir).with_context(|| format!("creating {}", g.out_dir.display()))?;
        let seed = bundle.campaign.seed;
        let manifest = RunManifest::new(command, &bundle, seed);
        Ok(Run {
            bundle,
            out: g.out_dir.clone(),
            manifest,
            timings: g.timings,
            clock: Instant::now(),
        })
    }

    fn stage(&mut self, name: &str) {
        if self.timings {
            let seconds = self.clock.elapsed().as_secs_f64();
            eprintln!("{name}: {seconds:.3} s");
            self.manifest.timings.push(StageTiming {
                stage: name.into(),
                seconds,
            });
        }
        self.clock = Instant::now();
    }

    /// Path of an output file, recorded in the manifest.
    fn output(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.out.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        self.manifest.add_output(name);
        Ok(path)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.output(name)?;
        std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.manifest.write(&self.out)?;
        Ok(())
    }
}

fn pipeline(run: &Run, array: ArrayGeometry, fs: f64, cache: Option<&Path>) -> Result<Pipeline> {
    Ok(Pipeline::new(array, run.bundle.estimator.clone(), fs, cache)?)
}

/// Sidecar of a candidate dump: what the clustering needs beyond the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub array: String,
    pub fs: f64,
    pub cells: usize,
    pub direct_index: usize,
    pub direct_elevation_rad: f64,
    pub direct_azimuth_rad: f64,
    pub candidates: usize,
}

impl DetectionSummary {
    fn new(array: &str, fs: f64, d: &Detection) -> Self {
        DetectionSummary {
            array: array.into(),
            fs,
            cells: d.cells,
            direct_index: d.direct_index,
            direct_elevation_rad: d.direct_doa.elevation,
            direct_azimuth_rad: d.direct_doa.azimuth,
            candidates: d.candidates.len(),
        }
    }

    fn direct(&self) -> Direction {
        Direction::new(self.direct_elevation_rad, self.direct_azimuth_rad)
    }
}

#[derive(Debug, Serialize)]
struct SceneInfo<'a> {
    room_dims: [f64; 3],
    wall_coeffs: [f64; 6],
    source_pos: [f64; 3],
    array_pos: [f64; 3],
    array: &'a str,
    fs: f64,
    seed: u64,
    drr_db: f64,
    reflections_in_truth: usize,
}

fn write_scene_outputs(run: &mut Run, prefix: &str, scene: &SceneConfig) -> Result<(ReflectionSet, MultichannelSignal)> {
    let sim = scene.simulate()?;
    run.stage("simulate");
    write_wav(&run.output(&format!("{prefix}signals.wav"))?, &sim.signals)?;
    write_truth_csv(&run.output(&format!("{prefix}truth.csv"))?, &sim.truth)?;
    write_truth_csv(&run.output(&format!("{prefix}arrivals.csv"))?, &sim.arrivals)?;
    let info = SceneInfo {
        room_dims: scene.room.dims,
        wall_coeffs: scene.room.wall_coeffs,
        source_pos: scene.source_pos,
        array_pos: scene.array_pos,
        array: &scene.array.label,
        fs: scene.fs,
        seed: scene.seed,
        drr_db: sim.drr_db,
        reflections_in_truth: sim.truth.reflections.len(),
    };
    run.write_json(&format!("{prefix}scene.json"), &info)?;
    Ok((sim.truth, sim.signals))
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Array preset, overriding the configured one.
    #[arg(long)]
    pub array: Option<String>,
    /// Sample a Monte Carlo placement in this room preset instead of the configured scene.
    #[arg(long)]
    pub room: Option<u8>,
    /// Scene index of the Monte Carlo draw.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
}

fn configured_scene(run: &Run, array: Option<&str>, room: Option<u8>, index: usize) -> Result<SceneConfig> {
    let mut spec = run.bundle.scene.clone();
    if let Some(a) = array {
        spec.array = a.into();
    }
    match room {
        None => Ok(spec.to_scene()?),
        Some(id) => {
            let mut cfg = run.bundle.campaign.clone();
            cfg.rooms = vec![id];
            let geometry = ArrayGeometry::preset(&spec.array)?;
            Ok(sample_scene(&cfg, index, &geometry)?.scene)
        }
    }
}

pub fn simulate(g: &GlobalArgs, a: &SimulateArgs) -> Result<()> {
    let mut run = Run::start(g, "simulate")?;
    let scene = configured_scene(&run, a.array.as_deref(), a.room, a.index)?;
    write_scene_outputs(&mut run, "", &scene)?;
    run.finish()
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    /// Multichannel recording (WAV or raw float64 with JSON header).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub array: Option<String>,
}

fn run_detection(run: &mut Run, prefix: &str, array: &str, signals: &MultichannelSignal, cache: Option<&Path>) -> Result<Detection> {
    let geometry = ArrayGeometry::preset(array)?;
    if geometry.num_mics() != signals.num_channels() {
        return Err(CoreError::Dimension(format!(
            "array `{array}` has {} microphones, recording has {} channels",
            geometry.num_mics(),
            signals.num_channels()
        ))
        .into());
    }
    let p = pipeline(run, geometry, signals.fs, cache)?;
    run.stage("focusing");
    let det = p.detect(signals)?;
    run.stage("detect");
    write_candidates_csv(&run.output(&format!("{prefix}candidates.csv"))?, &det.candidates)?;
    let summary = DetectionSummary::new(array, signals.fs, &det);
    run.write_json(&format!("{prefix}detection.json"), &summary)?;
    Ok(det)
}

pub fn detect(g: &GlobalArgs, a: &DetectArgs) -> Result<()> {
    let mut run = Run::start(g, "detect")?;
    let signals = read_signal(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let array = a.array.clone().unwrap_or_else(|| run.bundle.scene.array.clone());
    run_detection(&mut run, "", &array, &signals, g.cache_dir.as_deref())?;
    run.finish()
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory written by `detect` (candidates.csv and detection.json).
    #[arg(long)]
    pub detection: PathBuf,
    /// Ground-truth CSV written by `simulate`.
    #[arg(long)]
    pub truth: PathBuf,
    /// Matching mode: full, azimuth or mirror.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub no_subcluster: bool,
}

#[derive(Debug, Serialize)]
struct MetricsFile<'a> {
    variant: &'a str,
    mode: &'a str,
    subcluster: bool,
    cells: usize,
    candidates: usize,
    metrics: &'a SceneMetrics,
    truth_outcomes: &'a [TruthOutcome],
}

fn variant_from(bundle: &ConfigBundle, mode: Option<&str>, no_subcluster: bool) -> Result<Variant> {
    let mut matching: MatchConfig = bundle.matching;
    if let Some(m) = mode {
        matching.mode = MatchMode::parse(m)?;
    }
    let cluster = ClusterConfig {
        subcluster: bundle.estimator.clustering.subcluster && !no_subcluster,
        ..bundle.estimator.clustering.clone()
    };
    Ok(Variant {
        label: "cli".into(),
        cluster,
        matching,
    })
}

fn score(run: &mut Run, prefix: &str, det: &Detection, truth: &ReflectionSet, variant: &Variant) -> Result<EstimateSet> {
    let o = evaluate_candidates(&det.candidates, det.cells, truth, variant);
    run.stage("cluster+match");
    write_estimates_csv(&run.output(&format!("{prefix}estimates.csv"))?, &o.estimates)?;
    let file = MetricsFile {
        variant: &variant.label,
        mode: variant.matching.mode.label(),
        subcluster: variant.cluster.subcluster,
        cells: det.cells,
        candidates: det.candidates.len(),
        metrics: &o.metrics,
        truth_outcomes: &o.truth_outcomes,
    };
    run.write_json(&format!("{prefix}metrics.json"), &file)?;
    Ok(o.estimates)
}

fn read_detection(dir: &Path) -> Result<(DetectionSummary, Detection)> {
    let summary: DetectionSummary = serde_json::from_str(
        &std::fs::read_to_string(dir.join("detection.json")).with_context(|| format!("reading {}/detection.json", dir.display()))?,
    )
    .map_err(CoreError::from)?;
    let candidates = read_candidates_csv(&dir.join("candidates.csv"))?;
    if candidates.len() != summary.candidates {
        return Err(CoreError::Format(format!(
            "candidates.csv has {} rows, detection.json expects {}",
            candidates.len(),
            summary.candidates
        ))
        .into());
    }
    let det = Detection {
        direct_doa: summary.direct(),
        direct_index: summary.direct_index,
        cells: summary.cells,
        candidates,
    };
    Ok((summary, det))
}

pub fn evaluate(g: &GlobalArgs, a: &EvaluateArgs) -> Result<()> {
    let mut run = Run::start(g, "evaluate")?;
    let (_, det) = read_detection(&a.detection)?;
    let truth = read_truth_csv(&a.truth)?.truncated(run.bundle.campaign.truncation);
    let variant = variant_from(&run.bundle, a.mode.as_deref(), a.no_subcluster)?;
    score(&mut run, "", &det, &truth, &variant)?;
    run.finish()
}

#[derive(Args, Debug)]
pub struct CampaignArgs {
    /// Number of scenes, overriding the configuration.
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Array presets; repeat for several. Defaults to the configured array.
    #[arg(long)]
    pub array: Vec<String>,
    /// Room presets, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub rooms: Vec<u8>,
}

pub fn campaign(g: &GlobalArgs, a: &CampaignArgs) -> Result<()> {
    let mut run = Run::start(g, "campaign")?;
    let mut cfg = run.bundle.campaign.clone();
    if let Some(n) = a.scenes {
        cfg.n_scenes = n;
    }
    if !a.rooms.is_empty() {
        cfg.rooms = a.rooms.clone();
    }
    cfg.validate()?;
    let arrays = if a.array.is_empty() { vec![cfg.array.clone()] } else { a.array.clone() };
    let variants = standard_variants(&run.bundle.estimator.clustering, &run.bundle.matching);
    let mut reports = Vec::new();
    for name in &arrays {
        let geometry = ArrayGeometry::preset(name)?;
        let p = pipeline(&run, geometry, cfg.fs, g.cache_dir.as_deref())?;
        run.stage(&format!("{name} focusing"));
        let c = early_reflections::eval::CampaignConfig {
            array: name.clone(),
            ..cfg.clone()
        };
        let report = run_campaign(&c, &p, &variants)?;
        run.stage(&format!("{name} campaign"));
        for path in write_campaign(&run.out.join(name), &report)? {
            let rel = path.strip_prefix(&run.out).unwrap_or(&path).to_string_lossy().into_owned();
            run.manifest.add_output(rel);
        }
        for s in &report.summaries {
            log::info!(
                "{name} {}: P_D {:?} P_FA {:.3} over {} scenes",
                s.variant,
                s.mean_p_d,
                s.mean_p_fa,
                s.scenes
            );
        }
        reports.push(report);
    }
    plot_tables(&mut run, &reports)?;
    run.finish()
}

fn plot_tables(run: &mut Run, reports: &[early_reflections::eval::CampaignReport]) -> Result<()> {
    let dir = run.out.join("bins");
    for path in write_plot_csvs(&dir, reports, run.bundle.campaign.truncation)? {
        let rel = path.strip_prefix(&run.out).unwrap_or(&path).to_string_lossy().into_owned();
        run.manifest.add_output(rel);
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct BinsArgs {
    /// Campaign output directories (one per array); repeat for several.
    #[arg(long, required = true)]
    pub campaign: Vec<PathBuf>,
}

pub fn bins(g: &GlobalArgs, a: &BinsArgs) -> Result<()> {
    let mut run = Run::start(g, "bins")?;
    let reports = a
        .campaign
        .iter()
        .map(|d| read_campaign(d).with_context(|| format!("reading campaign {}", d.display())))
        .collect::<Result<Vec<_>>>()?;
    plot_tables(&mut run, &reports)?;
    run.finish()
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Estimates CSV from `evaluate`; without it reflections are drawn at random.
    #[arg(long)]
    pub estimates: Option<PathBuf>,
    /// Direct-sound DoA as "elevation,azimuth" in degrees.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_values_t = [90.0, 0.0])]
    pub direct: Vec<f64>,
}

fn render_to(run: &mut Run, name: &str, refs: &ReflectionSet, fs: f64, horizon: f64) -> Result<()> {
    let ir = render_rir(refs, fs, horizon + 0.005);
    write_wav(&run.output(name)?, &MultichannelSignal::new(fs, vec![ir.samples])?)?;
    Ok(())
}

pub fn synth(g: &GlobalArgs, a: &SynthArgs) -> Result<()> {
    let mut run = Run::start(g, "synth")?;
    if a.direct.len() != 2 {
        bail!(CoreError::Config("--direct takes elevation,azimuth".into()));
    }
    let direct = Direction::from_degrees(a.direct[0], a.direct[1]);
    let cfg = run.bundle.synth.clone();
    let refs = match &a.estimates {
        Some(p) => {
            let est = read_estimates_csv(p)?;
            build_estimated_rir(&est.to_reflection_set(direct).truncated(cfg.horizon), &cfg)?
        }
        None => synthesize_rir(&cfg, direct)?,
    };
    run.stage("synth");
    write_truth_csv(&run.output("reflections.csv")?, &refs)?;
    let fs = run.bundle.scene.fs;
    render_to(&mut run, "rir.wav", &refs, fs, cfg.horizon)?;
    run.finish()
}

#[derive(Args, Debug)]
pub struct DemoArgs {
    /// Arrays to run; defaults to both presets.
    #[arg(long)]
    pub array: Vec<String>,
}

#[derive(Debug, Serialize)]
struct DemoRow {
    array: String,
    mode: String,
    subcluster: bool,
    truth: usize,
    detected: usize,
    p_d: Option<f64>,
    p_fa: f64,
    direct_error_deg: f64,
}

/// The listening-test room with each array: the spherical array is scored
/// with sub-clustering, the semicircular one in azimuth-only mode. Writes
/// reference, statistical and estimate-based early RIRs next to the metrics.
pub fn demo(g: &GlobalArgs, a: &DemoArgs) -> Result<()> {
    let mut run = Run::start(g, "demo")?;
    let arrays = if a.array.is_empty() {
        vec!["em32".to_string(), "semicircular".to_string()]
    } else {
        a.array.clone()
    };
    let mut rows = Vec::new();
    let synth_cfg = run.bundle.synth.clone();
    for name in &arrays {
        let prefix = format!("{name}/");
        let scene = configured_scene(&run, Some(name), None, 0)?;
        let (truth, signals) = write_scene_outputs(&mut run, &prefix, &scene)?;
        let det = run_detection(&mut run, &prefix, name, &signals, g.cache_dir.as_deref())?;
        let semicircular = ArrayGeometry::preset(name)?.mic_positions.iter().all(|p| p[2].abs() < 1e-12);
        let mode = if semicircular { "azimuth" } else { "full" };
        let mut variant = variant_from(&run.bundle, Some(mode), false)?;
        variant.label = format!("demo-{name}");
        let estimates = score(&mut run, &prefix, &det, &truth, &variant)?;
        let o = evaluate_candidates(&det.candidates, det.cells, &truth, &variant);
        rows.push(DemoRow {
            array: name.clone(),
            mode: mode.into(),
            subcluster: variant.cluster.subcluster,
            truth: truth.reflections.len(),
            detected: estimates.len(),
            p_d: o.metrics.p_d,
            p_fa: o.metrics.p_fa,
            direct_error_deg: det.direct_doa.angle_to(&truth.direct.doa).to_degrees(),
        });
        let reference = truth.truncated(synth_cfg.horizon);
        let anchor = synthesize_rir(&synth_cfg, truth.direct.doa)?;
        let estimated = build_estimated_rir(&estimates.to_reflection_set(det.direct_doa).truncated(synth_cfg.horizon), &synth_cfg)?;
        for (label, refs) in [("reference", &reference), ("anchor", &anchor), ("estimated", &estimated)] {
            write_truth_csv(&run.output(&format!("{prefix}{label}_reflections.csv"))?, refs)?;
            render_to(&mut run, &format!("{prefix}{label}_rir.wav"), refs, scene.fs, synth_cfg.horizon)?;
        }
        run.stage(&format!("{name} synth"));
    }
    run.write_json("demo.json", &rows)?;
    run.finish()
}
