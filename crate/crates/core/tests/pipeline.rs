use early_reflections::array::{ArrayGeometry, Direction};
use early_reflections::clustering::{estimate_reflections, read_estimates_csv, write_estimates_csv, ClusterConfig};
use early_reflections::config::{load_config, save_config, ConfigBundle, SceneSpec};
use early_reflections::eval::{
    bin_analysis, evaluate_candidates, read_campaign, run_campaign, standard_variants, write_campaign,
    CampaignConfig, EstimatorConfig, MatchConfig, MatchMode, Pipeline, Variant,
};
use early_reflections::io::{read_signal, read_truth_csv, write_raw, write_truth_csv, write_wav};
use early_reflections::phalcor::{read_candidates_csv, write_candidates_csv};
use early_reflections::room::{Reflection, ReflectionSet};
use early_reflections::scene::SourceSignal;
use early_reflections::stft::GroupingConfig;
use early_reflections::synth::{build_estimated_rir, SynthConfig};

fn test_estimator() -> EstimatorConfig {
    EstimatorConfig {
        grouping: GroupingConfig {
            frames_per_group: 8,
            group_hop: 4,
        },
        ..Default::default()
    }
}

fn planted() -> ReflectionSet {
    let mut s = ReflectionSet::direct_only(Direction::from_degrees(90.0, -42.0));
    for (d, a, el, az) in [(1.8e-3, 0.6, 50.0, 20.0), (5.2e-3, 0.5, 130.0, -150.0)] {
        s.reflections.push(Reflection {
            delay: d,
            amplitude: a,
            doa: Direction::from_degrees(el, az),
            order: 1,
        });
    }
    s
}

#[test]
fn planted_reflections_survive_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SceneSpec::default();
    spec.source = SourceSignal::SpeechLike {
        min_duration: 1.5,
        max_duration: 1.5,
    };
    let scene = spec.to_scene().unwrap();
    let sim = scene.simulate_with(planted()).unwrap();

    // both signal formats read back to the same detections
    let wav = dir.path().join("x.wav");
    let raw = dir.path().join("x.f32");
    write_wav(&wav, &sim.signals).unwrap();
    write_raw(&raw, &sim.signals).unwrap();
    let from_wav = read_signal(&wav).unwrap();
    let from_raw = read_signal(&raw).unwrap();
    assert_eq!(from_wav.num_channels(), 32);

    let pipeline = Pipeline::new(scene.array.clone(), test_estimator(), scene.fs, Some(&dir.path().join("cache"))).unwrap();
    let det = pipeline.detect(&from_wav).unwrap();
    assert!(det.direct_doa.angle_to(&sim.truth.direct.doa).to_degrees() < 10.0);
    let det_raw = pipeline.detect(&from_raw).unwrap();
    assert_eq!(det.cells, det_raw.cells);

    let cpath = dir.path().join("c.csv");
    write_candidates_csv(&cpath, &det.candidates).unwrap();
    let back = read_candidates_csv(&cpath).unwrap();
    assert_eq!(back.len(), det.candidates.len());

    let tpath = dir.path().join("t.csv");
    write_truth_csv(&tpath, &sim.truth).unwrap();
    let truth = read_truth_csv(&tpath).unwrap();

    let variant = &standard_variants(&ClusterConfig::default(), &MatchConfig::default())[0];
    let o = evaluate_candidates(&back, det.cells, &truth, variant);
    assert_eq!(o.metrics.p_d, Some(1.0), "{:?}", o.estimates);
    assert_eq!(o.metrics.p_fa, 0.0, "{:?}", o.estimates);

    let epath = dir.path().join("e.csv");
    write_estimates_csv(&epath, &o.estimates).unwrap();
    let est = read_estimates_csv(&epath).unwrap();
    assert_eq!(est.estimates.len(), 2);

    // estimated reflections feed the synthesizer unchanged in time and direction
    let refs = build_estimated_rir(&est.to_reflection_set(det.direct_doa), &SynthConfig::default()).unwrap();
    assert_eq!(refs.reflections.len(), 2);
    for (r, e) in refs.reflections.iter().zip(&est.estimates) {
        assert_eq!(r.delay, e.delay);
        assert_eq!(r.doa, e.doa);
        assert!(r.amplitude > 0.0);
    }
}

#[test]
fn semicircular_azimuth_mode_scores_planar_estimates() {
    let mut spec = SceneSpec::default();
    spec.array = "semicircular".into();
    spec.source = SourceSignal::SpeechLike {
        min_duration: 1.5,
        max_duration: 1.5,
    };
    let scene = spec.to_scene().unwrap();
    // reflections on the horizontal plane, where the planar array has no up/down ambiguity
    let mut arrivals = ReflectionSet::direct_only(Direction::from_degrees(90.0, -42.0));
    arrivals.reflections.push(Reflection {
        delay: 2.4e-3,
        amplitude: 0.7,
        doa: Direction::from_degrees(90.0, 60.0),
        order: 1,
    });
    let sim = scene.simulate_with(arrivals).unwrap();
    let pipeline = Pipeline::new(scene.array.clone(), test_estimator(), scene.fs, None).unwrap();
    let det = pipeline.detect(&sim.signals).unwrap();
    let variant = Variant {
        label: "az".into(),
        cluster: ClusterConfig::default(),
        matching: MatchConfig {
            mode: MatchMode::Azimuth,
            ..Default::default()
        },
    };
    let o = evaluate_candidates(&det.candidates, det.cells, &sim.truth, &variant);
    assert_eq!(o.metrics.p_d, Some(1.0), "{:?}", o.estimates);
    assert!(o.estimates.azimuth_only);
    let full = estimate_reflections(&det.candidates, det.cells, &ClusterConfig::default());
    assert!(!full.azimuth_only);
}

#[test]
fn campaign_report_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let array = ArrayGeometry::preset("semicircular").unwrap();
    let est = test_estimator();
    let cfg = CampaignConfig {
        n_scenes: 2,
        rooms: vec![3, 4],
        seed: 11,
        array: "semicircular".into(),
        ..Default::default()
    };
    let pipeline = Pipeline::new(array, est.clone(), cfg.fs, None).unwrap();
    let variants = standard_variants(&est.clustering, &MatchConfig::default());
    let report = run_campaign(&cfg, &pipeline, &variants).unwrap();
    assert_eq!(report.completed, 2);
    assert_eq!(report.rows.len(), 2 * variants.len());
    for row in &report.rows {
        assert!((3..=4).contains(&row.room));
        assert!((-10.0..=10.0).contains(&row.drr_db));
        if let (Some(d), Some(m)) = (row.p_d, row.p_m) {
            assert_eq!(m, 1.0 - d);
        }
    }
    write_campaign(dir.path(), &report).unwrap();
    let back = read_campaign(dir.path()).unwrap();
    assert_eq!(back.rows, report.rows);
    assert_eq!(back.summaries, report.summaries);
    let a = bin_analysis(&report, "primary", 0.02);
    let b = bin_analysis(&back, "primary", 0.02);
    assert_eq!(a, b);
    let truths: usize = a.miss_vs_amplitude.iter().map(|b| b.count).sum();
    let expected: usize = report.rows.iter().filter(|r| r.variant == "primary").map(|r| r.truth_count).sum();
    assert_eq!(truths, expected);
}

#[test]
fn config_files_round_trip_and_change_the_hash() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    let mut bundle = ConfigBundle::default();
    bundle.set_seed(42);
    bundle.estimator.detector.strength_floor = 0.0;
    save_config(&path, &bundle).unwrap();
    let back = load_config(&path).unwrap();
    assert_eq!(back, bundle);
    assert_eq!(back.hash(), bundle.hash());
    assert_ne!(back.hash(), ConfigBundle::default().hash());
    assert_eq!(back.campaign.seed, 42);
    assert_eq!(back.estimator.clustering.seed, 42);
}
