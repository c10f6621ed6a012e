use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const LIGHT: &str = r#"
[estimator.grid]
points = 200
[estimator.bands]
n_bands = 3
[estimator.grouping]
group_hop = 8
[campaign]
n_scenes = 2
rooms = [1]
[scene.source]
kind = "speech-like"
min_duration = 1.0
max_duration = 1.0
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("light.toml"), LIGHT).unwrap();
        Sandbox { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_erefl"))
            .current_dir(self.dir.path())
            .env("EREFL_CACHE_DIR", self.path("cache"))
            .env_remove("EREFL_WORKERS")
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                acc.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(root, root, &mut acc);
    acc
}

fn manifest_outputs(dir: &Path) -> Vec<String> {
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect()
}

fn assert_identical(s: &Sandbox, a: &str, b: &str) {
    let ta = tree(&s.path(a));
    let tb = tree(&s.path(b));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(v == &tb[k], "{a}/{k} differs from {b}/{k}");
    }
}

#[test]
fn single_scene_chain_is_reproducible() {
    let s = Sandbox::new();
    for run in ["1", "2"] {
        let c = ["--config", "light.toml", "--seed", "5"];
        let sim = format!("sim{run}");
        let det = format!("det{run}");
        let ev = format!("ev{run}");
        let syn = format!("syn{run}");
        s.ok(&[&c[..], &["--out-dir", &sim, "simulate"]].concat());
        s.ok(&[&c[..], &["--out-dir", &det, "detect", "--input", &format!("{sim}/signals.wav")]].concat());
        s.ok(&[
            &c[..],
            &["--out-dir", &ev, "evaluate", "--detection", &det, "--truth", &format!("{sim}/truth.csv")],
        ]
        .concat());
        s.ok(&[
            &c[..],
            &["--out-dir", &syn, "synth", "--estimates", &format!("{ev}/estimates.csv"), "--direct", "90,-42"],
        ]
        .concat());
    }
    for stage in ["sim", "det", "ev", "syn"] {
        assert_identical(&s, &format!("{stage}1"), &format!("{stage}2"));
    }
    let mut listed = manifest_outputs(&s.path("ev1"));
    listed.sort();
    assert_eq!(listed, ["estimates.csv", "manifest.json", "metrics.json"]);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(s.path("ev1/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["mode"], "full");
    assert!(metrics["metrics"]["truth_count"].as_u64().unwrap() > 0);
}

#[test]
fn seed_changes_outputs() {
    let s = Sandbox::new();
    s.ok(&["--config", "light.toml", "--seed", "1", "--out-dir", "a", "synth"]);
    s.ok(&["--config", "light.toml", "--seed", "2", "--out-dir", "b", "synth"]);
    assert_ne!(
        std::fs::read(s.path("a/reflections.csv")).unwrap(),
        std::fs::read(s.path("b/reflections.csv")).unwrap()
    );
}

#[test]
fn campaign_and_bins_agree_and_repeat() {
    let s = Sandbox::new();
    let args = |out: &'static str| {
        vec![
            "--config", "light.toml", "--seed", "3", "--out-dir", out, "campaign", "--array", "em32", "--array",
            "semicircular",
        ]
    };
    s.ok(&args("c1"));
    s.ok(&args("c2"));
    assert_identical(&s, "c1", "c2");
    for f in ["summary.json", "scenes.csv", "truth_outcomes.csv", "estimate_outcomes.csv"] {
        assert!(s.path("c1/em32").join(f).exists(), "{f}");
    }
    s.ok(&[
        "--config", "light.toml", "--out-dir", "b", "bins", "--campaign", "c1/em32", "--campaign", "c1/semicircular",
    ]);
    let from_campaign = tree(&s.path("c1/bins"));
    let from_bins = tree(&s.path("b/bins"));
    assert_eq!(from_campaign, from_bins);
    assert_eq!(from_bins.len(), 4);
}

#[test]
fn demo_writes_both_arrays() {
    let s = Sandbox::new();
    s.ok(&["--config", "light.toml", "--out-dir", "d1", "--timings", "demo"]);
    s.ok(&["--config", "light.toml", "--out-dir", "d2", "demo"]);
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(s.path("d1/demo.json")).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["mode"], "full");
    assert_eq!(rows[1]["mode"], "azimuth");
    for arr in ["em32", "semicircular"] {
        for f in ["reference_rir.wav", "anchor_rir.wav", "estimated_rir.wav", "metrics.json"] {
            assert!(s.path(&format!("d1/{arr}/{f}")).exists(), "{arr}/{f}");
        }
    }
    // timings only land in the manifest, so everything else matches the untimed run
    let mut t1 = tree(&s.path("d1"));
    let mut t2 = tree(&s.path("d2"));
    let m1: serde_json::Value = serde_json::from_slice(&t1.remove("manifest.json").unwrap()).unwrap();
    t2.remove("manifest.json");
    assert_eq!(t1, t2);
    assert!(!m1["timings"].as_array().unwrap().is_empty());
}

#[test]
fn errors_map_to_exit_codes() {
    let s = Sandbox::new();
    let code = |args: &[&str]| s.run(args).status.code().unwrap();

    assert_eq!(code(&["--config", "missing.toml", "simulate"]), 4);

    std::fs::write(s.path("bad.toml"), "[estimator.detector]\nrho_min = 2.0\n").unwrap();
    let out = s.run(&["--config", "bad.toml", "simulate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("estimator.detector.rho_min"));

    std::fs::write(s.path("typo.toml"), "[synth]\nvolum = 3.0\n").unwrap();
    assert_eq!(code(&["--config", "typo.toml", "synth"]), 2);

    std::fs::write(s.path("junk.wav"), b"not audio").unwrap();
    assert_eq!(code(&["--config", "light.toml", "detect", "--input", "junk.wav"]), 3);

    s.ok(&["--config", "light.toml", "--out-dir", "sim", "simulate"]);
    let out = s.run(&["--config", "light.toml", "detect", "--input", "sim/signals.wav", "--array", "semicircular"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("channels"));

    // walls cannot absorb enough for this decay
    std::fs::write(s.path("room.toml"), "[scene]\nt60 = 0.01\n").unwrap();
    assert_eq!(code(&["--config", "room.toml", "simulate"]), 5);
}
