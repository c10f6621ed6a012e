//! TOML configuration bundle, config hashing and the run manifest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array::{ArrayGeometry, Vec3};
use crate::error::{Error, Result};
use crate::eval::{CampaignConfig, EstimatorConfig, MatchConfig};
use crate::room::{calibrate_reflection_coeff, RoomSpec};
use crate::scene::{SceneConfig, SourceSignal};
use crate::synth::SynthConfig;

/// A single simulated scene: shoebox room, positions and array preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub dims: Vec3,
    /// Target reverberation time; the wall coefficient is calibrated to it.
    pub t60: f64,
    pub source_pos: Vec3,
    pub array_pos: Vec3,
    pub array: String,
    pub source: SourceSignal,
    pub noise_level: f64,
    pub fs: f64,
    pub max_delay: f64,
    pub truth_horizon: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    /// The listening-test room.
    fn default() -> Self {
        SceneSpec {
            dims: [12.0, 7.0, 5.0],
            t60: 0.57,
            source_pos: [5.5, 1.2, 1.7],
            array_pos: [3.5, 3.0, 1.7],
            array: "em32".into(),
            source: SourceSignal::SpeechLike {
                min_duration: 2.5,
                max_duration: 2.5,
            },
            noise_level: 0.0,
            fs: 16_000.0,
            max_delay: 0.1,
            truth_horizon: 0.02,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.t60 > 0.0 && self.t60.is_finite()) {
            return Err(Error::invalid("scene.t60", "must be positive"));
        }
        if !(self.fs > 0.0) {
            return Err(Error::invalid("scene.fs", "must be positive"));
        }
        if !(self.max_delay > 0.0) || !(self.truth_horizon > 0.0) {
            return Err(Error::invalid("scene.max_delay", "delays must be positive"));
        }
        if !(self.noise_level >= 0.0) {
            return Err(Error::invalid("scene.noise_level", "must be non-negative"));
        }
        ArrayGeometry::preset(&self.array).map_err(|_| Error::invalid("scene.array", format!("unknown array `{}`", self.array)))?;
        let room = RoomSpec::new(self.dims, 0.5).map_err(|e| prefix("scene", e))?;
        for (key, p) in [("scene.source_pos", &self.source_pos), ("scene.array_pos", &self.array_pos)] {
            if !room.contains(p) {
                return Err(Error::invalid(key, "position lies outside the room"));
            }
        }
        Ok(())
    }

    pub fn to_scene(&self) -> Result<SceneConfig> {
        self.validate()?;
        let mut room = RoomSpec::new(self.dims, 0.5)?;
        room.wall_coeffs = [calibrate_reflection_coeff(&room, self.t60)?; 6];
        Ok(SceneConfig {
            room,
            source_pos: self.source_pos,
            array_pos: self.array_pos,
            array: ArrayGeometry::preset(&self.array)?,
            source: self.source.clone(),
            noise_level: self.noise_level,
            seed: self.seed,
            fs: self.fs,
            max_delay: self.max_delay,
            truth_horizon: self.truth_horizon,
        })
    }
}

/// The listening-test scene: 12×7×5 m, T60 0.57 s, direct sound on the
/// horizontal plane at 42° to the right.
pub fn demo_scenario() -> Result<SceneConfig> {
    SceneSpec::default().to_scene()
}

/// Every configurable parameter, one section per module.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigBundle {
    pub estimator: EstimatorConfig,
    pub matching: MatchConfig,
    pub campaign: CampaignConfig,
    pub synth: SynthConfig,
    pub scene: SceneSpec,
}

/// Prefixes the key of a validation error with its section.
fn prefix(section: &str, e: Error) -> Error {
    match e {
        Error::InvalidValue { key, message } if !key.starts_with(section) => Error::InvalidValue {
            key: format!("{section}.{key}"),
            message,
        },
        other => other,
    }
}

impl ConfigBundle {
    pub fn validate(&self) -> Result<()> {
        self.estimator.validate().map_err(|e| prefix("estimator", e))?;
        self.matching.validate().map_err(|e| prefix("matching", e))?;
        self.campaign.validate().map_err(|e| prefix("campaign", e))?;
        self.synth.validate().map_err(|e| prefix("synth", e))?;
        self.scene.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let bundle: ConfigBundle = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets every seed in the bundle.
    pub fn set_seed(&mut self, seed: u64) {
        self.campaign.seed = seed;
        self.synth.seed = seed;
        self.scene.seed = seed;
        self.estimator.clustering.seed = seed;
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_config(path: &Path) -> Result<ConfigBundle> {
    let text = std::fs::read_to_string(path)?;
    ConfigBundle::from_toml_str(&text)
}

pub fn save_config(path: &Path, bundle: &ConfigBundle) -> Result<()> {
    std::fs::write(path, bundle.to_toml_string()?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Record of one CLI run, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    /// Filled only when timing is requested; wall-clock values differ between runs.
    pub timings: Vec<StageTiming>,
    /// Emitted files relative to the output directory, sorted, including the
    /// manifest itself.
    pub outputs: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn new(command: &str, bundle: &ConfigBundle, seed: u64) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert(env!("CARGO_PKG_NAME").to_string(), env!("CARGO_PKG_VERSION").to_string());
        RunManifest {
            command: command.into(),
            config_hash: bundle.hash(),
            seed,
            versions,
            timings: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn add_output(&mut self, name: impl Into<String>) {
        self.outputs.push(name.into());
    }

    /// Writes `manifest.json` into `dir`.
    pub fn write(&mut self, dir: &Path) -> Result<()> {
        self.add_output(MANIFEST_FILE);
        self.outputs.sort();
        self.outputs.dedup();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
        Ok(())
    }
}
