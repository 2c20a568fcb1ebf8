//! Run configuration: a named profile overlaid with an optional TOML file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ablation::AblationConfig;
use crate::branch::AttributeId;
use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::eval::{ModeMax, DEFAULT_THRESHOLD};
use crate::model::ModelConfig;
use crate::synth::{FrameStorage, SceneConfig};
use crate::track::TrackerConfig;
use crate::train::TrainingConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    PaperDefault,
    Toy,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::PaperDefault => "paper-default",
            Profile::Toy => "toy",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-default" => Ok(Profile::PaperDefault),
            "toy" => Ok(Profile::Toy),
            _ => Err(Error::Config(format!("unknown profile '{s}' (expected paper-default or toy)"))),
        }
    }
}

/// Clips per attribute for each generated split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub storage: FrameStorage,
    pub train: BTreeMap<AttributeId, usize>,
    pub val: BTreeMap<AttributeId, usize>,
    pub test: BTreeMap<AttributeId, usize>,
}

impl DataConfig {
    fn uniform(train: usize, val: usize, test: usize) -> Self {
        let each = |n| AttributeId::ALL.iter().map(|&a| (a, n)).collect();
        Self { storage: FrameStorage::Png, train: each(train), val: each(val), test: each(test) }
    }

    pub fn counts(&self, split: &str) -> Result<&BTreeMap<AttributeId, usize>> {
        match split {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(Error::Config(format!("unknown split '{split}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Center-error threshold in pixels for PR.
    pub threshold: f64,
    pub mode_max: ModeMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub profile: Profile,
    pub seed: u64,
    /// Not part of the digest.
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub scene: SceneConfig,
    pub data: DataConfig,
    pub training: TrainingConfig,
    pub tracker: TrackerConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let eval = EvalConfig { threshold: DEFAULT_THRESHOLD, mode_max: ModeMax::Aggregate };
        match profile {
            Profile::PaperDefault => Self {
                version: CONFIG_VERSION,
                profile,
                seed: 0,
                out_dir: PathBuf::from("runs/paper-default"),
                model: ModelConfig::default(),
                scene: SceneConfig::default(),
                data: DataConfig::uniform(20, 4, 4),
                training: TrainingConfig::paper_default(),
                tracker: TrackerConfig::default(),
                eval,
                ablation: AblationConfig::paper_default(),
            },
            Profile::Toy => Self {
                version: CONFIG_VERSION,
                profile,
                seed: 0,
                out_dir: PathBuf::from("runs/toy"),
                model: ModelConfig::toy(),
                scene: SceneConfig { frames: 12, ..SceneConfig::default() },
                data: DataConfig::uniform(2, 1, 1),
                training: TrainingConfig::toy(),
                tracker: TrackerConfig::default(),
                eval,
                ablation: AblationConfig::toy(),
            },
        }
    }

    /// Profile defaults overlaid with `overlay`. Tables merge key by key;
    /// any other value replaces the default. A `profile` key in the overlay
    /// selects the base unless `profile` is given explicitly.
    pub fn from_toml(overlay: &str, profile: Option<Profile>) -> Result<Self> {
        let over: toml::Value = toml::from_str(overlay).map_err(|e| Error::Config(e.to_string()))?;
        let from_file = match over.get("profile") {
            Some(toml::Value::String(s)) => Some(s.parse()?),
            Some(_) => return Err(Error::Config("profile must be a string".into())),
            None => None,
        };
        if let Some(v) = over.get("version") {
            if v.as_integer() != Some(CONFIG_VERSION as i64) {
                return Err(Error::Config(format!("unsupported config version {v}")));
            }
        }
        let profile = profile.or(from_file).unwrap_or(Profile::Toy);
        let mut base = toml::Value::try_from(Self::profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, over);
        if let toml::Value::Table(t) = &mut base {
            t.insert("profile".into(), toml::Value::String(profile.to_string()));
        }
        let cfg: Self = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile: Option<Profile>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?, profile)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {}", self.version)));
        }
        self.model.validate()?;
        self.scene.validate()?;
        self.training.validate()?;
        self.tracker.validate()?;
        self.ablation.validate()?;
        if !(self.eval.threshold >= 0.0) {
            return Err(Error::Config(format!("eval threshold {} must be >= 0", self.eval.threshold)));
        }
        for split in ["train", "val", "test"] {
            if self.data.counts(split)?.values().any(|&n| n == 0) {
                return Err(Error::Config(format!("data.{split}: counts must be >= 1")));
            }
        }
        Ok(())
    }

    /// Stable hash of everything that affects results.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        json_digest(&c)
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate_and_roundtrip() {
        for p in [Profile::Toy, Profile::PaperDefault] {
            let c = RunConfig::profile(p);
            c.validate().unwrap();
            let back = RunConfig::from_toml(&c.to_toml().unwrap(), None).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn overlay_merges_nested_keys() {
        let c = RunConfig::from_toml("seed = 9\n[training.attr]\nepochs = 2\n[model]\ninput_size = 48\n", None).unwrap();
        let base = RunConfig::profile(Profile::Toy);
        assert_eq!(c.seed, 9);
        assert_eq!(c.training.attr.epochs, 2);
        assert_eq!(c.training.attr.lr, base.training.attr.lr);
        assert_eq!(c.model.input_size, 48);
        assert_eq!(c.model.channels, base.model.channels);
    }

    #[test]
    fn profile_flag_beats_file() {
        let c = RunConfig::from_toml("profile = \"toy\"\n", Some(Profile::PaperDefault)).unwrap();
        assert_eq!(c.profile, Profile::PaperDefault);
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn rejects_unknown_keys_and_versions() {
        assert!(RunConfig::from_toml("bogus = 1\n", None).is_err());
        assert!(RunConfig::from_toml("[model]\nbogus = 1\n", None).is_err());
        assert!(RunConfig::from_toml("version = 2\n", None).is_err());
        assert!(RunConfig::from_toml("profile = \"huge\"\n", None).is_err());
    }

    #[test]
    fn digest_ignores_out_dir() {
        let a = RunConfig::profile(Profile::Toy);
        let mut b = a.clone();
        b.out_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }
}
