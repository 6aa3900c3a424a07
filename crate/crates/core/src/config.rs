//! Layered run configuration: defaults < preset < TOML file < `key=value`
//! overrides. Every layer is merged into the serialized defaults tree, so a
//! key the defaults do not have is an error rather than silently ignored.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::envmemory::ModelConfig;
use crate::epm::LocalizerConfig;
use crate::localstate::DirectionParams;
use crate::observation::ObservationParams;
use crate::pretrain::{EvalOptions, PretrainConfig};
use crate::room::RoomConfig;
use crate::worldgen::GenParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {key:?}: {msg}")]
    Type { key: String, msg: String },
    #[error("override {0:?} is not key=value")]
    Override(String),
    #[error("unknown preset {0:?} (expected desk or paper)")]
    Preset(String),
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            _ => Err(ConfigError::Preset(s.to_string())),
        }
    }
}

/// Walkthrough generation and annotation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Environments generated by `gen-env --count` when not given.
    pub envs: usize,
    pub walks_per_env: usize,
    pub steps: usize,
    pub gen: GenParams,
    pub obs: ObservationParams,
    pub direction: DirectionParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            envs: 16,
            walks_per_env: 64,
            steps: 128,
            gen: GenParams::default(),
            obs: ObservationParams::default(),
            direction: DirectionParams::default(),
        }
    }
}

/// Room-task instance sampling and split settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomTaskConfig {
    pub classifier: RoomConfig,
    pub train_per_episode: usize,
    pub eval_per_episode: usize,
    pub hard_fraction: f64,
}

impl Default for RoomTaskConfig {
    fn default() -> Self {
        Self { classifier: RoomConfig::default(), train_per_episode: 8, eval_per_episode: 8, hard_fraction: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct Config {
    pub data: DataConfig,
    /// `feature_dim` and `n_classes` are taken from the data at run time.
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub eval: EvalOptions,
    pub room: RoomTaskConfig,
    pub epm: LocalizerConfig,
}


fn preset_layer(p: Preset) -> Value {
    match p {
        // small benchmark: a frozen backbone keeps the downstream runs cheap
        Preset::Desk => json!({
            "data": { "envs": 16, "walks_per_env": 64, "steps": 128 },
            "pretrain": { "epochs": 40, "lr": 1e-3 },
            "room": { "classifier": { "freeze": true, "lr": 1e-3, "epochs": 30 } },
            "epm": { "freeze": true, "epochs": 12, "queries_per_walk": 8 },
        }),
        Preset::Paper => json!({
            "data": { "envs": 71, "walks_per_env": 600, "steps": 128 },
            "pretrain": { "epochs": 200, "lr": 1e-4 },
            "room": { "classifier": { "freeze": false, "lr": 1e-4 } },
            "epm": { "freeze": false },
        }),
    }
}

/// Merges `layer` into `base`, rejecting keys `base` lacks.
fn merge(base: &mut Value, layer: &Value, prefix: &str) -> Result<(), ConfigError> {
    let (Value::Object(b), Value::Object(l)) = (&mut *base, layer) else {
        return Err(ConfigError::Type { key: prefix.to_string(), msg: "expected a table".into() });
    };
    for (k, v) in l {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let slot = b.get_mut(k).ok_or_else(|| ConfigError::UnknownKey(key.clone()))?;
        match (slot.is_object(), v.is_object()) {
            (true, true) => merge(slot, v, &key)?,
            (true, false) => return Err(ConfigError::Type { key, msg: "expected a table".into() }),
            (false, true) if !slot.is_null() => return Err(ConfigError::Type { key, msg: "expected a value, got a table".into() }),
            _ => *slot = v.clone(),
        }
    }
    Ok(())
}

/// Parses the right side of `key=value`: JSON/TOML literals where they
/// parse, bare strings otherwise.
fn parse_value(s: &str) -> Value {
    let t = s.trim();
    if let Ok(v) = serde_json::from_str::<Value>(t) {
        return v;
    }
    match t {
        "on" => Value::Bool(true),
        "off" => Value::Bool(false),
        _ => Value::String(t.to_string()),
    }
}

fn nest(key: &str, v: Value) -> Value {
    key.rsplit('.').fold(v, |acc, part| json!({ part: acc }))
}

/// Builds configs from layers; `resolve` deserializes the merged tree.
#[derive(Debug, Clone)]
pub struct ConfigBuilder {
    tree: Value,
}

impl Default for ConfigBuilder {
    fn default() -> Self {
        Self { tree: serde_json::to_value(Config::default()).expect("config serializes") }
    }
}

impl ConfigBuilder {
    pub fn preset(mut self, p: Preset) -> Result<Self, ConfigError> {
        merge(&mut self.tree, &preset_layer(p), "")?;
        Ok(self)
    }

    pub fn toml_str(mut self, text: &str, origin: &str) -> Result<Self, ConfigError> {
        let t: toml::Table = toml::from_str(text).map_err(|e| ConfigError::File { path: origin.to_string(), msg: e.to_string() })?;
        let v = serde_json::to_value(t).map_err(|e| ConfigError::File { path: origin.to_string(), msg: e.to_string() })?;
        merge(&mut self.tree, &v, "")?;
        Ok(self)
    }

    pub fn file(self, path: &Path) -> Result<Self, ConfigError> {
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File { path: origin.clone(), msg: e.to_string() })?;
        self.toml_str(&text, &origin)
    }

    /// One `dotted.key=value` override.
    pub fn set(mut self, kv: &str) -> Result<Self, ConfigError> {
        let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::Override(kv.to_string()))?;
        let k = k.trim();
        if k.is_empty() || k.split('.').any(str::is_empty) {
            return Err(ConfigError::Override(kv.to_string()));
        }
        merge(&mut self.tree, &nest(k, parse_value(v)), "")?;
        Ok(self)
    }

    pub fn set_value(mut self, key: &str, v: Value) -> Result<Self, ConfigError> {
        merge(&mut self.tree, &nest(key, v), "")?;
        Ok(self)
    }

    pub fn tree(&self) -> &Value {
        &self.tree
    }

    pub fn resolve(&self) -> Result<Config, ConfigError> {
        let c: Config = serde_json::from_value(self.tree.clone()).map_err(|e| ConfigError::Type { key: "(config)".into(), msg: e.to_string() })?;
        c.validate()?;
        Ok(c)
    }
}

impl Config {
    pub fn preset(p: Preset) -> Self {
        ConfigBuilder::default().preset(p).and_then(|b| b.resolve()).expect("presets are valid")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: String| ConfigError::Invalid(e);
        if self.data.steps == 0 || self.data.walks_per_env == 0 {
            return Err(inv("data.steps and data.walks_per_env must be positive".into()));
        }
        self.pretrain.validate().map_err(|e| inv(e.to_string()))?;
        self.room.classifier.validate().map_err(|e| inv(e.to_string()))?;
        self.epm.validate().map_err(|e| inv(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.room.hard_fraction) {
            return Err(inv("room.hard_fraction must lie in [0, 1]".into()));
        }
        let m = ModelConfig { feature_dim: self.data.obs.feature_dim(self.model.n_classes), ..self.model };
        m.validate().map_err(|e| inv(e.to_string()))
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layers_apply_in_order() {
        let c = ConfigBuilder::default()
            .preset(Preset::Desk)
            .unwrap()
            .toml_str("[pretrain]\nlr = 0.5\nepochs = 3\n", "inline")
            .unwrap()
            .set("pretrain.epochs=7")
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!((c.pretrain.lr, c.pretrain.epochs), (0.5, 7));
        assert_eq!(c.data.walks_per_env, 64);
    }

    #[test]
    fn unknown_keys_rejected_in_every_layer() {
        let b = ConfigBuilder::default();
        assert!(matches!(b.clone().set("pretrain.lrr=1"), Err(ConfigError::UnknownKey(k)) if k == "pretrain.lrr"));
        assert!(matches!(b.clone().toml_str("[nope]\nx = 1\n", "f"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(b.set("pretrain=3"), Err(ConfigError::Type { .. })));
    }

    #[test]
    fn enum_and_optional_values_override() {
        let c = ConfigBuilder::default()
            .set("pretrain.objective=ssl")
            .unwrap()
            .set("pretrain.pose_mode=none")
            .unwrap()
            .set("pretrain.grad_clip=1.5")
            .unwrap()
            .set("epm.env_feat=off")
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(c.pretrain.objective, crate::pretrain::Objective::SslMasked);
        assert_eq!(c.pretrain.grad_clip, Some(1.5));
        assert!(!c.epm.env_feat);
        let c = ConfigBuilder::default().set("pretrain.objective=scratch").unwrap().resolve().unwrap();
        assert_eq!(c.pretrain.objective, crate::pretrain::Objective::None);
    }

    #[test]
    fn bad_values_fail_resolution() {
        assert!(ConfigBuilder::default().set("pretrain.epochs=0").unwrap().resolve().is_err());
        assert!(ConfigBuilder::default().set("pretrain.objective=magic").unwrap().resolve().is_err());
    }

    #[test]
    fn presets_resolve() {
        assert_eq!(Config::preset(Preset::Paper).pretrain.epochs, 200);
        assert_eq!(Config::preset(Preset::Desk).pretrain.lr, 1e-3);
    }
}
