//! Run configuration: one TOML or JSON file, flag overrides on top.

use std::path::{Path, PathBuf};

use lassr_core::arm::ArmConfig;
use lassr_core::classifier::ClassifierConfig;
use lassr_core::evaluator::{ChannelPolicy, TileConfig};
use lassr_core::losses::LossConfig;
use lassr_core::networks::ModelConfig;
use lassr_core::trainer::{TrainConfig, TrainSetup};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// SR corpus manifest used by `train`.
    pub manifest: PathBuf,
    /// Labeled manifest used by `classify`.
    pub classify_manifest: PathBuf,
    /// Where commands write their outputs unless `--out` is given.
    pub out_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: "data/sr/manifest.json".into(),
            classify_manifest: "data/classify/manifest.json".into(),
            out_dir: "runs".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tile: usize,
    pub overlap: usize,
    pub profile_channel: ChannelPolicy,
    /// Row sampled by `profile`; the middle row when unset.
    pub profile_row: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let t = TileConfig::default();
        Self { tile: t.tile, overlap: t.overlap, profile_channel: ChannelPolicy::Mean, profile_row: None }
    }
}

impl EvalConfig {
    pub fn tiles(&self) -> TileConfig {
        TileConfig { tile: self.tile, overlap: self.overlap }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub arm: ArmConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub classify: ClassifierConfig,
}

impl RunConfig {
    /// Read a config file; `.toml` is parsed as TOML, anything else as JSON.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let value = read_value(path)?;
        Self::from_value(value)
    }

    /// Build from a raw tree, reporting every unknown key and every invalid
    /// section at once.
    pub fn from_value(value: Value) -> Result<Self, CliError> {
        let mut problems: Vec<String> = unknown_keys(&value).into_iter().map(|k| format!("{k}: unknown key")).collect();
        if !problems.is_empty() {
            return Err(CliError::config(problems));
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::config(vec![e.to_string()]))?;
        problems.extend(cfg.problems());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(CliError::config(problems))
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    fn problems(&self) -> Vec<String> {
        let checks = [
            ("model", self.model.validate()),
            ("train", self.train.validate()),
            ("arm", self.arm.validate()),
            ("loss", self.loss.validate()),
            ("eval", self.eval.tiles().validate()),
            ("classify", self.classify.validate()),
        ];
        let mut out: Vec<String> =
            checks.into_iter().filter_map(|(section, r)| r.err().map(|e| format!("{section}: {e}"))).collect();
        if self.model.discriminator.input_size != self.train.patch_size {
            out.push(format!(
                "model.discriminator.input_size: must equal train.patch_size ({} vs {})",
                self.model.discriminator.input_size, self.train.patch_size
            ));
        }
        out
    }

    pub fn train_setup(&self) -> TrainSetup {
        TrainSetup {
            seed: self.seed,
            model: self.model.clone(),
            train: self.train.clone(),
            loss: self.loss.clone(),
            arm: self.arm.clone(),
        }
    }

    /// Apply `key=value` overrides (dotted keys) on top of this config.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut tree = self.to_value();
        let mut problems = Vec::new();
        for (key, raw) in overrides {
            if let Err(p) = set_path(&mut tree, key, parse_scalar(raw)) {
                problems.push(p);
            }
        }
        if !problems.is_empty() {
            return Err(CliError::config(problems));
        }
        Self::from_value(tree)
    }
}

fn read_value(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::from(lassr_core::Error::io(path, e)))?;
    let parsed = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml")) {
        toml::from_str::<Value>(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str::<Value>(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::config(vec![format!("{}: {e}", path.display())]))
}

/// Dotted paths present in `value` but absent from the default config.
pub fn unknown_keys(value: &Value) -> Vec<String> {
    fn walk(given: &Value, reference: &Value, prefix: &str, out: &mut Vec<String>) {
        let (Value::Object(g), Value::Object(r)) = (given, reference) else { return };
        for (k, v) in g {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match r.get(k) {
                None => out.push(path),
                Some(rv) => walk(v, rv, &path, out),
            }
        }
    }
    let mut out = Vec::new();
    if value.is_object() {
        walk(value, &RunConfig::default().to_value(), "", &mut out);
    } else {
        out.push("<root>: expected a table".into());
    }
    out
}

/// Every leaf key of the default config with its value, one per line.
pub fn defaults_listing() -> String {
    fn walk(v: &Value, prefix: &str, out: &mut Vec<String>) {
        match v {
            Value::Object(m) => {
                for (k, v) in m {
                    let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(v, &path, out);
                }
            }
            Value::Null => out.push(format!("  {prefix} = (unset)")),
            other => out.push(format!("  {prefix} = {other}")),
        }
    }
    let mut lines = Vec::new();
    walk(&RunConfig::default().to_value(), "", &mut lines);
    lines.join("\n")
}

fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<(), String> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map: &mut Map<String, Value> = node.as_object_mut().ok_or_else(|| format!("{key}: unknown key"))?;
        if !map.contains_key(*part) {
            return Err(format!("{key}: unknown key"));
        }
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.get_mut(*part).expect("checked above");
    }
    Err(format!("{key}: empty key"))
}
