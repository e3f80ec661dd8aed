//! `manifest.json`: the resolved configuration of an output directory and a
//! record of each stage that wrote into it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash of the configuration sections the stage depends on.
    pub fingerprint: String,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
    #[serde(default)]
    pub summary: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    /// Stage name to record, in pipeline order of first completion.
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: cfg.hash(),
            seed: cfg.seed,
            config: cfg.clone(),
            stages: BTreeMap::new(),
        }
    }

    /// Loads the manifest in `dir`, keeping stage records that are still
    /// valid for `cfg` (stages check their own fingerprints).
    pub fn open(dir: &Path, cfg: &ExperimentConfig) -> Self {
        let mut m = Self::new(cfg);
        if let Ok(text) = fs::read_to_string(dir.join(FILE_NAME)) {
            if let Ok(old) = serde_json::from_str::<Manifest>(&text) {
                m.stages = old.stages;
            }
        }
        m
    }

    pub fn is_fresh(&self, dir: &Path, stage: &str, fingerprint: &str) -> bool {
        self.stages.get(stage).is_some_and(|r| {
            r.fingerprint == fingerprint && r.outputs.iter().all(|o| dir.join(o).exists())
        })
    }

    pub fn save(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(FILE_NAME);
        let text = serde_json::to_string_pretty(self).map_err(bridgeflow::Error::from)? + "\n";
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

/// The `config` table of a manifest, so a run can be repeated from it.
pub fn config_table(manifest_json: &str) -> Result<toml::Table, String> {
    let v: Value = serde_json::from_str(manifest_json).map_err(|e| e.to_string())?;
    let cfg = v.get("config").ok_or("manifest has no `config` entry")?;
    match json_to_toml(cfg) {
        Some(toml::Value::Table(t)) => Ok(t),
        _ => Err("manifest `config` is not a table".into()),
    }
}

/// JSON nulls mark unset optional keys and are dropped.
fn json_to_toml(v: &Value) -> Option<toml::Value> {
    Some(match v {
        Value::Null => return None,
        Value::Bool(b) => toml::Value::Boolean(*b),
        Value::Number(n) => match n.as_i64() {
            Some(i) => toml::Value::Integer(i),
            None => toml::Value::Float(n.as_f64()?),
        },
        Value::String(s) => toml::Value::String(s.clone()),
        Value::Array(a) => toml::Value::Array(a.iter().filter_map(json_to_toml).collect()),
        Value::Object(o) => toml::Value::Table(
            o.iter()
                .filter_map(|(k, v)| json_to_toml(v).map(|v| (k.clone(), v)))
                .collect(),
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_manifest() {
        let mut cfg = ExperimentConfig {
            seed: 17,
            ..ExperimentConfig::default()
        };
        cfg.train.lr = 2.5e-4;
        cfg.sampler.grid = Some(vec![0.0, 0.25, 1.0]);
        cfg.sampler.steps = 2;
        let text = serde_json::to_string(&Manifest::new(&cfg)).unwrap();
        let table = config_table(&text).unwrap();
        let back: ExperimentConfig = toml::Value::Table(table).try_into().unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }
}
