//! Experiment configuration: a TOML document with one table per pipeline stage.

use std::fs;
use std::path::{Path, PathBuf};

use bridgeflow::analysis::SuiteConfig;
use bridgeflow::dynamics::{System, SystemSpec};
use bridgeflow::metrics::NORMALIZED_RANGE;
use bridgeflow::model::{Activation, ModelConfig, TimeEmbedding};
use bridgeflow::path::{LossKind, PathSchedule, PathSpec};
use bridgeflow::sampler::{SamplerConfig, Scheme};
use bridgeflow::train::{ScoreWeighting, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{in_section, CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; falls back to `BRIDGEFLOW_OUT`, then `bridgeflow-out`.
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default = "default_system")]
    pub system: SystemSpec,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub codec: CodecSection,
    #[serde(default = "default_path")]
    pub path: PathSpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub verify: SuiteConfig,
}

fn default_system() -> SystemSpec {
    SystemSpec::new(System::DampedOscillator {
        omega: 1.0,
        zeta: 0.05,
        amp_min: 0.5,
        amp_max: 1.0,
    })
}

fn default_path() -> PathSpec {
    PathSpec::Bridge {
        sigma_min: 0.001,
        sigma: 0.01,
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: None,
            system: default_system(),
            data: DataSection::default(),
            codec: CodecSection::default(),
            path: default_path(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            sampler: SamplerSection::default(),
            metrics: MetricsSection::default(),
            sweep: SweepSection::default(),
            verify: SuiteConfig::default(),
        }
    }
}

/// Corpus sizes and the forecasting split of each test trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_trajectories: usize,
    pub test_trajectories: usize,
    /// Recorded states per trajectory.
    pub steps: usize,
    pub dt: f64,
    /// Conditioning states given to the forecaster.
    pub k: usize,
    /// Forecast horizon.
    pub l: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_trajectories: 64,
            test_trajectories: 16,
            steps: 64,
            dt: 0.1,
            k: 16,
            l: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    /// Latent dimension; `min(4, d)` by default, 8 for heat2d.
    pub p: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub width: usize,
    pub depth: usize,
    pub activation: Activation,
    pub embed_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(1);
        Self {
            width: m.width,
            depth: m.depth,
            activation: m.activation,
            embed_dim: m.time_embedding.dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub loss: LossKind,
    pub score_weighting: ScoreWeighting,
    /// Checkpoint interval in iterations; 0 keeps only the first and last.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::new(2000);
        Self {
            iterations: t.iterations,
            batch_size: t.batch_size,
            lr: t.lr,
            warmup_frac: t.warmup_frac,
            loss: t.loss,
            score_weighting: t.score_weighting,
            checkpoint_every: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub scheme: Scheme,
    pub steps: usize,
    pub grid: Option<Vec<f64>>,
    pub sigma_sam: f64,
    pub ensemble: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            scheme: s.scheme,
            steps: s.steps,
            grid: s.grid,
            sigma_sam: s.sigma_sam,
            ensemble: s.ensemble,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    /// PSNR/SSIM data range in normalized units.
    pub data_range: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            data_range: NORMALIZED_RANGE,
        }
    }
}

/// Ablation grid: bridge `sigma` x integration scheme x step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub sigmas: Vec<f64>,
    pub schemes: Vec<Scheme>,
    pub steps: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            sigmas: vec![0.0, 0.01, 0.1],
            schemes: vec![Scheme::Euler, Scheme::Rk4],
            steps: vec![5, 10, 20],
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (a TOML config, or a run manifest), applies `key=value`
    /// overrides and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut table = defaults_table();
        let file = match path {
            None => Table::new(),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                if p.extension().is_some_and(|e| e == "json") {
                    crate::manifest::config_table(&text).map_err(|e| CliError::config("config", e))?
                } else {
                    text.parse::<Table>().map_err(|e| CliError::config("config", e))?
                }
            }
        };
        merge(&mut table, file);
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(Value::Table(table)).map_err(|e| {
            let key = e.path().to_string();
            CliError::config(if key == "." { "config".to_string() } else { key }, e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.system.validate(self.data.dt).map_err(|e| in_section("system", e))?;
        let d = &self.data;
        if d.train_trajectories == 0 {
            return Err(CliError::config("data.train_trajectories", "must be >= 1"));
        }
        if d.test_trajectories == 0 {
            return Err(CliError::config("data.test_trajectories", "must be >= 1"));
        }
        if d.k < 2 {
            return Err(CliError::config("data.k", "conditioning length must be >= 2"));
        }
        if d.l == 0 {
            return Err(CliError::config("data.l", "horizon must be >= 1"));
        }
        if d.k + d.l > d.steps {
            return Err(CliError::config(
                "data.steps",
                format!("must be >= k + l = {}", d.k + d.l),
            ));
        }
        let p = self.latent_dim();
        if p == 0 || p > self.system.dim() {
            return Err(CliError::config(
                "codec.p",
                format!("must be in 1..={}, got {p}", self.system.dim()),
            ));
        }
        self.schedule()?;
        self.model_config().validate().map_err(|e| in_section("model", e))?;
        self.train_config(0).validate().map_err(|e| in_section("train", e))?;
        if self.train.score_weighting == ScoreWeighting::ScoreFlow && !matches!(self.path, PathSpec::Vp { .. }) {
            return Err(CliError::config("train.score_weighting", "score_flow needs the vp path"));
        }
        self.sampler_config(0).validate().map_err(|e| in_section("sampler", e))?;
        if !(self.metrics.data_range > 0.0 && self.metrics.data_range.is_finite()) {
            return Err(CliError::config("metrics.data_range", "must be > 0"));
        }
        Ok(())
    }

    /// Checks the ablation grid, which varies the bridge path's `sigma`.
    pub fn validate_sweep(&self) -> CliResult<()> {
        self.require_flow_loss()?;
        let s = &self.sweep;
        if s.sigmas.is_empty() || s.schemes.is_empty() || s.steps.is_empty() {
            return Err(CliError::config("sweep", "every axis needs at least one value"));
        }
        if s.sigmas.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(CliError::config("sweep.sigmas", "values must be >= 0"));
        }
        if !matches!(self.path, PathSpec::Bridge { .. }) {
            return Err(CliError::config("sweep.sigmas", "sweeping sigma needs path.kind = \"bridge\""));
        }
        for &sigma in &s.sigmas {
            self.with_bridge_sigma(sigma)
                .schedule()
                .map_err(|_| CliError::config("sweep.sigmas", format!("sigma = {sigma} gives an invalid bridge path")))?;
        }
        if s.steps.contains(&0) {
            return Err(CliError::config("sweep.steps", "values must be >= 1"));
        }
        Ok(())
    }

    /// Checks that a trained model can be sampled from.
    pub fn require_flow_loss(&self) -> CliResult<()> {
        if self.train.loss != LossKind::Flow {
            return Err(CliError::config(
                "train.loss",
                "forecasting needs a flow-parametrized model",
            ));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.codec.p.unwrap_or(match self.system.system {
            System::Heat2d { .. } => 8,
            _ => self.system.dim().min(4),
        })
    }

    pub fn schedule(&self) -> CliResult<PathSchedule> {
        PathSchedule::new(self.path.clone()).map_err(|e| in_section("path", e))
    }

    /// This configuration with the bridge path's `sigma` replaced.
    pub fn with_bridge_sigma(&self, sigma: f64) -> Self {
        let mut cfg = self.clone();
        if let PathSpec::Bridge { sigma: s, .. } = &mut cfg.path {
            *s = sigma;
        }
        cfg
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            width: m.width,
            depth: m.depth,
            activation: m.activation,
            time_embedding: TimeEmbedding::flow_time(m.embed_dim),
            gap_embedding: TimeEmbedding::gap(m.embed_dim),
            ..ModelConfig::new(self.latent_dim())
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            iterations: t.iterations,
            batch_size: t.batch_size,
            lr: t.lr,
            warmup_frac: t.warmup_frac,
            seed,
            loss: t.loss,
            score_weighting: t.score_weighting,
        }
    }

    pub fn sampler_config(&self, seed: u64) -> SamplerConfig {
        let s = &self.sampler;
        SamplerConfig {
            scheme: s.scheme,
            steps: s.steps,
            grid: s.grid.clone(),
            sigma_sam: s.sigma_sam,
            ensemble: s.ensemble,
            seed,
        }
    }

    /// SHA-256 of the canonical JSON form of the resolved configuration.
    pub fn hash(&self) -> String {
        fingerprint(self)
    }
}

fn defaults_table() -> Table {
    match Value::try_from(ExperimentConfig::default()) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("the default config serializes to a table"),
    }
}

/// Tables tagged with a `kind` are replaced, not merged, when the kind changes.
fn replaces(base: &Table, incoming: &Table) -> bool {
    incoming.get("kind").is_some_and(|k| base.get("kind") != Some(k))
}

/// Deep-merges `incoming` into `base`.
fn merge(base: &mut Table, incoming: Table) {
    for (key, value) in incoming {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(t)) if !replaces(b, &t) => merge(b, t),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

pub fn fingerprint<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes to JSON");
    hex::encode(Sha256::digest(&json))
}

/// Sets a dotted key such as `train.lr=5e-4`. Values are parsed as TOML
/// literals, falling back to a bare string.
pub fn apply_override(table: &mut Table, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{assignment}` is not of the form KEY=VALUE")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(key, "empty key segment"));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut node = table;
    for (i, part) in parents.iter().enumerate() {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(parts[..=i].join("."), "is not a table"))?;
    }
    if *last == "kind" && node.get("kind") != Some(&value) {
        node.clear();
    }
    node.insert(last.to_string(), value);
    Ok(())
}
