use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Result};
use lgnk::datagen::{FhnParams, Pde};
use lgnk::model::ModelConfig;
use lgnk::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Dataset generation settings: PDE parameters plus trajectory counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub pde: Pde,
    pub count: usize,
    #[serde(rename = "N_train")]
    pub n_train: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pde: Pde::FitzhughNagumo(FhnParams::default()),
            count: 1200,
            n_train: 1000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: Option<PathBuf>,
}

/// Raised for problems the user can fix on the command line or in the
/// config file; mapped to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Sets `a.b.c = value` inside a JSON object, creating sections as needed.
/// The value is read as JSON when it parses, otherwise as a string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| usage(format!("override {:?} is not of the form key=value", assignment)))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(usage(format!("override key {:?} has an empty segment", key)));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| usage(format!("override key {:?}: {:?} is not a section", key, parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one segment")
}

/// Strictly parses and validates a run configuration. `path = None` starts
/// from the defaults; `overrides` are applied before validation.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {}", p.display(), e)))?;
            serde_json::from_str::<Value>(&text)
                .map_err(|e| usage(format!("malformed JSON in config {}: {}", p.display(), e)))?
        }
        None => Value::Object(Default::default()),
    };
    if !doc.is_object() {
        return Err(usage("config must be a JSON object"));
    }
    if overrides.iter().any(|o| o.starts_with("data.pde.")) && doc.pointer("/data/pde").is_none() {
        let pde = serde_json::to_value(DataConfig::default().pde)?;
        apply_override(&mut doc, &format!("data.pde={}", pde))?;
    }
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let name = path.map_or_else(|| "<defaults>".to_string(), |p| p.display().to_string());
    let cfg: RunConfig =
        serde_json::from_value(doc).map_err(|e| usage(format!("invalid config {}: {}", name, e)))?;
    validate(&cfg).map_err(|e| usage(format!("invalid config {}: {}", name, e)))?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<()> {
    cfg.model.validate().map_err(|e| anyhow!("model: {}", e))?;
    let t = &cfg.train;
    if t.epochs == 0 {
        bail!("train.epochs must be positive");
    }
    if t.batch_size == 0 {
        bail!("train.batch_size must be positive");
    }
    if t.n_train == 0 || t.n_test == 0 {
        bail!("train.N_train and train.N_test must be positive");
    }
    if !(t.lr0 > 0.0) {
        bail!("train.lr0 must be positive");
    }
    if !(t.lr_min >= 0.0 && t.lr_min <= t.lr0) {
        bail!("train.lr_min must lie in [0, lr0]");
    }
    if !(t.clip_norm > 0.0) {
        bail!("train.clip_norm must be positive");
    }
    if !(t.weight_decay >= 0.0) {
        bail!("train.weight_decay must be non-negative");
    }
    cfg.data.pde.validate().map_err(|e| anyhow!("data.pde: {}", e))?;
    if cfg.data.count == 0 {
        bail!("data.count must be positive");
    }
    if cfg.data.n_train > cfg.data.count {
        bail!("data.N_train = {} exceeds data.count = {}", cfg.data.n_train, cfg.data.count);
    }
    Ok(())
}

/// Output directory: the `--out` flag, else `output_dir` from the config.
pub fn output_dir(flag: Option<&Path>, cfg: Option<&RunConfig>) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .ok_or_else(|| usage("no output directory: pass --out or set output_dir"))
}
