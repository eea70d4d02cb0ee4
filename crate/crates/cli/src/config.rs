//! Experiment configuration: TOML on disk, `key=value` overrides, defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use suscept::analysis::TopSelection;
use suscept::model::parse_head_label;
use suscept::report::Scheme;
use suscept::sampler::SgldConfig;
use thiserror::Error;
use toml::Value;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(String),
    #[error("override {0:?} is not of the form key=value")]
    Override(String),
    #[error("override key {key:?}: {msg}")]
    OverrideKey { key: String, msg: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedPath {
    pub id: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub base: PathBuf,
    #[serde(default)]
    pub probes: Vec<NamedPath>,
    /// JSON array of decoded token strings; a synthetic decoder is used when absent.
    #[serde(default)]
    pub decoder: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerTokenConfig {
    pub contexts: usize,
    pub context_seed: u64,
}

impl Default for PerTokenConfig {
    fn default() -> Self {
        Self {
            contexts: 160,
            context_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PcaSource {
    #[default]
    PerToken,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcaConfig {
    pub source: PcaSource,
    /// Checkpoint to analyze; the last one when unset.
    pub checkpoint: Option<String>,
    pub k: usize,
    /// Token instances sampled per dataset.
    pub sample_size: usize,
    pub sample_seed: u64,
    pub quantile: f64,
    pub min_tokens: usize,
}

impl Default for PcaConfig {
    fn default() -> Self {
        let top = TopSelection::default();
        Self {
            source: PcaSource::PerToken,
            checkpoint: None,
            k: 5,
            sample_size: 20_000,
            sample_seed: 0,
            quantile: top.quantile,
            min_tokens: top.min_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub k: usize,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self { k: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub checkpoint: Option<String>,
    pub scheme: Scheme,
    pub window: usize,
    pub top_k: usize,
    /// Probe contexts drawn in the stacked all-component view.
    pub contexts: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            scheme: Scheme::Quadratic,
            window: 200,
            top_k: 100,
            contexts: 4,
        }
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_delta_h() -> f64 {
    0.1
}

fn default_components() -> Vec<String> {
    vec!["all".into()]
}

fn default_per_token_sgld() -> SgldConfig {
    SgldConfig::per_token()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_delta_h")]
    pub delta_h: f64,
    #[serde(default)]
    pub shuffle_seed: u64,
    /// Head labels `layer:head`, `all` for every head, `full` for no restriction.
    #[serde(default = "default_components")]
    pub components: Vec<String>,
    pub checkpoints: Vec<NamedPath>,
    pub data: DataConfig,
    /// Chains for susceptibility grids. `seed` is replaced per cell.
    #[serde(default)]
    pub sgld: SgldConfig,
    #[serde(default = "default_per_token_sgld")]
    pub per_token_sgld: SgldConfig,
    #[serde(default)]
    pub per_token: PerTokenConfig,
    #[serde(default)]
    pub pca: PcaConfig,
    #[serde(default)]
    pub trajectory: TrajectoryConfig,
    #[serde(default)]
    pub report: ReportConfig,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.delta_h > 0.0 && self.delta_h <= 1.0) {
            return bad(format!("delta_h = {} must lie in (0, 1]", self.delta_h));
        }
        if self.checkpoints.is_empty() {
            return bad("at least one checkpoint is required".into());
        }
        for (kind, list) in [("checkpoint", &self.checkpoints), ("probe", &self.data.probes)] {
            for (i, a) in list.iter().enumerate() {
                if !valid_id(&a.id) {
                    return bad(format!("{kind} id {:?} may only use letters, digits, '.', '_' and '-'", a.id));
                }
                if list[..i].iter().any(|b| b.id == a.id) {
                    return bad(format!("duplicate {kind} id {:?}", a.id));
                }
            }
        }
        if self.components.is_empty() {
            return bad("component list is empty".into());
        }
        for c in &self.components {
            if c != "all" && c != "full" && parse_head_label(c).is_none() {
                return bad(format!("component {c:?} is not `all`, `full` or layer:head"));
            }
        }
        for (name, s) in [("sgld", &self.sgld), ("per_token_sgld", &self.per_token_sgld)] {
            s.validate().map_err(|e| ConfigError::Invalid(format!("{name}: {e}")))?;
        }
        if self.per_token.contexts == 0 {
            return bad("per_token.contexts must be at least 1".into());
        }
        if self.pca.k == 0 || self.trajectory.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.pca.quantile > 0.0 && self.pca.quantile <= 1.0) {
            return bad(format!("pca.quantile = {} must lie in (0, 1]", self.pca.quantile));
        }
        if self.report.top_k == 0 || self.report.contexts == 0 {
            return bad("report.top_k and report.contexts must be at least 1".into());
        }
        for id in [&self.pca.checkpoint, &self.report.checkpoint].into_iter().flatten() {
            if !self.checkpoints.iter().any(|c| c.id == *id) {
                return bad(format!("unknown checkpoint {id:?}"));
            }
        }
        Ok(())
    }

    pub fn top_selection(&self) -> TopSelection {
        TopSelection {
            quantile: self.pca.quantile,
            min_tokens: self.pca.min_tokens,
        }
    }

    /// SHA-256 of the configuration as written, before paths are resolved.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn resolve(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.data.base);
        if let Some(d) = self.data.decoder.as_mut() {
            fix(d);
        }
        for p in self.data.probes.iter_mut().chain(self.checkpoints.iter_mut()) {
            fix(&mut p.path);
        }
    }
}

/// A validated config whose relative paths point next to the file it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub digest: String,
}

fn parse_value(raw: &str) -> Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value`, creating tables on the way. Numeric segments index arrays.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(assignment.to_string()));
    }
    let err = |msg: &str| ConfigError::OverrideKey {
        key: key.to_string(),
        msg: msg.to_string(),
    };
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Table(t) => {
                if last {
                    t.insert(part.to_string(), parse_value(raw.trim()));
                    return Ok(());
                }
                t.entry(part.to_string()).or_insert_with(|| Value::Table(Default::default()))
            }
            Value::Array(a) => {
                let idx: usize = part.parse().map_err(|_| err("expected an array index"))?;
                let slot = a.get_mut(idx).ok_or_else(|| err("array index out of range"))?;
                if last {
                    *slot = parse_value(raw.trim());
                    return Ok(());
                }
                slot
            }
            _ => return Err(err("path runs through a scalar")),
        };
    }
    unreachable!("loop returns on the last segment")
}

pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let mut value: Value = toml::from_str::<toml::Table>(text)
        .map(Value::Table)
        .map_err(|e| ConfigError::Parse(e.to_string()))?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let config: ExperimentConfig = value.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<LoadedConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let mut config = parse_config(&text, overrides)?;
    let digest = config.digest();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    config.resolve(dir);
    Ok(LoadedConfig { config, digest })
}
