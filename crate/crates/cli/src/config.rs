//! Run configuration: one TOML file with a section per stage, plus
//! `--set section.key=value` overrides.

use std::path::{Path, PathBuf};

use disentangle::factorgen::GeneratorConfig;
use disentangle::model::{Mode, ModelConfig, PretrainConfig};
use disentangle::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Which part of the dataset `eval`, `synthesize` read.
    pub split: Split,
    /// Number of samples `synthesize` renders panels for.
    pub panels: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { split: Split::Test, panels: 8 }
    }
}

/// Input and output locations. Unset paths default to files under `out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub out: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub identity: Option<PathBuf>,
    /// Model checkpoint read by eval, synthesize and export-embeddings.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self { out: PathBuf::from("out"), dataset: None, identity: None, checkpoint: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    /// Seed for network initialization.
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Ipd,
            seed: 0,
            generator: GeneratorConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: Paths::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

/// Command-line settings layered over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub out: Option<PathBuf>,
    pub set: Vec<String>,
}

impl RunConfig {
    /// Parse `text`, apply `--set` assignments, then the dedicated flags.
    pub fn from_toml(text: &str, overrides: &Overrides) -> Result<Self, ConfigError> {
        let mut doc: toml::Table = text.parse().map_err(|e| ConfigError(format!("invalid config: {e}")))?;
        for assignment in &overrides.set {
            apply_assignment(&mut doc, assignment)?;
        }
        let mut cfg: RunConfig =
            RunConfig::deserialize(doc).map_err(|e| ConfigError(format!("invalid config: {e}")))?;
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
            cfg.generator.seed = seed;
            cfg.pretrain.seed = seed;
            cfg.train.seed = seed;
        }
        if let Some(mode) = overrides.mode {
            cfg.mode = mode;
        }
        if let Some(out) = &overrides.out {
            cfg.paths.out.clone_from(out);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| ConfigError(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |e: disentangle::Error| ConfigError(e.to_string());
        self.generator.validate().map_err(wrap)?;
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        if self.pretrain.epochs == 0 || self.pretrain.batch_size == 0 || !(self.pretrain.lr > 0.0) {
            return Err(ConfigError("pretrain needs epochs, batch_size and lr > 0".into()));
        }
        if self.train.test_fold >= self.generator.n_folds {
            return Err(ConfigError(format!(
                "train.test_fold {} out of range for {} folds",
                self.train.test_fold, self.generator.n_folds
            )));
        }
        // Echoing the config needs every integer to fit TOML's signed range.
        for seed in [self.seed, self.generator.seed, self.pretrain.seed, self.train.seed] {
            if i64::try_from(seed).is_err() {
                return Err(ConfigError(format!("seed {seed} exceeds {}", i64::MAX)));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("validated config serializes")
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.paths.dataset.clone().unwrap_or_else(|| self.paths.out.join("dataset.bin"))
    }

    pub fn identity_path(&self) -> PathBuf {
        self.paths.identity.clone().unwrap_or_else(|| self.paths.out.join("identity.ckpt"))
    }

    /// Directory holding one mode's checkpoints, logs and reports.
    pub fn run_dir(&self) -> PathBuf {
        self.paths.out.join(self.mode.as_str())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths.checkpoint.clone().unwrap_or_else(|| self.run_dir().join("final.ckpt"))
    }
}

/// Apply `a.b.c=value`. The value is read as a TOML value when it parses as
/// one and as a bare string otherwise.
fn apply_assignment(doc: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("--set expects key=value, got `{assignment}`")))?;
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError(format!("invalid key `{key}`")));
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| ConfigError(format!("`{part}` in `{key}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
