use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::corpus::{Corpus, SplitConfig};
use crate::model::ModelConfig;
use crate::norm::NormConfig;
use crate::optim::OptimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub warmup: usize,
    pub micro_batch: usize,
    pub grad_accum: usize,
    /// Cosine floor as a fraction of each group's peak learning rate.
    pub min_lr_ratio: f64,
    pub eval_every: usize,
    pub eval_tokens: usize,
    pub diag_every: usize,
    /// `0` writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// A train loss above `divergence_ratio * ln(vocab)` counts as divergence.
    pub divergence_ratio: f64,
    /// Required improvement (nats) of the final window over the first
    /// post-warmup window; less is reported as a plateau.
    pub plateau_tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            warmup: 60,
            micro_batch: 8,
            grad_accum: 2,
            min_lr_ratio: 0.0,
            eval_every: 50,
            eval_tokens: 65_536,
            diag_every: 10,
            checkpoint_every: 200,
            divergence_ratio: 2.0,
            plateau_tolerance: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Byte corpus to train on; the built-in synthetic corpus when unset.
    pub corpus: Option<PathBuf>,
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            train_fraction: SplitConfig::default().train_fraction,
        }
    }
}

impl DataConfig {
    pub fn split(&self) -> SplitConfig {
        SplitConfig {
            train_fraction: self.train_fraction,
        }
    }

    pub fn load(&self) -> Result<Corpus, HarnessError> {
        match &self.corpus {
            Some(path) => Ok(Corpus::from_file(path)?),
            None => Ok(Corpus::builtin()),
        }
    }
}

/// Full description of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub norm: NormConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            model: ModelConfig::default(),
            norm: NormConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg = |e: String| HarnessError::Config(e);
        self.model.validate().map_err(cfg)?;
        self.norm.validate().map_err(cfg)?;
        self.optim.validate().map_err(|e| cfg(e.to_string()))?;
        let t = &self.train;
        if t.steps == 0 || t.micro_batch == 0 || t.grad_accum == 0 {
            return Err(cfg("train.steps, train.micro_batch and train.grad_accum must be positive".into()));
        }
        if t.warmup > t.steps {
            return Err(cfg(format!("train.warmup ({}) exceeds train.steps ({})", t.warmup, t.steps)));
        }
        if !(0.0..=1.0).contains(&t.min_lr_ratio) {
            return Err(cfg("train.min_lr_ratio must lie in [0, 1]".into()));
        }
        if self.model.vocab < 256 && self.data.corpus.is_none() {
            return Err(cfg("byte corpora need model.vocab >= 256".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config is always representable as TOML")
    }

    /// Reads an optional TOML file, applies `key.path=value` overrides in
    /// order, then validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut table: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| HarnessError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                text.parse().map_err(|e: toml::de::Error| HarnessError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("run config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn run_id(&self) -> String {
        format!("run_{}", self.hash())
    }
}

/// Applies one `a.b.c=value` override. The value is parsed as a TOML value
/// when possible (numbers, booleans, arrays, quoted strings) and taken as a
/// bare string otherwise.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), HarnessError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override '{spec}' is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(HarnessError::Config(format!("override '{spec}' has an empty key segment")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = table;
    for part in parts {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("override '{spec}': '{part}' is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
