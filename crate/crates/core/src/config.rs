//! Experiment configuration as TOML, with dotted-key overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::data::DataSpec;
use crate::error::{Error, Result};
use crate::search::SearchSchedule;
use crate::space::SupernetConfig;
use crate::train::TrainConfig;

/// Attacks reported by `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub attacks: Vec<AttackConfig>,
    pub batch_size: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        let eps = 8.0 / 255.0;
        Self {
            attacks: vec![
                AttackConfig::fgsm(eps),
                AttackConfig::pgd(eps, 2.0 / 255.0, 7),
                AttackConfig::pgd(eps, 2.0 / 255.0, 20),
            ],
            batch_size: 64,
        }
    }
}

/// Everything one run needs. Missing sections take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "SupernetConfig::desk_scale")]
    pub supernet: SupernetConfig,
    /// Network used for final training; defaults to the genotype's own config.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<SupernetConfig>,
    #[serde(default = "desk_search")]
    pub search: SearchSchedule,
    #[serde(default = "desk_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub data: DataSpec,
}

/// 12 epochs, 8 of them single-objective, batch 16.
pub fn desk_search() -> SearchSchedule {
    SearchSchedule {
        epochs: 12,
        first_stage_epochs: 8,
        batch_size: 16,
        ..SearchSchedule::default()
    }
}

/// 20 epochs at lr 0.05 decayed at 10 and 15, batch 16.
pub fn desk_train() -> TrainConfig {
    TrainConfig {
        epochs: 20,
        lr: 0.05,
        milestones: vec![10, 15],
        batch_size: 16,
        ..TrainConfig::default()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            supernet: SupernetConfig::desk_scale(),
            network: None,
            search: desk_search(),
            train: desk_train(),
            evaluation: EvaluationConfig::default(),
            data: DataSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.supernet.validate()?;
        if let Some(n) = &self.network {
            n.validate()?;
        }
        self.search.validate()?;
        self.train.validate()?;
        for a in &self.evaluation.attacks {
            a.validate()?;
        }
        if self.evaluation.batch_size == 0 {
            return Err(Error::Config("evaluation: batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Sets the search and training seeds.
    pub fn set_seed(&mut self, seed: u64) {
        self.search.seed = seed;
        self.train.seed = seed;
    }

    /// Applies `key=value` where `key` is a dotted path such as
    /// `search.epochs` and `value` is a TOML literal; bare words are taken as
    /// strings. The result is not validated, so several overrides can be
    /// applied before [`ExperimentConfig::validate`].
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("bad override key `{key}`")));
        }
        let mut node = &mut root;
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{}` is not a table", parts[..i].join("."))))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value);
                break;
            }
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        let next: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override `{assignment}`: {}", e.message())))?;
        *self = next;
        Ok(())
    }
}
