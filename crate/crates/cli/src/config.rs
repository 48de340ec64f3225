//! TOML settings file. Every section is optional; keys that are present
//! override the built-in defaults, and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use warpgen::data::SceneDistribution;
use warpgen::experiment::EvalConfig;
use warpgen::models::ModelConfig;
use warpgen::train::{FitConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub clips: usize,
    #[serde(flatten)]
    pub distribution: SceneDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSection {
    pub pretrain_steps: u64,
    pub finetune_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSection,
    pub eval: EvalConfig,
    pub fit: FitConfig,
    pub schedule: ScheduleSection,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig {
                batch_size: 4,
                ..TrainConfig::default()
            },
            data: DataSection {
                clips: 64,
                distribution: SceneDistribution::default(),
            },
            eval: EvalConfig::default(),
            fit: FitConfig::default(),
            schedule: ScheduleSection {
                pretrain_steps: 2000,
                finetune_steps: 3000,
            },
        }
    }
}

fn merge(base: &mut Table, patch: &Table) {
    for (k, v) in patch {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(p)) => merge(b, p),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Every key of `patch` must survive into `resolved`; anything serde dropped
/// was not a known setting.
fn check_known(patch: &Table, resolved: &Table, prefix: &str) -> Result<(), String> {
    for (k, v) in patch {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (resolved.get(k), v) {
            (None, _) => return Err(format!("unknown setting `{path}`")),
            (Some(Value::Table(r)), Value::Table(p)) => check_known(p, r, &path)?,
            _ => {}
        }
    }
    Ok(())
}

impl Settings {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let patch: Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
        let mut base = Table::try_from(Self::default()).map_err(|e| e.to_string())?;
        merge(&mut base, &patch);
        let settings: Self = Value::Table(base).try_into().map_err(|e: toml::de::Error| e.to_string())?;
        let resolved = Table::try_from(&settings).map_err(|e| e.to_string())?;
        check_known(&patch, &resolved, "")?;
        Ok(settings)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("settings serialize to toml")
    }
}
