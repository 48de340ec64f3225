use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Precision};
use crate::error::{Error, Result};
use crate::field::DEFAULT_EDGE_BETA;
use crate::models::InitMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[default]
    Pretrain,
    Finetune,
}

/// Ablation switches for the fine-tuning stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Ablation {
    /// Zero the canonical features fed to the deformation generator.
    pub no_fc: bool,
    /// Drop the temporal smoothness term.
    pub no_reg: bool,
    /// Freeze the pretrained canonical generator.
    pub fix_gc: bool,
    /// Fine-tune from a fresh canonical generator.
    pub no_pretrain: bool,
    pub init_mode: InitMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lambda_reg: f64,
    pub frames_per_clip: usize,
    pub adam: AdamConfig,
    pub r1_gamma: f64,
    pub r1_interval: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub edge_beta: f64,
    pub ablation: Ablation,
    pub log_interval: u64,
    pub checkpoint_interval: u64,
    /// Diagnostic: detach the canonical image where it enters the warp, so
    /// the canonical generator only learns through its conditioning features.
    pub detach_canonical_image: bool,
    /// Single-precision convolution products (storage stays double).
    pub mixed_precision: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            lambda_reg: 1.0,
            frames_per_clip: 3,
            adam: AdamConfig::default(),
            r1_gamma: 0.5,
            r1_interval: 16,
            total_steps: 2000,
            batch_size: 8,
            seed: 0,
            edge_beta: DEFAULT_EDGE_BETA,
            ablation: Ablation::default(),
            log_interval: 50,
            checkpoint_interval: 500,
            detach_canonical_image: false,
            mixed_precision: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, has_pretrained: bool) -> Result<()> {
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::Config(format!("lambda_reg must be >= 0, got {}", self.lambda_reg)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.frames_per_clip == 0 {
            return Err(Error::Config("frames_per_clip must be at least 1".into()));
        }
        if !(self.r1_gamma >= 0.0) || self.r1_interval == 0 {
            return Err(Error::Config("r1_gamma must be >= 0 and r1_interval >= 1".into()));
        }
        if self.stage == Stage::Finetune {
            let a = &self.ablation;
            if a.fix_gc && (a.no_pretrain || !has_pretrained) {
                return Err(Error::Config("fix_gc requires a pretrained checkpoint".into()));
            }
            if !a.no_pretrain && !has_pretrained {
                return Err(Error::Config(
                    "fine-tuning needs a pretrained checkpoint unless no_pretrain is set".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn precision(&self) -> Precision {
        if self.mixed_precision {
            Precision::Mixed
        } else {
            Precision::Double
        }
    }

    /// Effective smoothness weight after the `no_reg` switch.
    pub fn effective_lambda(&self) -> f64 {
        if self.ablation.no_reg {
            0.0
        } else {
            self.lambda_reg
        }
    }
}
