//! Image pretraining, video fine-tuning and single-clip fitting.

mod config;
mod fit;
mod losses;
mod r1;
mod trainer;

pub use config::{Ablation, Stage, TrainConfig};
pub use fit::{fit_clip, FitConfig, FitLog};
pub use losses::adv_losses;
pub use r1::{r1_penalty, R1};
pub use trainer::{FinetuneStart, StepLog, Trainer};
