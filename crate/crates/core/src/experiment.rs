//! Evaluation of generator bundles against a dataset and the ablation
//! harness that trains one pretrained trunk per seed and fine-tunes every
//! requested variant from it.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{frame_stats, temporal_jerk_fields, temporal_jerk_video, video_stats, PreparedStats};
use crate::models::{GeneratorBundle, InitMode, Latents, ModelConfig};
use crate::par;
use crate::tensor::Tensor;
use crate::train::{Ablation, FinetuneStart, Stage, TrainConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Generated videos per evaluation.
    pub videos: usize,
    /// Frames per generated video; 0 uses the dataset clip length.
    pub frames: usize,
    /// Base seed of the evaluation latents. The same latents are used for
    /// every bundle so that variants are compared on common noise.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            videos: 128,
            frames: 0,
            seed: 1_000_000,
        }
    }
}

/// Descriptor statistics of the real data, computed once per dataset.
pub struct Reference {
    pub frames: PreparedStats,
    pub videos: PreparedStats,
    pub clip_len: usize,
}

impl Reference {
    pub fn new(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Invalid("empty reference dataset".into()));
        }
        let clips: Vec<Tensor> = data.clips.iter().map(|c| c.frames().clone()).collect();
        Ok(Self {
            frames: PreparedStats::new(frame_stats(&clips)?)?,
            videos: PreparedStats::new(video_stats(&clips)?)?,
            clip_len: data.frame_count(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub toy_fid: f64,
    /// Absent for canonical-only bundles.
    pub toy_fvd: Option<f64>,
    pub jerk_fields: Option<f64>,
    pub jerk_video: Option<f64>,
    pub videos: usize,
}

pub fn eval_latents(cfg: &ModelConfig, eval: &EvalConfig, i: usize) -> Latents {
    Latents::from_seed(cfg, eval.seed + i as u64)
}

/// Scores `bundle` against `reference`. Canonical-only bundles are scored
/// on their canonical images alone.
pub fn evaluate(bundle: &GeneratorBundle, reference: &Reference, eval: &EvalConfig) -> Result<Metrics> {
    if eval.videos < 2 {
        return Err(Error::Config("evaluation needs at least 2 videos".into()));
    }
    let cfg = &bundle.config;
    if !bundle.has_deformation() {
        let imgs = par::map_range(eval.videos, |i| {
            bundle.canonical(&eval_latents(cfg, eval, i).z_c).map(|(c, _)| c.into_tensor())
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        return Ok(Metrics {
            toy_fid: reference.frames.distance(&frame_stats(&imgs)?)?,
            toy_fvd: None,
            jerk_fields: None,
            jerk_video: None,
            videos: eval.videos,
        });
    }
    let n = if eval.frames == 0 { reference.clip_len } else { eval.frames };
    let samples = par::map_range(eval.videos, |i| bundle.sample(&eval_latents(cfg, eval, i), n))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let clips: Vec<Tensor> = samples.iter().map(|s| s.clip.frames().clone()).collect();
    let (mut jf, mut jv) = (0.0, 0.0);
    for s in &samples {
        jf += temporal_jerk_fields(&s.fields)?;
        jv += temporal_jerk_video(s.clip.frames())?;
    }
    let k = samples.len() as f64;
    Ok(Metrics {
        toy_fid: reference.frames.distance(&frame_stats(&clips)?)?,
        toy_fvd: Some(reference.videos.distance(&video_stats(&clips)?)?),
        jerk_fields: Some(jf / k),
        jerk_video: Some(jv / k),
        videos: eval.videos,
    })
}

/// A fine-tuning variant of the ablation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoFc,
    NoReg,
    FixGc,
    NoPretrain,
    NoMultiplier,
    Xavier,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoFc,
        Variant::NoReg,
        Variant::FixGc,
        Variant::NoPretrain,
        Variant::NoMultiplier,
        Variant::Xavier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoFc => "no_fc",
            Variant::NoReg => "no_reg",
            Variant::FixGc => "fix_gc",
            Variant::NoPretrain => "no_pretrain",
            Variant::NoMultiplier => "no_multiplier",
            Variant::Xavier => "xavier",
        }
    }

    pub fn ablation(self) -> Ablation {
        let mut a = Ablation::default();
        match self {
            Variant::Full => {}
            Variant::NoFc => a.no_fc = true,
            Variant::NoReg => a.no_reg = true,
            Variant::FixGc => a.fix_gc = true,
            Variant::NoPretrain => a.no_pretrain = true,
            Variant::NoMultiplier => a.init_mode = InitMode::NoMultiplier,
            Variant::Xavier => a.init_mode = InitMode::Xavier,
        }
        a
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s || (s == "init_mode=no_multiplier" && *v == Variant::NoMultiplier))
            .ok_or_else(|| Error::Config(format!("unknown ablation axis `{s}`")))
    }
}

/// Step counts and evaluation settings for one harness run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub pretrain_steps: u64,
    pub finetune_steps: u64,
    /// Template for both stages; stage, seed and ablation are overwritten.
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            pretrain_steps: 2000,
            finetune_steps: 3000,
            train: TrainConfig {
                batch_size: 4,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: Metrics,
    pub seconds: f64,
}

/// Everything measured for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    /// The canonical generator before pretraining.
    pub init: Metrics,
    pub pretrained: Metrics,
    pub pretrain_seconds: f64,
    pub rows: Vec<Row>,
}

/// Progress events emitted by [`run_seed`].
#[derive(Debug)]
pub enum Progress<'a> {
    Stage { seed: u64, what: &'a str },
    Step { seed: u64, what: &'a str, step: u64, loss_g: f64, loss_d: f64 },
}

fn stage_config(s: &Schedule, stage: Stage, seed: u64, ablation: Ablation) -> TrainConfig {
    TrainConfig {
        stage,
        seed,
        ablation,
        ..s.train.clone()
    }
}

/// Pretrains once for `seed`, then fine-tunes each variant from the same
/// checkpoint (or from scratch for `no_pretrain`) and evaluates it.
pub fn run_seed(
    model: &ModelConfig,
    data: &Dataset,
    reference: &Reference,
    variants: &[Variant],
    seed: u64,
    schedule: &Schedule,
    mut progress: impl FnMut(Progress),
) -> Result<SeedRun> {
    let model = ModelConfig {
        seed,
        ..model.clone()
    };
    let every = schedule.train.log_interval.max(1);
    let t0 = Instant::now();
    let mut pre = Trainer::pretrain(model.clone(), stage_config(schedule, Stage::Pretrain, seed, Ablation::default()))?;
    progress(Progress::Stage { seed, what: "init-eval" });
    let init = evaluate(&pre.bundle, reference, &schedule.eval)?;
    progress(Progress::Stage { seed, what: "pretrain" });
    pre.run(data, schedule.pretrain_steps, |l| {
        if l.step % every == 0 {
            progress(Progress::Step { seed, what: "pretrain", step: l.step, loss_g: l.loss_g, loss_d: l.loss_d });
        }
    })?;
    let pretrain_seconds = t0.elapsed().as_secs_f64();
    let pretrained = evaluate(&pre.bundle, reference, &schedule.eval)?;
    let mut rows = Vec::new();
    for &v in variants {
        let t1 = Instant::now();
        let ablation = v.ablation();
        let start = if ablation.no_pretrain {
            FinetuneStart::Scratch(model.clone())
        } else {
            FinetuneStart::Pretrained {
                bundle: pre.bundle.clone(),
                disc: pre.disc.clone(),
            }
        };
        let mut t = Trainer::finetune(start, stage_config(schedule, Stage::Finetune, seed, ablation))?;
        progress(Progress::Stage { seed, what: v.name() });
        t.run(data, schedule.finetune_steps, |l| {
            if l.step % every == 0 {
                progress(Progress::Step { seed, what: v.name(), step: l.step, loss_g: l.loss_g, loss_d: l.loss_d });
            }
        })?;
        rows.push(Row {
            variant: v,
            seed,
            metrics: evaluate(&t.bundle, reference, &schedule.eval)?,
            seconds: t1.elapsed().as_secs_f64(),
        });
    }
    Ok(SeedRun {
        seed,
        init,
        pretrained,
        pretrain_seconds,
        rows,
    })
}

/// Median of a non-empty slice (mean of the two middle values when even).
pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() || v.iter().any(|x| x.is_nan()) {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let m = s.len() / 2;
    Some(if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) })
}
