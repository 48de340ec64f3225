use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{Stage, TrainConfig};
use super::losses::{discriminator_loss, generator_loss};
use super::r1::r1_penalty;
use crate::autodiff::{adam_step, AdamState, GradMap, Graph, ParamStore, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::field::{edge_weights, warp_batch};
use crate::models::{
    canonical_forward, deformation_forward, deformation_style, disc_forward, init_discriminator, motion_forward,
    reset_head, Conditioning, GeneratorBundle, ModelConfig,
};
use crate::rng::KeyedRng;
use crate::tensor::Tensor;

/// One training log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    #[serde(rename = "loss_D")]
    pub loss_d: f64,
    #[serde(rename = "loss_G")]
    pub loss_g: f64,
    /// Smoothness term; absent in pretraining and with `no_reg`.
    #[serde(rename = "L_reg")]
    pub l_reg: Option<f64>,
    /// `loss_G + lambda_reg * L_reg`.
    pub total_g: f64,
    /// R1 penalty, on the steps where it was applied.
    pub r1: Option<f64>,
    pub grad_norms: BTreeMap<String, f64>,
    pub wallclock: f64,
}

/// Where fine-tuning starts from.
pub enum FinetuneStart {
    Pretrained {
        bundle: GeneratorBundle,
        disc: ParamStore,
    },
    Scratch(ModelConfig),
}

pub struct Trainer {
    pub config: TrainConfig,
    pub bundle: GeneratorBundle,
    pub disc: ParamStore,
    g_state: AdamState,
    d_state: AdamState,
    step: u64,
    rng: KeyedRng,
    started: Instant,
    last_generator_grads: Option<GradMap>,
}

/// Per-clip random choices for one fine-tuning step.
struct ClipDraw {
    clip: usize,
    adv_times: Vec<f64>,
    reg_time: usize,
    z_c: Vec<f64>,
    z_d: Vec<f64>,
    motion_seed: u64,
}

fn group_norms(grads: &GradMap, total_key: &str, out: &mut BTreeMap<String, f64>) {
    let mut total = 0.0;
    for (name, g) in grads {
        let group = name.split('.').next().unwrap_or(name).to_string();
        let sq = g.sq_norm();
        *out.entry(group).or_insert(0.0) += sq;
        total += sq;
    }
    for v in out.values_mut() {
        *v = v.sqrt();
    }
    out.insert(total_key.to_string(), total.sqrt());
}

fn column(rows: &[Vec<f64>]) -> Result<Tensor> {
    let d = rows.first().map_or(0, Vec::len);
    Tensor::from_vec([rows.len(), d, 1, 1], rows.concat())
}

impl Trainer {
    pub fn pretrain(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        if config.stage != Stage::Pretrain {
            return Err(Error::Config("pretrain trainer needs stage = pretrain".into()));
        }
        config.validate(false)?;
        let disc = init_discriminator(&model, 1, model.seed);
        let bundle = GeneratorBundle::init_canonical(model)?;
        Ok(Self::assemble(config, bundle, disc))
    }

    pub fn finetune(start: FinetuneStart, config: TrainConfig) -> Result<Self> {
        if config.stage != Stage::Finetune {
            return Err(Error::Config("finetune trainer needs stage = finetune".into()));
        }
        let pretrained = matches!(start, FinetuneStart::Pretrained { .. });
        config.validate(pretrained)?;
        let a = config.ablation;
        let k = config.frames_per_clip;
        let (bundle, disc) = match start {
            FinetuneStart::Pretrained { bundle, disc } if !a.no_pretrain => {
                let mut bundle = bundle;
                bundle.config.init_mode = a.init_mode;
                bundle.config.zero_features = a.no_fc;
                bundle.add_deformation();
                let mut disc = disc;
                reset_head(&mut disc, &bundle.config, k, bundle.config.seed);
                (bundle, disc)
            }
            FinetuneStart::Pretrained { bundle, .. } => Self::fresh(bundle.config, a, k)?,
            FinetuneStart::Scratch(model) => Self::fresh(model, a, k)?,
        };
        bundle.check_params()?;
        Ok(Self::assemble(config, bundle, disc))
    }

    fn fresh(mut model: ModelConfig, a: super::config::Ablation, k: usize) -> Result<(GeneratorBundle, ParamStore)> {
        model.init_mode = a.init_mode;
        model.zero_features = a.no_fc;
        let disc = init_discriminator(&model, k, model.seed);
        Ok((GeneratorBundle::init(model)?, disc))
    }

    fn assemble(config: TrainConfig, bundle: GeneratorBundle, disc: ParamStore) -> Self {
        Self {
            rng: KeyedRng::new(config.seed),
            config,
            bundle,
            disc,
            g_state: AdamState::default(),
            d_state: AdamState::default(),
            step: 0,
            started: Instant::now(),
            last_generator_grads: None,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Generator gradients from the most recent step.
    pub fn last_generator_grads(&self) -> Option<&GradMap> {
        self.last_generator_grads.as_ref()
    }

    fn frozen_generator(&self) -> bool {
        self.config.stage == Stage::Finetune && self.config.ablation.fix_gc
    }

    fn generator_frozen_prefixes(&self) -> Vec<&'static str> {
        let mut v = vec!["disc."];
        if self.frozen_generator() {
            v.extend(["gc.", "map_c."]);
        }
        v
    }

    pub fn step(&mut self, data: &Dataset) -> Result<StepLog> {
        if data.is_empty() {
            return Err(Error::Invalid("empty dataset".into()));
        }
        if data.resolution() != self.bundle.config.resolution {
            return Err(Error::Shape(format!(
                "dataset resolution {} does not match model resolution {}",
                data.resolution(),
                self.bundle.config.resolution
            )));
        }
        match self.config.stage {
            Stage::Pretrain => self.pretrain_step(data),
            Stage::Finetune => self.finetune_step(data),
        }
    }

    /// Runs `steps` steps, calling `on_log` on every record.
    pub fn run(&mut self, data: &Dataset, steps: u64, mut on_log: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let mut out = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let log = self.step(data)?;
            on_log(&log);
            out.push(log);
        }
        Ok(out)
    }

    fn draw_index(&self, i: usize) -> u64 {
        self.step * self.config.batch_size as u64 + i as u64
    }

    fn pretrain_step(&mut self, data: &Dataset) -> Result<StepLog> {
        let cfg = self.bundle.config.clone();
        let b = self.config.batch_size;
        let mut reals = Vec::with_capacity(b);
        let mut zs = Vec::with_capacity(b);
        for i in 0..b {
            let idx = self.draw_index(i);
            let clip = self.rng.stream("pretrain-clip", idx).random_range(0..data.len());
            let frame = self
                .rng
                .stream("pretrain-frame", idx)
                .random_range(0..data.clips[clip].frame_count());
            reals.push(data.clips[clip].frame(frame));
            zs.push(self.rng.normals("z_c", idx, cfg.latent_dim));
        }
        let reals = Tensor::stack(&reals)?;
        let times = vec![vec![1.0]; b];

        let mut g = Graph::with_frozen(&self.generator_frozen_prefixes());
        g.set_precision(self.config.precision());
        let z = g.input(column(&zs)?);
        let cv = canonical_forward(&mut g, &self.bundle.params, &cfg, z)?;
        let logits = disc_forward(&mut g, &self.disc, &cfg, cv.image, &times)?;
        let loss = generator_loss(&mut g, logits);
        let loss_g = g.value(loss).data()[0];
        let fakes = g.value(cv.image).clone();
        let g_grads = g.backward(loss)?.params(&g);

        self.finish_step(g_grads, &reals, &fakes, &times, loss_g, None, loss_g)
    }

    fn draw_clip(&self, data: &Dataset, i: usize) -> ClipDraw {
        let idx = self.draw_index(i);
        let n = data.frame_count();
        let k = self.config.frames_per_clip;
        let mut adv: Vec<usize> = sample_indices(&mut self.rng.stream("adv-times", idx), n, k).into_vec();
        adv.sort_unstable();
        let latent = self.bundle.config.latent_dim;
        ClipDraw {
            clip: self.rng.stream("clip", idx).random_range(0..data.len()),
            adv_times: adv.into_iter().map(|t| (t + 1) as f64).collect(),
            reg_time: self.rng.stream("reg-time", idx).random_range(2..n),
            z_c: self.rng.normals("z_c", idx, latent),
            z_d: self.rng.normals("z_d", idx, latent),
            motion_seed: self.rng.stream("motion-seed", idx).random(),
        }
    }

    fn finetune_step(&mut self, data: &Dataset) -> Result<StepLog> {
        let cfg = self.bundle.config.clone();
        let b = self.config.batch_size;
        let k = self.config.frames_per_clip;
        let n = data.frame_count();
        if n < k.max(3) {
            return Err(Error::Invalid(format!(
                "clips have {n} frames; fine-tuning needs at least {}",
                k.max(3)
            )));
        }
        let draws: Vec<ClipDraw> = (0..b).map(|i| self.draw_clip(data, i)).collect();
        let p = &self.bundle.params;

        let mut g = Graph::with_frozen(&self.generator_frozen_prefixes());
        g.set_precision(self.config.precision());
        let zc = g.input(column(&draws.iter().map(|d| d.z_c.clone()).collect::<Vec<_>>())?);
        let cv = canonical_forward(&mut g, p, &cfg, zc)?;
        let zd = g.input(column(&draws.iter().map(|d| d.z_d.clone()).collect::<Vec<_>>())?);
        let wd = deformation_style(&mut g, p, &cfg, zd)?;
        let image = if self.config.detach_canonical_image {
            g.detach(cv.image)
        } else {
            cv.image
        };

        // Fields for (clip, time) pairs, in the given order.
        let fields_for = |g: &mut Graph, pairs: &[(usize, f64)]| -> Result<Var> {
            let idx: Vec<usize> = pairs.iter().map(|&(c, _)| c).collect();
            let seeds: Vec<u64> = idx.iter().map(|&c| draws[c].motion_seed).collect();
            let t = g.input(Tensor::from_vec(
                [pairs.len(), 1, 1, 1],
                pairs.iter().map(|&(_, t)| t).collect(),
            )?);
            let u = motion_forward(g, p, &cfg, &seeds, t)?;
            let w = g.gather(wd, &idx)?;
            let style = g.concat(&[w, u])?;
            let cond = Conditioning {
                features: cv.features,
                index: idx,
            };
            deformation_forward(g, p, &cfg, style, (!cfg.zero_features).then_some(&cond))
        };

        // Adversarial path: k sorted random times per clip, frames consecutive.
        let adv_pairs: Vec<(usize, f64)> = draws
            .iter()
            .enumerate()
            .flat_map(|(c, d)| d.adv_times.iter().map(move |&t| (c, t)))
            .collect();
        let adv_field = fields_for(&mut g, &adv_pairs)?;
        let adv_idx: Vec<usize> = adv_pairs.iter().map(|&(c, _)| c).collect();
        let adv_img = g.gather(image, &adv_idx)?;
        let fake = g.warp(adv_img, adv_field)?;
        let times: Vec<Vec<f64>> = draws.iter().map(|d| d.adv_times.clone()).collect();
        let logits = disc_forward(&mut g, &self.disc, &cfg, fake, &times)?;
        let loss = generator_loss(&mut g, logits);
        let loss_g = g.value(loss).data()[0];

        // Smoothness path on an independently drawn adjacent triplet.
        let (total, l_reg) = if self.config.ablation.no_reg {
            (loss, None)
        } else {
            let mut pairs = Vec::with_capacity(3 * b);
            for off in [-1.0, 0.0, 1.0] {
                pairs.extend(draws.iter().enumerate().map(|(c, d)| (c, d.reg_time as f64 + off)));
            }
            let field = fields_for(&mut g, &pairs)?;
            let first: Vec<usize> = (0..b).collect();
            let mid: Vec<usize> = (b..2 * b).collect();
            let last: Vec<usize> = (2 * b..3 * b).collect();
            let f0 = g.gather(field, &first)?;
            let f1 = g.gather(field, &mid)?;
            let f2 = g.gather(field, &last)?;
            let flow_a = g.sub(f1, f0)?;
            let flow_b = g.sub(f2, f1)?;
            let mid_frames = warp_batch(
                &g.value(cv.image).select(&(0..b).collect::<Vec<_>>()),
                g.value(f1),
            )?;
            let weights = (0..b)
                .map(|i| Ok(edge_weights(&mid_frames.select(&[i]), self.config.edge_beta)?.0))
                .collect::<Result<Vec<_>>>()?;
            let reg = g.smoothness(flow_a, flow_b, Tensor::stack(&weights)?)?;
            let l_reg = g.value(reg).data()[0];
            let scaled = g.scale(reg, self.config.lambda_reg);
            (g.add(loss, scaled)?, Some(l_reg))
        };
        let total_g = g.value(total).data()[0];
        let fakes = g.value(fake).clone();
        let g_grads = g.backward(total)?.params(&g);

        let reals: Vec<Tensor> = draws
            .iter()
            .flat_map(|d| d.adv_times.iter().map(move |&t| data.clips[d.clip].frame(t as usize - 1)))
            .collect();
        let reals = Tensor::stack(&reals)?;
        self.finish_step(g_grads, &reals, &fakes, &times, loss_g, l_reg, total_g)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_step(
        &mut self,
        g_grads: GradMap,
        reals: &Tensor,
        fakes: &Tensor,
        times: &[Vec<f64>],
        loss_g: f64,
        l_reg: Option<f64>,
        total_g: f64,
    ) -> Result<StepLog> {
        let cfg = &self.bundle.config;
        let mut g = Graph::new();
        g.set_precision(self.config.precision());
        let r = g.input(reals.clone());
        let f = g.input(fakes.clone());
        let lr = disc_forward(&mut g, &self.disc, cfg, r, times)?;
        let lf = disc_forward(&mut g, &self.disc, cfg, f, times)?;
        let loss = discriminator_loss(&mut g, lr, lf)?;
        let loss_d = g.value(loss).data()[0];
        let mut d_grads = g.backward(loss)?.params(&g);

        let mut r1 = None;
        if self.config.r1_gamma > 0.0 && self.step % self.config.r1_interval == 0 {
            // Lazy regularisation: applied every `r1_interval` steps with the
            // weight scaled up to match.
            let out = r1_penalty(&self.disc, cfg, reals, times, self.config.r1_gamma)?;
            let lazy = self.config.r1_interval as f64;
            for (name, grad) in out.grads {
                if let Some(acc) = d_grads.get_mut(&name) {
                    acc.add_assign(&grad.scale(lazy));
                }
            }
            r1 = Some(out.penalty);
            log::debug!("step {}: R1 penalty {:.4e}", self.step, out.penalty);
        }

        let mut grad_norms = BTreeMap::new();
        group_norms(&g_grads, "G", &mut grad_norms);
        let mut d_norms = BTreeMap::new();
        group_norms(&d_grads, "D", &mut d_norms);
        grad_norms.extend(d_norms);

        let frozen = self.generator_frozen_prefixes();
        adam_step(&mut self.bundle.params, &g_grads, &mut self.g_state, &self.config.adam, |n| {
            !frozen.iter().any(|p| n.starts_with(p))
        })?;
        adam_step(&mut self.disc, &d_grads, &mut self.d_state, &self.config.adam, |_| true)?;
        self.last_generator_grads = Some(g_grads);

        let log = StepLog {
            step: self.step,
            loss_d,
            loss_g,
            l_reg,
            total_g,
            r1,
            grad_norms,
            wallclock: self.started.elapsed().as_secs_f64(),
        };
        self.step += 1;
        Ok(log)
    }
}
