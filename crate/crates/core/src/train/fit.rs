//! Fitting the generator to a single clip by direct reconstruction.
//!
//! Latents stay fixed and every generator parameter is optimised so that the
//! warped canonical image reproduces each frame under an L1 loss, plus the
//! smoothness term over every interior triplet.

use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph, Precision, Var};
use crate::error::{Error, Result};
use crate::field::{edge_weights, VideoClip, DEFAULT_EDGE_BETA};
use crate::models::{
    canonical_forward, Conditioning, deformation_forward, deformation_style, motion_forward, GeneratorBundle, Latents,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub steps: u64,
    pub lambda_reg: f64,
    pub adam: AdamConfig,
    pub edge_beta: f64,
    pub mixed_precision: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lambda_reg: 1.0,
            adam: AdamConfig::default(),
            edge_beta: DEFAULT_EDGE_BETA,
            mixed_precision: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitLog {
    pub step: u64,
    pub l1: f64,
    #[serde(rename = "L_reg")]
    pub l_reg: f64,
    pub total: f64,
}

/// Builds the reconstruction objective; returns `(total, l1, l_reg)`.
fn objective(g: &mut Graph, bundle: &GeneratorBundle, clip: &VideoClip, latents: &Latents, cfg: &FitConfig) -> Result<(Var, f64, f64)> {
    let mc = &bundle.config;
    let p = &bundle.params;
    let n = clip.frame_count();
    let zc = g.input(Tensor::from_vec([1, mc.latent_dim, 1, 1], latents.z_c.clone())?);
    let cv = canonical_forward(g, p, mc, zc)?;
    let zd = g.input(Tensor::from_vec([1, mc.latent_dim, 1, 1], latents.z_d.clone())?);
    let wd = deformation_style(g, p, mc, zd)?;
    let all = vec![0; n];
    let w = g.gather(wd, &all)?;
    let t = g.input(Tensor::from_vec([n, 1, 1, 1], (1..=n).map(|t| t as f64).collect())?);
    let u = motion_forward(g, p, mc, &vec![latents.motion_seed; n], t)?;
    let style = g.concat(&[w, u])?;
    let cond = Conditioning {
        features: cv.features,
        index: all.clone(),
    };
    let field = deformation_forward(g, p, mc, style, (!mc.zero_features).then_some(&cond))?;
    let img = g.gather(cv.image, &all)?;
    let frames = g.warp(img, field)?;
    let real = g.input(clip.frames().clone());
    let diff = g.sub(frames, real)?;
    let a = g.abs(diff);
    let l1 = g.mean(a);
    let l1_value = g.value(l1).data()[0];
    if n < 3 || cfg.lambda_reg == 0.0 {
        return Ok((l1, l1_value, 0.0));
    }
    let lo: Vec<usize> = (0..n - 2).collect();
    let mid: Vec<usize> = (1..n - 1).collect();
    let hi: Vec<usize> = (2..n).collect();
    let f0 = g.gather(field, &lo)?;
    let f1 = g.gather(field, &mid)?;
    let f2 = g.gather(field, &hi)?;
    let fa = g.sub(f1, f0)?;
    let fb = g.sub(f2, f1)?;
    let mid_frames = g.value(frames).select(&mid);
    let weights = (0..n - 2)
        .map(|i| Ok(edge_weights(&mid_frames.select(&[i]), cfg.edge_beta)?.0))
        .collect::<Result<Vec<_>>>()?;
    let reg = g.smoothness(fa, fb, Tensor::stack(&weights)?)?;
    let reg_value = g.value(reg).data()[0];
    let scaled = g.scale(reg, cfg.lambda_reg);
    Ok((g.add(l1, scaled)?, l1_value, reg_value))
}

/// Optimises `bundle` to reproduce `clip` from fixed `latents`.
pub fn fit_clip(
    bundle: &mut GeneratorBundle,
    clip: &VideoClip,
    latents: &Latents,
    cfg: &FitConfig,
    mut on_log: impl FnMut(&FitLog),
) -> Result<Vec<FitLog>> {
    if !bundle.has_deformation() {
        return Err(Error::MissingParam("fitting needs a deformation generator".into()));
    }
    if clip.height() != bundle.config.resolution || clip.width() != bundle.config.resolution {
        return Err(Error::Shape(format!(
            "clip is {}x{}, model resolution {}",
            clip.height(),
            clip.width(),
            bundle.config.resolution
        )));
    }
    let mut state = AdamState::default();
    let mut logs = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        if cfg.mixed_precision {
            g.set_precision(Precision::Mixed);
        }
        let (total, l1, l_reg) = objective(&mut g, bundle, clip, latents, cfg)?;
        let log = FitLog {
            step,
            l1,
            l_reg,
            total: g.value(total).data()[0],
        };
        let grads = g.backward(total)?.params(&g);
        adam_step(&mut bundle.params, &grads, &mut state, &cfg.adam, |_| true)?;
        on_log(&log);
        logs.push(log);
    }
    Ok(logs)
}
