//! Sparse-frame video discriminator: a per-frame convolutional trunk shared
//! across frames and a small head over concatenated frame features and
//! encodings of the time gaps between them.

use std::f64::consts::PI;

use super::config::ModelConfig;
use super::layers::{conv, dense, Init, LRELU_SLOPE};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::KeyedRng;
use crate::tensor::Tensor;

pub const TIME_FREQS: usize = 4;

fn time_features(k: usize) -> usize {
    2 * TIME_FREQS * (k.max(2) - 1)
}

pub(crate) fn init_trunk(init: &mut Init, cfg: &ModelConfig) {
    let w = &cfg.disc_widths;
    let last = w.len() - 1;
    init.conv("disc.trunk.fromrgb", 3, w[last], 1);
    for i in (1..=last).rev() {
        init.conv(&format!("disc.trunk.b{i}.conv0"), w[i], w[i], 3);
        init.conv(&format!("disc.trunk.b{i}.conv1"), w[i], w[i - 1], 3);
    }
    init.conv("disc.trunk.b0.conv0", w[0], w[0], 3);
    init.dense("disc.trunk.out", w[0] * 16, cfg.disc_feature_dim);
}

pub(crate) fn init_head(init: &mut Init, cfg: &ModelConfig, k: usize) {
    let f = cfg.disc_feature_dim;
    init.dense("disc.head.0", k * f + time_features(k), f);
    init.dense("disc.head.1", f, 1);
}

/// Fresh discriminator parameters for `k`-frame inputs.
pub fn init_discriminator(cfg: &ModelConfig, k: usize, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut init = Init {
        store: &mut store,
        rng: KeyedRng::new(seed),
    };
    init_trunk(&mut init, cfg);
    init_head(&mut init, cfg, k);
    store
}

/// Replaces the head of `store` with a fresh one for `k`-frame inputs,
/// keeping the trunk.
pub fn reset_head(store: &mut ParamStore, cfg: &ModelConfig, k: usize, seed: u64) {
    let heads: Vec<String> = store.names().filter(|n| n.starts_with("disc.head.")).cloned().collect();
    for n in heads {
        store.remove(&n);
    }
    let mut init = Init {
        store,
        rng: KeyedRng::new(seed),
    };
    init_head(&mut init, cfg, k);
}

/// Sine/cosine encodings of consecutive time gaps; a single frame is encoded
/// as one gap of zero.
pub fn encode_times(times: &[f64]) -> Result<Vec<f64>> {
    if times.is_empty() {
        return Err(Error::Invalid("discriminator needs at least one frame".into()));
    }
    if let Some(w) = times.windows(2).find(|w| !(w[1] > w[0])) {
        return Err(Error::Invalid(format!(
            "frame times must be strictly increasing, got {} then {}",
            w[0], w[1]
        )));
    }
    let gaps: Vec<f64> = if times.len() == 1 {
        vec![0.0]
    } else {
        times.windows(2).map(|w| w[1] - w[0]).collect()
    };
    let mut out = Vec::with_capacity(gaps.len() * 2 * TIME_FREQS);
    for d in gaps {
        for q in 0..TIME_FREQS {
            let f = PI / (2.0 * (1u32 << q) as f64);
            out.push((f * d).sin());
            out.push((f * d).cos());
        }
    }
    Ok(out)
}

/// Per-frame features `[M, disc_feature_dim, 1, 1]`.
pub fn trunk_forward(g: &mut Graph, p: &ParamStore, cfg: &ModelConfig, frames: Var) -> Result<Var> {
    let [_, c, h, w] = g.shape(frames);
    if c != 3 || h != cfg.resolution || w != cfg.resolution {
        return Err(Error::Shape(format!(
            "discriminator expects [_, 3, {r}, {r}] frames, got {:?}",
            g.shape(frames),
            r = cfg.resolution
        )));
    }
    let last = cfg.disc_widths.len() - 1;
    let mut x = conv(g, p, "disc.trunk.fromrgb", frames)?;
    x = g.leaky_relu(x, LRELU_SLOPE);
    for i in (1..=last).rev() {
        for j in 0..2 {
            x = conv(g, p, &format!("disc.trunk.b{i}.conv{j}"), x)?;
            x = g.leaky_relu(x, LRELU_SLOPE);
        }
        let r = cfg.block_resolution(i - 1);
        x = g.resize_bilinear(x, r, r)?;
    }
    x = conv(g, p, "disc.trunk.b0.conv0", x)?;
    x = g.leaky_relu(x, LRELU_SLOPE);
    x = dense(g, p, "disc.trunk.out", x)?;
    Ok(g.leaky_relu(x, LRELU_SLOPE))
}

/// Logits `[N, 1, 1, 1]` for `N = times.len()` clips whose `k` frames are
/// stored consecutively in `frames` (`[N*k, 3, R, R]`).
pub fn disc_forward(
    g: &mut Graph,
    p: &ParamStore,
    cfg: &ModelConfig,
    frames: Var,
    times: &[Vec<f64>],
) -> Result<Var> {
    let n = times.len();
    let k = times.first().map_or(0, Vec::len);
    if n == 0 || times.iter().any(|t| t.len() != k) {
        return Err(Error::Invalid("every clip needs the same non-zero frame count".into()));
    }
    if g.shape(frames)[0] != n * k {
        return Err(Error::Shape(format!(
            "{} frames for {n} clips of {k}",
            g.shape(frames)[0]
        )));
    }
    let enc: Vec<Vec<f64>> = times.iter().map(|t| encode_times(t)).collect::<Result<_>>()?;
    let feats = trunk_forward(g, p, cfg, frames)?;
    let feats = g.reshape(feats, [n, k * cfg.disc_feature_dim, 1, 1])?;
    let enc = g.input(super::layers::column_batch(&enc)?);
    let mut h = g.concat(&[feats, enc])?;
    h = dense(g, p, "disc.head.0", h)?;
    h = g.leaky_relu(h, LRELU_SLOPE);
    dense(g, p, "disc.head.1", h)
}

/// Convenience wrapper evaluating logits without gradients.
pub fn discriminate(p: &ParamStore, cfg: &ModelConfig, frames: &Tensor, times: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.input(frames.clone());
    let out = disc_forward(&mut g, p, cfg, x, times)?;
    Ok(g.value(out).data().to_vec())
}
