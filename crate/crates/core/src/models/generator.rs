//! Canonical generator, motion encoder and deformation generator as graph
//! builders over a shared [`ParamStore`].

use super::config::{InitMode, ModelConfig};
use super::layers::{self, broadcast_const, column_batch, mapping, modconv, synthesis, Init};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::KeyedRng;
use crate::tensor::Tensor;

pub(crate) fn init_canonical(init: &mut Init, cfg: &ModelConfig) {
    let mut dims = vec![cfg.latent_dim];
    dims.extend(std::iter::repeat_n(cfg.style_dim, cfg.mapping_layers));
    init.mapping("map_c", &dims);
    init.normal("gc.const", [1, cfg.widths[0], 4, 4], 1.0);
    for (i, &w) in cfg.widths.iter().enumerate() {
        let b = format!("gc.b{i}");
        if i == 0 {
            init.modconv(&format!("{b}.conv0"), cfg.style_dim, w, w, 3);
        } else {
            init.modconv(&format!("{b}.conv0"), cfg.style_dim, cfg.widths[i - 1], w, 3);
            init.modconv(&format!("{b}.conv1"), cfg.style_dim, w, w, 3);
        }
        init.modconv(&format!("{b}.torgb"), cfg.style_dim, w, 3, 1);
    }
}

pub(crate) fn init_deformation(init: &mut Init, cfg: &ModelConfig) {
    let mut dims = vec![cfg.latent_dim];
    dims.extend(std::iter::repeat_n(cfg.style_dim, cfg.mapping_layers));
    init.mapping("map_d", &dims);
    let mapped = cfg.motion_mapped_dim();
    init.mapping("motion.map", &[cfg.motion_dim, mapped, mapped]);
    let f = cfg.motion_freqs;
    let freqs: Vec<f64> = (0..f).map(|j| 0.01 * (j + 1) as f64 / f as f64).collect();
    init.store.insert("motion.freq", Tensor::from_vec([1, f, 1, 1], freqs).expect("shape"));

    let style = cfg.style_dim + cfg.motion_dim;
    let cond = cfg.cond_channels();
    let last = cfg.blocks() - 1;
    init.normal("gd.const", [1, cfg.deform_widths[0], 4, 4], 1.0);
    for (i, &w) in cfg.deform_widths.iter().enumerate() {
        let b = format!("gd.b{i}");
        let cin = if i == 0 { w } else { cfg.deform_widths[i - 1] };
        init.modconv(&format!("{b}.conv0"), style, cin + cond, w, 3);
        init.modconv(&format!("{b}.conv1"), style, w, w, 3);
        let name = format!("{b}.toout");
        if i < last || cfg.init_mode == InitMode::NoMultiplier {
            init.modconv(&name, style, w, 2, 1);
            continue;
        }
        init.affine(&name, style, w);
        init.fill(&format!("{name}.bias"), [1, 4, 1, 1], 0.0);
        match cfg.init_mode {
            InitMode::Zero => init.fill(&format!("{name}.weight"), [4, w, 1, 1], 0.0),
            _ => init.xavier(&format!("{name}.weight"), [4, w, 1, 1]),
        }
    }
}

/// Graph handles for one canonical generator pass.
#[derive(Debug, Clone, Copy)]
pub struct CanonicalVars {
    /// Unclamped RGB output `[N, 3, R, R]`.
    pub image: Var,
    /// Conditioning features from the configured layer.
    pub features: Var,
}

/// Canonical generator on latents `z` (`[N, latent_dim, 1, 1]`).
pub fn canonical_forward(g: &mut Graph, p: &ParamStore, cfg: &ModelConfig, z: Var) -> Result<CanonicalVars> {
    let n = g.shape(z)[0];
    let w = mapping(g, p, "map_c", cfg.mapping_layers, z)?;
    let mut x = broadcast_const(g, p, "gc.const", n)?;
    let mut layer_out = Vec::with_capacity(cfg.gc_layers());
    let mut rgb: Option<Var> = None;
    for i in 0..cfg.blocks() {
        let b = format!("gc.b{i}");
        if i > 0 {
            x = g.upsample_bilinear2(x);
        }
        x = synthesis(g, p, &format!("{b}.conv0"), x, w)?;
        layer_out.push(x);
        if i > 0 {
            x = synthesis(g, p, &format!("{b}.conv1"), x, w)?;
            layer_out.push(x);
        }
        let y = modconv(g, p, &format!("{b}.torgb"), x, w, false)?;
        rgb = Some(match rgb {
            None => y,
            Some(prev) => {
                let up = g.upsample_bilinear2(prev);
                g.add(up, y)?
            }
        });
    }
    let image = rgb.expect("at least one block");
    layer_out.push(image);
    Ok(CanonicalVars {
        image,
        features: layer_out[cfg.cond_index()],
    })
}

/// Mapped style for the deformation generator.
pub fn deformation_style(g: &mut Graph, p: &ParamStore, cfg: &ModelConfig, z: Var) -> Result<Var> {
    mapping(g, p, "map_d", cfg.mapping_layers, z)
}

/// Raw interpolated anchor noise for one sample at time `t`, plus the anchor
/// index below `t`.
pub fn anchor_noise(cfg: &ModelConfig, motion_seed: u64, t: f64) -> Result<(usize, Vec<f64>, Vec<f64>)> {
    if !(cfg.anchor_spacing > 0.0) {
        return Err(Error::Invalid(format!("anchor spacing must be positive, got {}", cfg.anchor_spacing)));
    }
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::Invalid(format!("motion time must be finite and non-negative, got {t}")));
    }
    let k = (t / cfg.anchor_spacing).floor() as usize;
    let r = KeyedRng::new(motion_seed);
    let a0 = r.normals("motion-anchor", k as u64, cfg.motion_dim);
    let a1 = r.normals("motion-anchor", k as u64 + 1, cfg.motion_dim);
    Ok((k, a0, a1))
}

/// Motion codes `[N, motion_dim, 1, 1]` for per-sample motion seeds and a
/// time input `times` of shape `[N, 1, 1, 1]`. Differentiable in `times`.
pub fn motion_forward(
    g: &mut Graph,
    p: &ParamStore,
    cfg: &ModelConfig,
    motion_seeds: &[u64],
    times: Var,
) -> Result<Var> {
    let n = motion_seeds.len();
    if g.shape(times) != [n, 1, 1, 1] {
        return Err(Error::Shape(format!("times {:?} for {n} motion seeds", g.shape(times))));
    }
    let mut a0 = Vec::with_capacity(n);
    let mut delta = Vec::with_capacity(n);
    let mut shift = Vec::with_capacity(n);
    for (i, &seed) in motion_seeds.iter().enumerate() {
        let (k, lo, hi) = anchor_noise(cfg, seed, g.value(times).data()[i])?;
        delta.push(hi.iter().zip(&lo).map(|(h, l)| h - l).collect::<Vec<_>>());
        a0.push(lo);
        shift.push(vec![-(k as f64)]);
    }
    let a0 = g.input(column_batch(&a0)?);
    let delta = g.input(column_batch(&delta)?);
    let shift = g.input(column_batch(&shift)?);
    let scaled = g.scale(times, cfg.anchor_spacing.recip());
    let frac = g.add(scaled, shift)?;
    let step = g.mul(delta, frac)?;
    let noise = g.add(a0, step)?;
    let mut h = noise;
    for i in 0..2 {
        h = layers::dense(g, p, &format!("motion.map.{i}"), h)?;
        h = g.leaky_relu(h, layers::LRELU_SLOPE);
    }
    let freq = g.param(p, "motion.freq")?;
    let phase = g.mul(freq, times)?;
    let s = g.sin(phase);
    let c = g.cos(phase);
    g.concat(&[h, s, c])
}

/// Canonical features for the deformation generator: one map per canonical
/// sample plus, for every deformation sample, the canonical sample it uses.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub features: Var,
    pub index: Vec<usize>,
}

/// Deformation generator. `style` is `[N, style_dim + motion_dim, 1, 1]`;
/// `cond` supplies the canonical features, or `None` to substitute zeros of
/// the same channel count.
pub fn deformation_forward(
    g: &mut Graph,
    p: &ParamStore,
    cfg: &ModelConfig,
    style: Var,
    cond: Option<&Conditioning>,
) -> Result<Var> {
    let n = g.shape(style)[0];
    let channels = cfg.cond_channels();
    if let Some(c) = cond {
        let s = g.shape(c.features);
        if c.index.len() != n || s[1] != channels {
            return Err(Error::Shape(format!(
                "conditioning features {s:?} with {} indices do not match batch {n} with {channels} channels",
                c.index.len()
            )));
        }
    }
    let last = cfg.blocks() - 1;
    let mut x = broadcast_const(g, p, "gd.const", n)?;
    let mut field: Option<Var> = None;
    for i in 0..cfg.blocks() {
        let b = format!("gd.b{i}");
        let r = cfg.block_resolution(i);
        if i > 0 {
            x = g.upsample_bilinear2(x);
        }
        let fc = match cond {
            Some(c) => {
                let [_, _, fh, fw] = g.shape(c.features);
                let f = if fh == r && fw == r {
                    c.features
                } else {
                    g.resize_bilinear(c.features, r, r)?
                };
                g.gather(f, &c.index)?
            }
            None => g.input(Tensor::zeros([n, channels, r, r])),
        };
        x = g.concat(&[x, fc])?;
        x = synthesis(g, p, &format!("{b}.conv0"), x, style)?;
        x = synthesis(g, p, &format!("{b}.conv1"), x, style)?;
        let out = modconv(g, p, &format!("{b}.toout"), x, style, false)?;
        // Offsets are in pixels, so doubling the resolution doubles them.
        let prev = match field {
            Some(f) => {
                let up = g.upsample_bilinear2(f);
                Some(g.scale(up, 2.0))
            }
            None => None,
        };
        field = Some(if i == last && cfg.init_mode != InitMode::NoMultiplier {
            let mult = g.slice_channels(out, 0, 2)?;
            let adder = g.slice_channels(out, 2, 2)?;
            match prev {
                Some(prev) => {
                    let m = g.mul(prev, mult)?;
                    g.add(m, adder)?
                }
                None => adder,
            }
        } else {
            match prev {
                Some(prev) => g.add(prev, out)?,
                None => out,
            }
        });
    }
    Ok(field.expect("at least one block"))
}
