use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::generator::{canonical_forward, Conditioning, deformation_forward, deformation_style, init_canonical, init_deformation, motion_forward};
use super::layers::{column_batch, Init};
use crate::autodiff::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::field::{self, CanonicalImage, DeformationField, VideoClip};
use crate::gdf::write_atomic;
use crate::rng::KeyedRng;
use crate::tensor::Tensor;

/// Latent inputs for one generated video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latents {
    pub z_c: Vec<f64>,
    pub z_d: Vec<f64>,
    pub motion_seed: u64,
}

impl Latents {
    /// Content and motion both keyed by `seed`.
    pub fn from_seed(cfg: &ModelConfig, seed: u64) -> Self {
        let r = KeyedRng::new(seed);
        Self {
            z_c: r.normals("z_c", 0, cfg.latent_dim),
            z_d: r.normals("z_d", 0, cfg.latent_dim),
            motion_seed: seed,
        }
    }

    /// Same content code with motion resampled from `motion_seed`.
    pub fn with_motion(&self, motion_seed: u64) -> Self {
        Self {
            z_c: self.z_c.clone(),
            z_d: KeyedRng::new(motion_seed).normals("z_d", 0, self.z_d.len()),
            motion_seed,
        }
    }
}

/// Everything produced when sampling one video.
#[derive(Debug, Clone)]
pub struct Sample {
    pub canonical: CanonicalImage,
    pub features: Tensor,
    pub fields: Vec<DeformationField>,
    pub clip: VideoClip,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format: String,
    config: ModelConfig,
}

const SIDECAR_FORMAT: &str = "warpgen-bundle-1";

/// Generator parameters (mapping networks, canonical generator, motion
/// encoder, deformation generator) with their configuration.
#[derive(Debug, Clone)]
pub struct GeneratorBundle {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} contains non-finite values")))
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

impl GeneratorBundle {
    /// Canonical generator only, as used for image pretraining.
    pub fn init_canonical(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        init_canonical(
            &mut Init {
                store: &mut params,
                rng: KeyedRng::new(config.seed),
            },
            &config,
        );
        Ok(Self { config, params })
    }

    /// Full generator with a freshly initialised deformation branch.
    pub fn init(config: ModelConfig) -> Result<Self> {
        let mut b = Self::init_canonical(config)?;
        b.add_deformation();
        Ok(b)
    }

    /// Adds (or reinitialises) the motion and deformation parameters, keeping
    /// the canonical generator.
    pub fn add_deformation(&mut self) {
        let stale: Vec<String> = self
            .params
            .names()
            .filter(|n| ["map_d.", "motion.", "gd."].iter().any(|p| n.starts_with(p)))
            .cloned()
            .collect();
        for n in stale {
            self.params.remove(&n);
        }
        init_deformation(
            &mut Init {
                store: &mut self.params,
                rng: KeyedRng::new(self.config.seed),
            },
            &self.config,
        );
    }

    pub fn has_deformation(&self) -> bool {
        self.params.contains("gd.const")
    }

    fn latent(&self, z: &[f64], what: &str) -> Result<Tensor> {
        if z.len() != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "{what} has {} entries, expected {}",
                z.len(),
                self.config.latent_dim
            )));
        }
        finite(z, what)?;
        Tensor::from_vec([1, z.len(), 1, 1], z.to_vec())
    }

    /// Canonical image (clamped at emission) and conditioning features.
    pub fn canonical(&self, z_c: &[f64]) -> Result<(CanonicalImage, Tensor)> {
        let z = self.latent(z_c, "z_c")?;
        let mut g = Graph::new();
        let z = g.input(z);
        let out = canonical_forward(&mut g, &self.params, &self.config, z)?;
        let image = CanonicalImage::new(g.value(out.image).clone())?;
        Ok((image, g.value(out.features).clone()))
    }

    /// Motion codes for frames at `times`.
    pub fn motion_codes(&self, motion_seed: u64, times: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.require_deformation()?;
        if let Some(t) = times.iter().find(|&&t| !(t >= 1.0)) {
            return Err(Error::Invalid(format!("frame times start at 1, got {t}")));
        }
        let mut g = Graph::new();
        let t = g.input(Tensor::from_vec([times.len(), 1, 1, 1], times.to_vec())?);
        let seeds = vec![motion_seed; times.len()];
        let u = motion_forward(&mut g, &self.params, &self.config, &seeds, t)?;
        let v = g.value(u);
        Ok((0..times.len()).map(|i| v.sample(i).to_vec()).collect())
    }

    fn require_deformation(&self) -> Result<()> {
        if self.has_deformation() {
            Ok(())
        } else {
            Err(Error::MissingParam(
                "bundle has no deformation generator; fine-tune it first".into(),
            ))
        }
    }

    /// Deformation fields for motion codes `codes`, conditioned on `features`
    /// from this bundle's canonical generator.
    pub fn deformation(&self, z_d: &[f64], codes: &[Vec<f64>], features: &Tensor, first_index: u32) -> Result<Vec<DeformationField>> {
        self.require_deformation()?;
        let n = codes.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let (cc, r) = self.config.gc_layer_shape(self.config.cond_index());
        features.expect_shape([1, cc, r, r], "conditioning features")?;
        let z = self.latent(z_d, "z_d")?;
        let mut g = Graph::new();
        let z = g.input(z.select(&vec![0; n]));
        let w = deformation_style(&mut g, &self.params, &self.config, z)?;
        let u = g.input(column_batch(codes)?);
        let style = g.concat(&[w, u])?;
        let cond = Conditioning {
            features: g.input(features.clone()),
            index: vec![0; n],
        };
        let cond = (!self.config.zero_features).then_some(&cond);
        let field = deformation_forward(&mut g, &self.params, &self.config, style, cond)?;
        let v = g.value(field);
        let [_, _, h, wd] = v.shape();
        (0..n)
            .map(|i| {
                let t = Tensor::from_vec([1, 2, h, wd], v.sample(i).to_vec())?;
                DeformationField::new(t, first_index + i as u32)
            })
            .collect()
    }

    /// Samples an `n`-frame video at times `1..=n`.
    pub fn sample(&self, latents: &Latents, n: usize) -> Result<Sample> {
        if n == 0 {
            return Err(Error::Invalid("frame count must be at least 1".into()));
        }
        let (canonical, features) = self.canonical(&latents.z_c)?;
        let times: Vec<f64> = (1..=n).map(|t| t as f64).collect();
        let codes = self.motion_codes(latents.motion_seed, &times)?;
        let fields = self.deformation(&latents.z_d, &codes, &features, 1)?;
        let frames: Vec<Tensor> = fields
            .iter()
            .map(|f| field::warp(canonical.tensor(), f))
            .collect::<Result<_>>()?;
        let clip = VideoClip::new(Tensor::stack(&frames)?)?;
        Ok(Sample {
            canonical,
            features,
            fields,
            clip,
        })
    }

    /// Writes parameters to `path` and the JSON config next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.params.save(path)?;
        let side = Sidecar {
            format: SIDECAR_FORMAT.into(),
            config: self.config.clone(),
        };
        write_atomic(&sidecar_path(path), serde_json::to_string_pretty(&side)?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side_path = sidecar_path(path);
        let text = std::fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
        let side: Sidecar = serde_json::from_str(&text)?;
        if side.format != SIDECAR_FORMAT {
            return Err(Error::Format(format!("unknown bundle format `{}`", side.format)));
        }
        side.config.validate()?;
        let params = ParamStore::load(path)?;
        let b = Self {
            config: side.config,
            params,
        };
        b.check_params()?;
        Ok(b)
    }

    /// Verifies that every expected parameter exists with the expected shape.
    pub fn check_params(&self) -> Result<()> {
        let reference = if self.has_deformation() {
            Self::init(self.config.clone())?
        } else {
            Self::init_canonical(self.config.clone())?
        };
        for (name, t) in reference.params.iter() {
            match self.params.get(name) {
                None => return Err(Error::MissingParam(name.clone())),
                Some(v) if v.shape() != t.shape() => {
                    return Err(Error::Shape(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        v.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}
