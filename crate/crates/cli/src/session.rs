//! One interactive sample: a bundle, its latents and the cached canonical
//! image, features, fields and frames.
//!
//! The canonical image is snapped to 8-bit levels when the session is
//! created, so an unmodified canonical that travels through PNG comes back
//! bit-identical and re-propagating it reproduces the cached frames.

use std::sync::Arc;

use warpgen::field::{CanonicalImage, DeformationField, VideoClip};
use warpgen::models::{GeneratorBundle, Latents};
use warpgen::propagate::{propagate_edit, propagate_mask, track_point, Mask, MaskSequence, Trajectory};
use warpgen::{Result, Tensor};

use crate::imageio::quantize_tensor;

pub struct Session {
    pub bundle: Arc<GeneratorBundle>,
    pub seed: u64,
    pub latents: Latents,
    pub frames: usize,
    pub canonical: CanonicalImage,
    pub features: Tensor,
    pub fields: Vec<DeformationField>,
    pub clip: VideoClip,
}

impl Session {
    /// Content and initial motion both come from `seed`.
    pub fn new(bundle: Arc<GeneratorBundle>, seed: u64, frames: usize) -> Result<Self> {
        if frames == 0 {
            return Err(warpgen::Error::Invalid("frame count must be at least 1".into()));
        }
        let latents = Latents::from_seed(&bundle.config, seed);
        let (canonical, features) = bundle.canonical(&latents.z_c)?;
        let canonical = CanonicalImage::new(quantize_tensor(canonical.tensor()))?;
        let fields = fields_for(&bundle, &latents, &features, frames)?;
        let clip = propagate_edit(&canonical, &fields)?;
        Ok(Self {
            bundle,
            seed,
            latents,
            frames,
            canonical,
            features,
            fields,
            clip,
        })
    }

    /// Redraws motion from `motion_seed`; the canonical image is kept. A
    /// repeated seed reuses the cache.
    pub fn resample(&mut self, motion_seed: u64) -> Result<()> {
        if motion_seed == self.latents.motion_seed {
            return Ok(());
        }
        let latents = self.latents.with_motion(motion_seed);
        self.fields = fields_for(&self.bundle, &latents, &self.features, self.frames)?;
        self.clip = propagate_edit(&self.canonical, &self.fields)?;
        self.latents = latents;
        Ok(())
    }

    pub fn edit(&self, edited: &CanonicalImage) -> Result<VideoClip> {
        propagate_edit(edited, &self.fields)
    }

    pub fn track(&self, x: f64, y: f64) -> Result<Trajectory> {
        track_point((x, y), &self.fields)
    }

    pub fn mask(&self, m: &Mask) -> Result<MaskSequence> {
        propagate_mask(m, &self.fields)
    }
}

fn fields_for(bundle: &GeneratorBundle, latents: &Latents, features: &Tensor, n: usize) -> Result<Vec<DeformationField>> {
    let times: Vec<f64> = (1..=n).map(|t| t as f64).collect();
    let codes = bundle.motion_codes(latents.motion_seed, &times)?;
    bundle.deformation(&latents.z_d, &codes, features, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use warpgen::models::{InitMode, ModelConfig};

    fn bundle() -> Arc<GeneratorBundle> {
        let cfg = ModelConfig {
            resolution: 16,
            latent_dim: 8,
            style_dim: 8,
            widths: vec![16, 8, 8],
            deform_widths: vec![8, 8, 4],
            disc_widths: vec![8, 8, 4],
            disc_feature_dim: 8,
            motion_dim: 12,
            motion_freqs: 2,
            init_mode: InitMode::NoMultiplier,
            ..ModelConfig::default()
        };
        Arc::new(GeneratorBundle::init(cfg).unwrap())
    }

    #[test]
    fn fields_match_the_bundle_sampler() {
        let b = bundle();
        let s = Session::new(b.clone(), 5, 6).unwrap();
        let direct = b.sample(&Latents::from_seed(&b.config, 5), 6).unwrap();
        assert_eq!(s.fields, direct.fields);
        let mut r = Session::new(b.clone(), 5, 6).unwrap();
        r.resample(9).unwrap();
        let direct = b.sample(&Latents::from_seed(&b.config, 5).with_motion(9), 6).unwrap();
        assert_eq!(r.fields, direct.fields);
        assert_eq!(r.canonical, s.canonical);
    }

    #[test]
    fn editing_with_the_cached_canonical_reproduces_the_frames() {
        let s = Session::new(bundle(), 2, 4).unwrap();
        assert_eq!(s.edit(&s.canonical).unwrap(), s.clip);
    }
}
