use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the last deformation block is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Multiplier/adder output with zero weights and bias: the initial field
    /// is exactly zero.
    #[default]
    Zero,
    /// Multiplier/adder output with Xavier-normal weights and zero bias.
    Xavier,
    /// Plain additive residual output with the default random init.
    NoMultiplier,
}

impl std::str::FromStr for InitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "xavier" => Ok(Self::Xavier),
            "no_multiplier" => Ok(Self::NoMultiplier),
            _ => Err(Error::Config(format!("unknown init mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub resolution: usize,
    pub latent_dim: usize,
    pub style_dim: usize,
    pub mapping_layers: usize,
    /// Canonical generator widths per block, lowest resolution (4x4) first.
    pub widths: Vec<usize>,
    pub deform_widths: Vec<usize>,
    /// Discriminator widths per block, lowest resolution first.
    pub disc_widths: Vec<usize>,
    pub disc_feature_dim: usize,
    pub motion_dim: usize,
    pub motion_freqs: usize,
    /// Frames between motion noise anchors.
    pub anchor_spacing: f64,
    /// Canonical generator layer whose output conditions the deformation
    /// generator. `None` selects the penultimate layer.
    pub cond_layer: Option<usize>,
    pub init_mode: InitMode,
    /// Feed zeros instead of canonical features to the deformation generator.
    pub zero_features: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            latent_dim: 64,
            style_dim: 64,
            mapping_layers: 2,
            widths: vec![128, 64, 32, 32],
            deform_widths: vec![128, 64, 32, 32],
            disc_widths: vec![128, 64, 32, 32],
            disc_feature_dim: 64,
            motion_dim: 64,
            motion_freqs: 8,
            anchor_spacing: 8.0,
            cond_layer: None,
            init_mode: InitMode::Zero,
            zero_features: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Narrow preset that keeps CPU training runs to minutes.
    pub fn desk() -> Self {
        Self {
            latent_dim: 32,
            style_dim: 32,
            widths: vec![64, 32, 16, 8],
            deform_widths: vec![32, 16, 16, 8],
            disc_widths: vec![32, 16, 8, 8],
            disc_feature_dim: 32,
            motion_dim: 32,
            ..Self::default()
        }
    }

    pub fn blocks(&self) -> usize {
        self.widths.len()
    }

    pub fn block_resolution(&self, i: usize) -> usize {
        4 << i
    }

    /// Convolution layers in the canonical generator; the image output is
    /// layer `gc_layers()`.
    pub fn gc_layers(&self) -> usize {
        1 + 2 * (self.blocks() - 1)
    }

    pub fn penultimate_layer(&self) -> usize {
        self.gc_layers() - 1
    }

    pub fn cond_index(&self) -> usize {
        self.cond_layer.unwrap_or(self.penultimate_layer())
    }

    /// `(channels, resolution)` of canonical generator layer `i`.
    pub fn gc_layer_shape(&self, i: usize) -> (usize, usize) {
        if i == self.gc_layers() {
            return (3, self.resolution);
        }
        let block = i.div_ceil(2);
        (self.widths[block], self.block_resolution(block))
    }

    pub fn cond_channels(&self) -> usize {
        self.gc_layer_shape(self.cond_index()).0
    }

    pub fn motion_mapped_dim(&self) -> usize {
        self.motion_dim - 2 * self.motion_freqs
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.blocks();
        if n == 0 {
            return Err(Error::Config("at least one block is required".into()));
        }
        if self.resolution != 4 << (n - 1) {
            return Err(Error::Config(format!(
                "resolution {} does not match {} blocks (expected {})",
                self.resolution,
                n,
                4 << (n - 1)
            )));
        }
        if self.deform_widths.len() != n || self.disc_widths.len() != n {
            return Err(Error::Config("width lists must have one entry per block".into()));
        }
        if self.widths.iter().chain(&self.deform_widths).chain(&self.disc_widths).any(|&w| w == 0)
            || self.latent_dim == 0
            || self.style_dim == 0
            || self.disc_feature_dim == 0
        {
            return Err(Error::Config("widths and dimensions must be positive".into()));
        }
        if self.motion_dim <= 2 * self.motion_freqs {
            return Err(Error::Config(format!(
                "motion_dim {} must exceed twice motion_freqs {}",
                self.motion_dim, self.motion_freqs
            )));
        }
        if !(self.anchor_spacing > 0.0 && self.anchor_spacing.is_finite()) {
            return Err(Error::Invalid(format!(
                "anchor spacing must be positive, got {}",
                self.anchor_spacing
            )));
        }
        if self.cond_index() > self.gc_layers() {
            return Err(Error::Config(format!(
                "conditioning layer {} out of range 0..={}",
                self.cond_index(),
                self.gc_layers()
            )));
        }
        Ok(())
    }
}
