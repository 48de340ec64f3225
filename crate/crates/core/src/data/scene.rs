use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VideoClip;
use crate::tensor::Tensor;

/// Supersampling factor per axis for shapes without a closed-form coverage.
const DISC_SUPERSAMPLE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpriteShape {
    Square,
    Disc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub shape: SpriteShape,
    /// Side length or diameter in pixels.
    pub size: f64,
    pub color: [f64; 3],
    /// Center on frame 1, in pixel coordinates.
    pub position: [f64; 2],
    /// Displacement per frame in pixels.
    pub velocity: [f64; 2],
    pub bounce: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Background {
    Flat { color: [f64; 3] },
    /// Linear blend from `from` to `to` along the unit direction `dir`,
    /// spanning the image diagonal.
    Gradient {
        from: [f64; 3],
        to: [f64; 3],
        dir: [f64; 2],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub resolution: usize,
    pub frame_count: usize,
    pub sprites: Vec<Sprite>,
    pub background: Background,
}

/// Ground-truth state of one sprite on one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpriteState {
    pub center: [f64; 2],
    pub velocity: [f64; 2],
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.frame_count == 0 {
            return Err(Error::Invalid("scene needs positive resolution and frame count".into()));
        }
        for s in &self.sprites {
            if !(s.size >= 2.0) || s.size > self.resolution as f64 {
                return Err(Error::Invalid(format!(
                    "sprite size {} outside [2, {}]",
                    s.size, self.resolution
                )));
            }
            let all = s.position.iter().chain(&s.velocity).chain(&s.color);
            if all.clone().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("sprite parameters".into()));
            }
        }
        Ok(())
    }

    /// Per-sprite trajectories, one state per frame.
    ///
    /// With `bounce`, a center that crosses the wall is reflected about it and
    /// the velocity component flips; the flipped velocity is recorded on the
    /// frame where the reflection happened.
    pub fn trajectories(&self) -> Vec<Vec<SpriteState>> {
        let extent = self.resolution as f64;
        self.sprites
            .iter()
            .map(|s| {
                let half = s.size / 2.0;
                let lo = half - 0.5;
                let hi = extent - 0.5 - half;
                let mut c = s.position;
                let mut v = s.velocity;
                let mut out = Vec::with_capacity(self.frame_count);
                out.push(SpriteState { center: c, velocity: v });
                for _ in 1..self.frame_count {
                    for a in 0..2 {
                        c[a] += v[a];
                        if s.bounce {
                            if c[a] > hi {
                                c[a] = 2.0 * hi - c[a];
                                v[a] = -v[a];
                            } else if c[a] < lo {
                                c[a] = 2.0 * lo - c[a];
                                v[a] = -v[a];
                            }
                        }
                    }
                    out.push(SpriteState { center: c, velocity: v });
                }
                out
            })
            .collect()
    }

    fn background_at(&self, x: f64, y: f64) -> [f64; 3] {
        match &self.background {
            Background::Flat { color } => *color,
            Background::Gradient { from, to, dir } => {
                let r = self.resolution as f64;
                let c = (r - 1.0) / 2.0;
                let s = ((x - c) * dir[0] + (y - c) * dir[1]) / (r * std::f64::consts::SQRT_2) + 0.5;
                std::array::from_fn(|i| from[i] + (to[i] - from[i]) * s)
            }
        }
    }

    pub fn render(&self) -> Result<(VideoClip, Vec<Vec<SpriteState>>)> {
        self.validate()?;
        let r = self.resolution;
        let traj = self.trajectories();
        let mut frames = Tensor::zeros([self.frame_count, 3, r, r]);
        for t in 0..self.frame_count {
            for y in 0..r {
                for x in 0..r {
                    let mut px = self.background_at(x as f64, y as f64);
                    for (s, tr) in self.sprites.iter().zip(&traj) {
                        let a = coverage(s.shape, s.size, tr[t].center, x as f64, y as f64);
                        for (p, c) in px.iter_mut().zip(&s.color) {
                            *p = *p * (1.0 - a) + c * a;
                        }
                    }
                    for (ch, p) in px.iter().enumerate() {
                        frames.set(t, ch, y, x, p.clamp(-1.0, 1.0));
                    }
                }
            }
        }
        Ok((VideoClip::new(frames)?, traj))
    }
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Fraction of pixel `(px, py)` covered by the sprite.
pub fn coverage(shape: SpriteShape, size: f64, center: [f64; 2], px: f64, py: f64) -> f64 {
    let half = size / 2.0;
    match shape {
        SpriteShape::Square => {
            overlap(px - 0.5, px + 0.5, center[0] - half, center[0] + half)
                * overlap(py - 0.5, py + 0.5, center[1] - half, center[1] + half)
        }
        SpriteShape::Disc => {
            if (px - center[0]).abs() > half + 1.0 || (py - center[1]).abs() > half + 1.0 {
                return 0.0;
            }
            let n = DISC_SUPERSAMPLE;
            let mut hits = 0;
            for i in 0..n {
                for j in 0..n {
                    let sx = px - 0.5 + (i as f64 + 0.5) / n as f64;
                    let sy = py - 0.5 + (j as f64 + 0.5) / n as f64;
                    if (sx - center[0]).powi(2) + (sy - center[1]).powi(2) <= half * half {
                        hits += 1;
                    }
                }
            }
            hits as f64 / (n * n) as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_sprite(velocity: [f64; 2], bounce: bool) -> SceneSpec {
        SceneSpec {
            resolution: 32,
            frame_count: 16,
            sprites: vec![Sprite {
                shape: SpriteShape::Square,
                size: 4.0,
                color: [1.0, 0.0, -1.0],
                position: [5.0, 10.0],
                velocity,
                bounce,
            }],
            background: Background::Flat { color: [-0.5; 3] },
        }
    }

    #[test]
    fn straight_line_trajectory() {
        let t = one_sprite([1.0, 0.0], false).trajectories();
        for (i, s) in t[0].iter().enumerate() {
            assert_eq!(s.center, [5.0 + i as f64, 10.0]);
        }
    }

    #[test]
    fn bounce_flips_velocity_on_the_reflected_frame() {
        // wall at 32 - 0.5 - 2 = 29.5; 5 + 25 * 1 = 30 crosses on frame 25
        let mut spec = one_sprite([1.0, 0.0], true);
        spec.frame_count = 30;
        let t = &spec.trajectories()[0];
        assert_eq!(t[24].center[0], 29.0);
        assert_eq!(t[24].velocity[0], 1.0);
        assert_eq!(t[25].center[0], 29.0);
        assert_eq!(t[25].velocity[0], -1.0);
        assert_eq!(t[26].center[0], 28.0);
    }

    #[test]
    fn square_coverage_sums_to_area() {
        let total: f64 = (0..32)
            .flat_map(|y| (0..32).map(move |x| (x, y)))
            .map(|(x, y)| coverage(SpriteShape::Square, 5.0, [10.3, 12.7], x as f64, y as f64))
            .sum();
        assert!((total - 25.0).abs() < 1e-12);
    }

    #[test]
    fn disc_coverage_approximates_area() {
        let total: f64 = (0..32)
            .flat_map(|y| (0..32).map(move |x| (x, y)))
            .map(|(x, y)| coverage(SpriteShape::Disc, 8.0, [15.2, 16.6], x as f64, y as f64))
            .sum();
        assert!((total - std::f64::consts::PI * 16.0).abs() < 0.5);
    }

    #[test]
    fn rejects_tiny_sprites() {
        let mut spec = one_sprite([0.0, 0.0], false);
        spec.sprites[0].size = 1.5;
        assert!(spec.render().is_err());
    }
}
