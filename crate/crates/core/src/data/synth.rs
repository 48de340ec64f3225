use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Background, SceneSpec, Sprite, SpriteShape, SpriteState};
use crate::error::{Error, Result};
use crate::field::VideoClip;
use crate::gdf::{self, write_atomic};
use crate::par;
use crate::rng::KeyedRng;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Parameter ranges that clips are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneDistribution {
    pub resolution: usize,
    pub frame_count: usize,
    pub min_sprites: usize,
    pub max_sprites: usize,
    pub size_range: [f64; 2],
    pub speed_range: [f64; 2],
    pub gradient_background: bool,
}

impl Default for SceneDistribution {
    fn default() -> Self {
        Self {
            resolution: 32,
            frame_count: 16,
            min_sprites: 1,
            max_sprites: 1,
            size_range: [6.0, 10.0],
            speed_range: [0.5, 1.5],
            gradient_background: true,
        }
    }
}

impl SceneDistribution {
    pub fn validate(&self) -> Result<()> {
        let ok = self.resolution >= 4
            && self.frame_count >= 1
            && self.min_sprites <= self.max_sprites
            && self.size_range[0] >= 2.0
            && self.size_range[0] <= self.size_range[1]
            && self.size_range[1] <= self.resolution as f64
            && self.speed_range[0] >= 0.0
            && self.speed_range[0] <= self.speed_range[1];
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid scene distribution {self:?}")))
        }
    }

    /// Scene for clip `index`, a pure function of `(seed, index)`.
    pub fn sample(&self, seed: u64, index: u64) -> SceneSpec {
        let mut r = KeyedRng::new(seed).stream("scene", index);
        let res = self.resolution as f64;
        let color = |r: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64| -> [f64; 3] {
            std::array::from_fn(|_| r.random_range(lo..=hi))
        };
        let background = if self.gradient_background {
            let a = r.random_range(0.0..std::f64::consts::TAU);
            Background::Gradient {
                from: color(&mut r, -1.0, -0.3),
                to: color(&mut r, -1.0, -0.3),
                dir: [a.cos(), a.sin()],
            }
        } else {
            Background::Flat {
                color: color(&mut r, -1.0, -0.3),
            }
        };
        let count = r.random_range(self.min_sprites..=self.max_sprites);
        let sprites = (0..count)
            .map(|_| {
                let size = r.random_range(self.size_range[0]..=self.size_range[1]);
                let half = size / 2.0;
                let speed = r.random_range(self.speed_range[0]..=self.speed_range[1]);
                let dir = r.random_range(0.0..std::f64::consts::TAU);
                Sprite {
                    shape: if r.random_bool(0.5) {
                        SpriteShape::Square
                    } else {
                        SpriteShape::Disc
                    },
                    size,
                    color: color(&mut r, 0.0, 1.0),
                    position: std::array::from_fn(|_| r.random_range(half - 0.5..=res - 0.5 - half)),
                    velocity: [speed * dir.cos(), speed * dir.sin()],
                    bounce: true,
                }
            })
            .collect();
        SceneSpec {
            resolution: self.resolution,
            frame_count: self.frame_count,
            sprites,
            background,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub file: String,
    pub scene: SceneSpec,
    /// `trajectories[sprite][frame]`.
    pub trajectories: Vec<Vec<SpriteState>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub distribution: SceneDistribution,
    pub clips: Vec<ClipRecord>,
}

pub fn clip_file_name(index: usize) -> String {
    format!("clip_{index:05}.gdf")
}

/// Renders `count` clips into `dir` and writes the manifest.
pub fn synth_dataset(dir: impl AsRef<Path>, count: usize, dist: &SceneDistribution, seed: u64) -> Result<Manifest> {
    let dir = dir.as_ref();
    if count == 0 {
        return Err(Error::Invalid("dataset needs at least one clip".into()));
    }
    dist.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let clips = par::map_range(count, |i| -> Result<ClipRecord> {
        let scene = dist.sample(seed, i as u64);
        let (clip, trajectories) = scene.render()?;
        let file = clip_file_name(i);
        save_clip(&clip, dir.join(&file))?;
        Ok(ClipRecord {
            file,
            scene,
            trajectories,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        seed,
        distribution: dist.clone(),
        clips,
    };
    write_atomic(
        &dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(manifest)
}

pub fn save_clip(clip: &VideoClip, path: impl AsRef<Path>) -> Result<()> {
    gdf::save(clip.frames(), path)
}

pub fn load_clip(path: impl AsRef<Path>) -> Result<VideoClip> {
    VideoClip::new(gdf::load(path)?)
}

/// A loaded dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub clips: Vec<VideoClip>,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let clips = manifest
            .clips
            .iter()
            .map(|c| load_clip(dir.join(&c.file)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dir,
            manifest,
            clips,
        })
    }

    /// In-memory dataset from already rendered clips.
    pub fn from_clips(clips: Vec<VideoClip>) -> Result<Self> {
        let first = clips
            .first()
            .ok_or_else(|| Error::Invalid("dataset needs at least one clip".into()))?;
        let shape = first.frames().shape();
        if clips.iter().any(|c| c.frames().shape() != shape) {
            return Err(Error::Shape("all clips must share one shape".into()));
        }
        Ok(Self {
            dir: PathBuf::new(),
            manifest: Manifest {
                seed: 0,
                distribution: SceneDistribution {
                    resolution: shape[2],
                    frame_count: shape[0],
                    ..SceneDistribution::default()
                },
                clips: Vec::new(),
            },
            clips,
        })
    }

    /// Renders clips in memory without touching the filesystem.
    pub fn generate(count: usize, dist: &SceneDistribution, seed: u64) -> Result<Self> {
        dist.validate()?;
        let records = par::map_range(count, |i| -> Result<(VideoClip, ClipRecord)> {
            let scene = dist.sample(seed, i as u64);
            let (clip, trajectories) = scene.render()?;
            Ok((
                clip,
                ClipRecord {
                    file: clip_file_name(i),
                    scene,
                    trajectories,
                },
            ))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let (clips, recs): (Vec<_>, Vec<_>) = records.into_iter().unzip();
        let mut ds = Self::from_clips(clips)?;
        ds.manifest = Manifest {
            seed,
            distribution: dist.clone(),
            clips: recs,
        };
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn frame_count(&self) -> usize {
        self.clips[0].frame_count()
    }

    pub fn resolution(&self) -> usize {
        self.clips[0].height()
    }
}
