//! Procedural sprite videos with recorded ground-truth motion.

mod scene;
mod synth;

pub use scene::{coverage, Background, SceneSpec, Sprite, SpriteShape, SpriteState};
pub use synth::{
    clip_file_name, load_clip, save_clip, synth_dataset, ClipRecord, Dataset, Manifest, SceneDistribution,
    MANIFEST_FILE,
};
