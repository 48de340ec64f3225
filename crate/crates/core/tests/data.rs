use std::fs;

use warpgen::data::{load_clip, synth_dataset, Background, Dataset, SceneDistribution, MANIFEST_FILE};
use warpgen::Error;

#[test]
fn same_seed_gives_byte_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let dist = SceneDistribution::default();
    synth_dataset(a.path(), 4, &dist, 21).unwrap();
    synth_dataset(b.path(), 4, &dist, 21).unwrap();
    for name in ["clip_00000.gdf", "clip_00003.gdf", MANIFEST_FILE] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
    }
    let c = tempfile::tempdir().unwrap();
    synth_dataset(c.path(), 1, &dist, 22).unwrap();
    assert_ne!(
        fs::read(a.path().join("clip_00000.gdf")).unwrap(),
        fs::read(c.path().join("clip_00000.gdf")).unwrap()
    );
}

#[test]
fn loaded_dataset_matches_in_memory_generation() {
    let dir = tempfile::tempdir().unwrap();
    let dist = SceneDistribution::default();
    let m = synth_dataset(dir.path(), 3, &dist, 4).unwrap();
    let loaded = Dataset::load(dir.path()).unwrap();
    let mem = Dataset::generate(3, &dist, 4).unwrap();
    assert_eq!(loaded.manifest, m);
    assert_eq!(loaded.manifest, mem.manifest);
    // clips are stored as f32
    for (a, b) in loaded.clips.iter().zip(&mem.clips) {
        assert!(a.frames().max_abs_diff(b.frames()) < 1e-6);
    }
    assert_eq!(loaded.frame_count(), 16);
    assert_eq!(loaded.resolution(), 32);
}

#[test]
fn pixels_stay_in_range_and_backgrounds_are_static() {
    let ds = Dataset::generate(8, &SceneDistribution::default(), 9).unwrap();
    for (clip, rec) in ds.clips.iter().zip(&ds.manifest.clips) {
        let f = clip.frames();
        assert!(f.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let [t, c, h, w] = f.shape();
        let far = |x: usize, y: usize| {
            rec.trajectories.iter().zip(&rec.scene.sprites).all(|(tr, s)| {
                tr.iter().all(|st| {
                    (x as f64 - st.center[0]).abs() > s.size / 2.0 + 1.0
                        || (y as f64 - st.center[1]).abs() > s.size / 2.0 + 1.0
                })
            })
        };
        for y in 0..h {
            for x in 0..w {
                if !far(x, y) {
                    continue;
                }
                for ch in 0..c {
                    let v0 = f.at(0, ch, y, x);
                    assert!((1..t).all(|k| f.at(k, ch, y, x) == v0));
                }
            }
        }
    }
}

#[test]
fn rendered_centroids_match_recorded_trajectories() {
    let dist = SceneDistribution {
        gradient_background: false,
        ..SceneDistribution::default()
    };
    let ds = Dataset::generate(16, &dist, 3).unwrap();
    let mut worst: f64 = 0.0;
    for (clip, rec) in ds.clips.iter().zip(&ds.manifest.clips) {
        let Background::Flat { color: bg } = rec.scene.background else {
            unreachable!()
        };
        let f = clip.frames();
        let [t, c, h, w] = f.shape();
        for k in 0..t {
            let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let d: f64 = (0..c).map(|ch| (f.at(k, ch, y, x) - bg[ch]).abs()).sum();
                    sx += d * x as f64;
                    sy += d * y as f64;
                    sw += d;
                }
            }
            let gt = rec.trajectories[0][k].center;
            worst = worst.max((sx / sw - gt[0]).hypot(sy / sw - gt[1]));
        }
    }
    assert!(worst < 0.5, "worst centroid error {worst}");
}

#[test]
fn corrupted_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    synth_dataset(dir.path(), 1, &SceneDistribution::default(), 1).unwrap();
    let path = dir.path().join("clip_00000.gdf");
    let mut bytes = fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 10);
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_clip(&path), Err(Error::Truncated { .. })));
    bytes[0] = b'Z';
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_clip(&path), Err(Error::Format(_))));
    assert!(Dataset::load(dir.path()).is_err());
}

#[test]
fn zero_clips_and_unwritable_directories_fail() {
    let dir = tempfile::tempdir().unwrap();
    let dist = SceneDistribution::default();
    assert!(synth_dataset(dir.path(), 0, &dist, 1).is_err());
    let file = dir.path().join("plain");
    fs::write(&file, b"x").unwrap();
    assert!(matches!(synth_dataset(file.join("sub"), 1, &dist, 1), Err(Error::Io { .. })));
}
