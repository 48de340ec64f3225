use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use warpgen::gdf;

const TINY: &str = r#"
[model]
resolution = 16
latent_dim = 8
style_dim = 8
widths = [16, 8, 8]
deform_widths = [8, 8, 4]
disc_widths = [8, 8, 4]
disc_feature_dim = 8
motion_dim = 12
motion_freqs = 2

[data]
clips = 4
resolution = 16
size_range = [3.0, 5.0]

[train]
batch_size = 2
checkpoint_interval = 2

[eval]
videos = 4
"#;

fn warpgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_warpgen")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Value {
    let o = warpgen(args);
    assert_eq!(o.status.code(), Some(0), "{args:?}\n{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_passes_on_a_correct_build() {
    let o = warpgen(&["gradcheck", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().count() > 10);
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn usage_errors_exit_with_two() {
    let o = warpgen(&["sample", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(warpgen(&["no-such-command"]).status.code(), Some(2));
    // sample writes files, so it needs --out
    assert_eq!(warpgen(&["sample"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[model]\nlatnet_dim = 3\n").unwrap();
    let o = warpgen(&["sample", "--config", s(&bad), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("latnet_dim"));
    assert_eq!(warpgen(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = warpgen(&["sample", "--checkpoint", s(&dir.path().join("missing.gdp")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let o = warpgen(&["eval", "--data", s(&dir.path().join("nothing"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn untrained_sample_repeats_the_canonical_image() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sample");
    let v = ok(&["sample", "--frames", "16", "--seed", "3", "--out", s(&out)]);
    assert_eq!(v["max_abs_diff_to_canonical"], 0.0);
    let frames = gdf::load(out.join("frames.gdf")).unwrap();
    let canonical = gdf::load(out.join("canonical.gdf")).unwrap();
    assert_eq!(frames.shape()[0], 16);
    for t in 0..16 {
        assert_eq!(&frames.select(&[t]), &canonical);
    }
    // zero fields: tracking is constant and masks are unchanged
    let tr = ok(&["track", "--sample", s(&out), "--x", "5.5", "--y", "9"]);
    let points = tr["points"].as_array().unwrap();
    assert_eq!(points.len(), 16);
    for p in points {
        assert_eq!((p["x"].as_f64(), p["y"].as_f64(), p["valid"].as_bool()), (Some(5.5), Some(9.0), Some(true)));
    }
    let mask = dir.path().join("mask.gdf");
    let m = warpgen::Tensor::from_fn([1, 1, 32, 32], |[_, _, y, x]| (x < 10 && y > 4) as u8 as f64);
    gdf::save(&m, &mask).unwrap();
    let seg = dir.path().join("seg");
    let v = ok(&["segment", "--sample", s(&out), "--mask", s(&mask), "--out", s(&seg)]);
    assert!(v["pixels"].as_array().unwrap().iter().all(|c| c.as_u64() == v["source_pixels"].as_u64()));
    assert!(seg.join("mask_015.png").exists());
}

#[test]
fn sample_edit_track_and_resample_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let c = s(&cfg);
    let a = dir.path().join("a");
    let v = ok(&["sample", "--config", c, "--seed", "4", "--frames", "6", "--out", s(&a)]);
    assert_eq!(v["resolution"], 16);
    let b = dir.path().join("b");
    ok(&["resample-motion", "--config", c, "--seed", "4", "--frames", "6", "--motion-seed", "9", "--out", s(&b)]);
    assert_eq!(fs::read(a.join("canonical.gdf")).unwrap(), fs::read(b.join("canonical.gdf")).unwrap());
    // identical content and motion seeds reproduce the files
    let a2 = dir.path().join("a2");
    ok(&["sample", "--config", c, "--seed", "4", "--frames", "6", "--out", s(&a2)]);
    assert_eq!(fs::read(a.join("frames.gdf")).unwrap(), fs::read(a2.join("frames.gdf")).unwrap());

    let e = dir.path().join("e");
    let v = ok(&["propagate-edit", "--sample", s(&a), "--edit", s(&a.join("canonical.gdf")), "--out", s(&e)]);
    assert_eq!(v["max_abs_change"], 0.0);
    assert_eq!(v["frames"], 6);
    let o = warpgen(&["track", "--sample", s(&a), "--x", "40", "--y", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn untrained_nonzero_init_sample_moves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let toml = fs::read_to_string(&cfg).unwrap().replace("[model]\n", "[model]\ninit_mode = \"no_multiplier\"\n");
    fs::write(&cfg, toml).unwrap();
    let a = dir.path().join("a");
    let v = ok(&["sample", "--config", s(&cfg), "--frames", "4", "--out", s(&a)]);
    assert!(v["max_abs_diff_to_canonical"].as_f64().unwrap() > 0.0);
    let b = dir.path().join("b");
    ok(&["resample-motion", "--config", s(&cfg), "--frames", "4", "--motion-seed", "9", "--out", s(&b)]);
    assert_eq!(fs::read(a.join("canonical.gdf")).unwrap(), fs::read(b.join("canonical.gdf")).unwrap());
    assert_ne!(fs::read(a.join("fields.gdf")).unwrap(), fs::read(b.join("fields.gdf")).unwrap());
}

#[test]
fn data_training_and_evaluation_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let c = s(&cfg);
    let data = dir.path().join("data");
    let v = ok(&["gen-data", "--config", c, "--seed", "1", "--out", s(&data)]);
    assert_eq!(v["clips"], 4);
    assert!(data.join("manifest.json").exists());

    let pre = dir.path().join("pre");
    let v = ok(&["pretrain", "--config", c, "--data", s(&data), "--steps", "3", "--out", s(&pre)]);
    assert_eq!(v["steps"], 3);
    let log = fs::read_to_string(pre.join("log.jsonl")).unwrap();
    let recs: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 3);
    for key in ["step", "loss_D", "loss_G", "L_reg", "grad_norms", "wallclock"] {
        assert!(recs[0].get(key).is_some(), "missing {key}");
    }
    assert!(pre.join("generator.gdp").exists() && pre.join("disc.gdp").exists());

    let ft = dir.path().join("ft");
    ok(&["finetune", "--config", c, "--data", s(&data), "--from", s(&pre), "--steps", "2", "--no-reg", "--out", s(&ft)]);
    let log = fs::read_to_string(ft.join("log.jsonl")).unwrap();
    assert!(log.lines().all(|l| serde_json::from_str::<Value>(l).unwrap()["L_reg"].is_null()));
    // fix_gc without a pretrained run is a usage error
    let o = warpgen(&["finetune", "--config", c, "--data", s(&data), "--fix-gc", "--out", s(&ft)]);
    assert_eq!(o.status.code(), Some(2));

    let ev = dir.path().join("ev");
    let v = ok(&["eval", "--config", c, "--checkpoint", s(&ft), "--data", s(&data), "--out", s(&ev)]);
    assert!(v["metrics"]["toy_fid"].as_f64().unwrap() >= 0.0);
    assert!(v["metrics"]["toy_fvd"].as_f64().is_some());
    assert!(ev.join("metrics.json").exists());
    let v = ok(&["eval", "--config", c, "--checkpoint", s(&pre), "--data", s(&data)]);
    assert!(v["metrics"]["toy_fvd"].is_null());

    let smp = dir.path().join("smp");
    ok(&["sample", "--config", c, "--checkpoint", s(&ft.join("generator.gdp")), "--frames", "4", "--out", s(&smp)]);
    assert_eq!(gdf::load(smp.join("frames.gdf")).unwrap().shape(), [4, 3, 16, 16]);

    let fit = dir.path().join("fit");
    let v = ok(&["fit", "--config", c, "--data", s(&data), "--clip", "1", "--steps", "3", "--out", s(&fit)]);
    assert_eq!(v["clip"], 1);
    assert_eq!(fs::read_to_string(fit.join("log.jsonl")).unwrap().lines().count(), 3);
}

#[test]
fn ablate_reports_one_row_per_axis_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = dir.path().join("ab");
    let v = ok(&[
        "ablate", "--config", s(&cfg), "--axes", "no_fc,no_reg", "--seeds", "2", "--pretrain-steps", "1",
        "--finetune-steps", "1", "--videos", "3", "--out", s(&out),
    ]);
    let rows = v["rows"].as_array().unwrap();
    let keys: Vec<(String, u64)> = rows
        .iter()
        .map(|r| (r["axis"].as_str().unwrap().to_string(), r["seed"].as_u64().unwrap()))
        .collect();
    let want: Vec<(String, u64)> = [("no_fc", 0), ("no_reg", 0), ("no_fc", 1), ("no_reg", 1)]
        .iter()
        .map(|(a, s)| (a.to_string(), *s))
        .collect();
    assert_eq!(keys, want);
    assert!(rows.iter().all(|r| r["toy_fvd"].as_f64().is_some()));
    assert!(out.join("ablate.json").exists());
    let o = warpgen(&["ablate", "--config", s(&cfg), "--axes", "no_such_axis"]);
    assert_eq!(o.status.code(), Some(2));
}
