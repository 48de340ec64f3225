use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use warpgen::autodiff::{gradcheck, ParamStore};
use warpgen::data::{synth_dataset, Dataset};
use warpgen::experiment::{evaluate, run_seed, Metrics, Progress, Reference, Schedule, SeedRun, Variant};
use warpgen::field::{CanonicalImage, DeformationField, VideoClip};
use warpgen::models::{GeneratorBundle, InitMode, Latents};
use warpgen::propagate::{propagate_edit, propagate_mask, track_point, Mask};
use warpgen::train::{fit_clip, FinetuneStart, Stage, TrainConfig, Trainer};
use warpgen::{gdf, Tensor};

use crate::config::Settings;
use crate::imageio::{decode_mask, decode_rgb, encode_mask, encode_rgb};

pub const GENERATOR_FILE: &str = "generator.gdp";
pub const DISC_FILE: &str = "disc.gdp";
pub const LOG_FILE: &str = "log.jsonl";
pub const CANONICAL_FILE: &str = "canonical.gdf";
pub const FIELDS_FILE: &str = "fields.gdf";
pub const FRAMES_FILE: &str = "frames.gdf";
pub const MASKS_FILE: &str = "masks.gdf";

#[derive(Debug, Parser)]
#[command(name = "warpgen", version, about = "Generate videos by warping a canonical image, and propagate edits through them")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Seed for models, training and sampling (defaults to 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML settings file; flags override it.
    #[arg(long, global = true, value_name = "TOML")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a procedural sprite dataset with its manifest.
    GenData {
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train the canonical generator and frame discriminator on single frames.
    Pretrain {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Train the video model, starting from a pretraining run.
    Finetune {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Pretraining output directory.
        #[arg(long, value_name = "DIR")]
        from: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[command(flatten)]
        ablation: AblationFlags,
    },
    /// Fit a generator to one dataset clip by reconstruction.
    Fit {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        clip: usize,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Sample a video and write its canonical image, fields and frames.
    Sample {
        #[command(flatten)]
        source: SampleSource,
    },
    /// Warp an edited canonical image with a sample's fields.
    PropagateEdit {
        /// Directory written by `sample`.
        #[arg(long, value_name = "DIR")]
        sample: PathBuf,
        /// Edited canonical image (.png or .gdf).
        #[arg(long, value_name = "FILE")]
        edit: PathBuf,
    },
    /// Track a canonical-image point through a sample.
    Track {
        #[arg(long, value_name = "DIR")]
        sample: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        x: f64,
        #[arg(long, allow_negative_numbers = true)]
        y: f64,
    },
    /// Propagate a canonical-image mask through a sample.
    Segment {
        #[arg(long, value_name = "DIR")]
        sample: PathBuf,
        /// Binary mask (.png with 0/255 or .gdf with 0/1).
        #[arg(long, value_name = "FILE")]
        mask: PathBuf,
    },
    /// Sample again with new motion and the same canonical image.
    ResampleMotion {
        #[command(flatten)]
        source: SampleSource,
    },
    /// Score a checkpoint against a dataset.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long)]
        videos: Option<usize>,
    },
    /// Pretrain once per seed, fine-tune each ablation axis and score it.
    Ablate {
        /// Dataset directory; generated from the settings when absent.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Comma-separated axes: full, no_fc, no_reg, fix_gc, no_pretrain,
        /// no_multiplier, xavier.
        #[arg(long, default_value = "full,no_fc,no_reg,no_pretrain,no_multiplier")]
        axes: String,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        pretrain_steps: Option<u64>,
        #[arg(long)]
        finetune_steps: Option<u64>,
        #[arg(long)]
        videos: Option<usize>,
    },
    /// Check every differentiable op against central finite differences.
    Gradcheck,
    /// Run the HTTP service.
    Serve {
        /// Bundle used by sessions that name no checkpoint; an untrained
        /// bundle from the settings when absent.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

#[derive(Debug, Args)]
pub struct AblationFlags {
    #[arg(long)]
    pub no_fc: bool,
    #[arg(long)]
    pub no_reg: bool,
    #[arg(long)]
    pub fix_gc: bool,
    #[arg(long)]
    pub no_pretrain: bool,
    /// zero, xavier or no_multiplier.
    #[arg(long)]
    pub init_mode: Option<InitMode>,
}

#[derive(Debug, Args)]
pub struct SampleSource {
    /// Generator checkpoint (.gdp file or a run directory); an untrained
    /// bundle from the settings when absent.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    /// Motion seed; defaults to the content seed.
    #[arg(long)]
    pub motion_seed: Option<u64>,
}

#[derive(Debug)]
pub enum Failure {
    /// Bad invocation: exit code 2.
    Usage(String),
    /// Anything that went wrong while running: exit code 1.
    Runtime(String),
}

impl From<warpgen::Error> for Failure {
    fn from(e: warpgen::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

pub struct Ctx {
    pub seed: u64,
    pub settings: Settings,
    pub out: Option<PathBuf>,
}

impl Ctx {
    pub fn new(common: &Common) -> Result<Self, Failure> {
        let mut settings = match &common.config {
            Some(p) => Settings::load(p).map_err(Failure::Usage)?,
            None => Settings::default(),
        };
        let seed = common.seed.unwrap_or(settings.model.seed);
        settings.model.seed = seed;
        settings.train.seed = seed;
        Ok(Self {
            seed,
            settings,
            out: common.out.clone(),
        })
    }

    fn out_dir(&self) -> Result<PathBuf, Failure> {
        let dir = self.out.clone().ok_or_else(|| Failure::Usage("this command needs --out <DIR>".into()))?;
        fs::create_dir_all(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
        Ok(dir)
    }

    fn maybe_out(&self) -> Result<Option<PathBuf>, Failure> {
        self.out.as_ref().map(|_| self.out_dir()).transpose()
    }

    fn bundle(&self, checkpoint: Option<&Path>) -> Result<GeneratorBundle, Failure> {
        match checkpoint {
            Some(p) => Ok(GeneratorBundle::load(checkpoint_file(p))?),
            None => Ok(GeneratorBundle::init(self.settings.model.clone())?),
        }
    }
}

/// A run directory resolves to its generator file.
pub fn checkpoint_file(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(GENERATOR_FILE)
    } else {
        p.to_path_buf()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    fs::write(path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, v: &impl Serialize) -> Outcome {
    let mut s = serde_json::to_string_pretty(v).map_err(runtime)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

/// Writes a line to stdout. A closed pipe (`warpgen ... | head`) is not an
/// error worth reporting, so write failures are dropped.
fn out_line(s: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{s}");
}

fn print_json(v: &impl Serialize) {
    out_line(&serde_json::to_string_pretty(v).expect("json output"));
}

/// Frames side by side in one RGB PNG.
fn strip_png(frames: &Tensor) -> Vec<u8> {
    let [n, c, h, w] = frames.shape();
    let strip = Tensor::from_fn([1, c, h, w * n], |[_, ch, y, x]| frames.at(x / w, ch, y, x % w));
    encode_rgb(&strip, 0)
}

fn fields_tensor(fields: &[DeformationField]) -> Result<Tensor, Failure> {
    let parts: Vec<Tensor> = fields.iter().map(|f| f.offsets().clone()).collect();
    Ok(Tensor::stack(&parts)?)
}

fn load_sample_dir(dir: &Path) -> Result<(CanonicalImage, Vec<DeformationField>), Failure> {
    let canonical = CanonicalImage::new(gdf::load(dir.join(CANONICAL_FILE))?)?;
    let f = gdf::load(dir.join(FIELDS_FILE))?;
    let [n, ..] = f.shape();
    let fields = (0..n)
        .map(|i| DeformationField::new(f.select(&[i]), i as u32 + 1))
        .collect::<warpgen::Result<Vec<_>>>()?;
    Ok((canonical, fields))
}

fn is_png(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn read_bytes(p: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(p).map_err(|e| runtime(format!("{}: {e}", p.display())))
}

fn write_clip(dir: &Path, clip: &VideoClip) -> Outcome {
    gdf::save(clip.frames(), dir.join(FRAMES_FILE))?;
    write_file(&dir.join("frames.png"), &strip_png(clip.frames()))
}

fn load_dataset(dir: &Path) -> Result<Dataset, Failure> {
    Ok(Dataset::load(dir)?)
}

fn check_resolution(ctx: &Ctx, data: &Dataset) -> Outcome {
    if data.resolution() != ctx.settings.model.resolution {
        return Err(Failure::Usage(format!(
            "dataset resolution {} does not match model resolution {}; set [model] resolution",
            data.resolution(),
            ctx.settings.model.resolution
        )));
    }
    Ok(())
}

pub fn run(cli: Cli) -> Outcome {
    let ctx = Ctx::new(&cli.common)?;
    match cli.command {
        Command::GenData { clips, resolution, frames } => gen_data(&ctx, clips, resolution, frames),
        Command::Pretrain { data, steps } => pretrain(&ctx, &data, steps),
        Command::Finetune { data, from, steps, ablation } => finetune(&ctx, &data, from.as_deref(), steps, &ablation),
        Command::Fit { data, clip, steps } => fit(&ctx, &data, clip, steps),
        Command::Sample { source } | Command::ResampleMotion { source } => sample(&ctx, &source),
        Command::PropagateEdit { sample, edit } => propagate(&ctx, &sample, &edit),
        Command::Track { sample, x, y } => track(&ctx, &sample, x, y),
        Command::Segment { sample, mask } => segment(&ctx, &sample, &mask),
        Command::Eval { checkpoint, data, videos } => eval(&ctx, checkpoint.as_deref(), &data, videos),
        Command::Ablate {
            data,
            axes,
            seeds,
            pretrain_steps,
            finetune_steps,
            videos,
        } => ablate(&ctx, data.as_deref(), &axes, seeds, pretrain_steps, finetune_steps, videos),
        Command::Gradcheck => grad_check(&ctx),
        Command::Serve { checkpoint, addr } => serve(&ctx, checkpoint.as_deref(), &addr),
    }
}

fn gen_data(ctx: &Ctx, clips: Option<usize>, resolution: Option<usize>, frames: Option<usize>) -> Outcome {
    let out = ctx.out_dir()?;
    let mut dist = ctx.settings.data.distribution.clone();
    if let Some(r) = resolution {
        dist.resolution = r;
    }
    if let Some(f) = frames {
        dist.frame_count = f;
    }
    dist.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let n = clips.unwrap_or(ctx.settings.data.clips);
    let m = synth_dataset(&out, n, &dist, ctx.seed)?;
    print_json(&serde_json::json!({
        "dir": out,
        "clips": m.clips.len(),
        "seed": m.seed,
        "resolution": dist.resolution,
        "frames": dist.frame_count,
    }));
    Ok(())
}

fn save_run(dir: &Path, t: &Trainer) -> Outcome {
    t.bundle.save(dir.join(GENERATOR_FILE))?;
    t.disc.save(dir.join(DISC_FILE))?;
    Ok(())
}

fn train_loop(ctx: &Ctx, out: &Path, t: &mut Trainer, data: &Dataset, steps: u64) -> Outcome {
    write_file(&out.join("settings.toml"), ctx.settings.to_toml().as_bytes())?;
    let path = out.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?);
    let every = t.config.checkpoint_interval.max(1);
    let report = t.config.log_interval.max(1);
    let mut last = None;
    for _ in 0..steps {
        let l = t.step(data)?;
        serde_json::to_writer(&mut log, &l).map_err(runtime)?;
        log.write_all(b"\n").map_err(runtime)?;
        if l.step % report == 0 {
            log::info!("step {} loss_D {:.4} loss_G {:.4} L_reg {:?}", l.step, l.loss_d, l.loss_g, l.l_reg);
        }
        if (l.step + 1) % every == 0 {
            log.flush().map_err(runtime)?;
            save_run(out, t)?;
        }
        last = Some(l);
    }
    log.flush().map_err(runtime)?;
    save_run(out, t)?;
    print_json(&serde_json::json!({
        "dir": out,
        "steps": t.step_count(),
        "last": last,
    }));
    Ok(())
}

fn pretrain(ctx: &Ctx, data: &Path, steps: Option<u64>) -> Outcome {
    let out = ctx.out_dir()?;
    let ds = load_dataset(data)?;
    check_resolution(ctx, &ds)?;
    let cfg = TrainConfig {
        stage: Stage::Pretrain,
        ..ctx.settings.train.clone()
    };
    let mut t = Trainer::pretrain(ctx.settings.model.clone(), cfg).map_err(|e| Failure::Usage(e.to_string()))?;
    train_loop(ctx, &out, &mut t, &ds, steps.unwrap_or(ctx.settings.schedule.pretrain_steps))
}

fn finetune(ctx: &Ctx, data: &Path, from: Option<&Path>, steps: Option<u64>, flags: &AblationFlags) -> Outcome {
    let out = ctx.out_dir()?;
    let ds = load_dataset(data)?;
    let mut cfg = TrainConfig {
        stage: Stage::Finetune,
        ..ctx.settings.train.clone()
    };
    let a = &mut cfg.ablation;
    a.no_fc |= flags.no_fc;
    a.no_reg |= flags.no_reg;
    a.fix_gc |= flags.fix_gc;
    a.no_pretrain |= flags.no_pretrain;
    if let Some(m) = flags.init_mode {
        a.init_mode = m;
    }
    let start = match from {
        Some(dir) => FinetuneStart::Pretrained {
            bundle: GeneratorBundle::load(dir.join(GENERATOR_FILE))?,
            disc: ParamStore::load(dir.join(DISC_FILE))?,
        },
        None => FinetuneStart::Scratch(ctx.settings.model.clone()),
    };
    let mut t = Trainer::finetune(start, cfg).map_err(|e| Failure::Usage(e.to_string()))?;
    if ds.resolution() != t.bundle.config.resolution {
        return Err(Failure::Usage(format!(
            "dataset resolution {} does not match model resolution {}",
            ds.resolution(),
            t.bundle.config.resolution
        )));
    }
    train_loop(ctx, &out, &mut t, &ds, steps.unwrap_or(ctx.settings.schedule.finetune_steps))
}

fn fit(ctx: &Ctx, data: &Path, clip: usize, steps: Option<u64>) -> Outcome {
    let out = ctx.out_dir()?;
    let ds = load_dataset(data)?;
    check_resolution(ctx, &ds)?;
    let Some(target) = ds.clips.get(clip) else {
        return Err(Failure::Usage(format!("clip {clip} out of range (dataset has {})", ds.len())));
    };
    let mut bundle = GeneratorBundle::init(ctx.settings.model.clone())?;
    let latents = Latents::from_seed(&bundle.config, ctx.seed);
    let mut cfg = ctx.settings.fit.clone();
    if let Some(s) = steps {
        cfg.steps = s;
    }
    let path = out.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?);
    let mut io_err = None;
    let logs = fit_clip(&mut bundle, target, &latents, &cfg, |l| {
        if let Err(e) = serde_json::to_writer(&mut log, l).map_err(runtime).and_then(|_| log.write_all(b"\n").map_err(runtime)) {
            io_err.get_or_insert(e);
        }
        if l.step % 100 == 0 {
            log::info!("fit step {} l1 {:.5} L_reg {:.5}", l.step, l.l1, l.l_reg);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    log.flush().map_err(runtime)?;
    bundle.save(out.join(GENERATOR_FILE))?;
    print_json(&serde_json::json!({ "dir": out, "clip": clip, "last": logs.last() }));
    Ok(())
}

fn sample(ctx: &Ctx, src: &SampleSource) -> Outcome {
    let out = ctx.out_dir()?;
    if src.frames == 0 {
        return Err(Failure::Usage("--frames must be at least 1".into()));
    }
    let bundle = ctx.bundle(src.checkpoint.as_deref())?;
    let base = Latents::from_seed(&bundle.config, ctx.seed);
    let latents = match src.motion_seed {
        Some(m) => base.with_motion(m),
        None => base,
    };
    let s = bundle.sample(&latents, src.frames)?;
    gdf::save(s.canonical.tensor(), out.join(CANONICAL_FILE))?;
    gdf::save(&fields_tensor(&s.fields)?, out.join(FIELDS_FILE))?;
    write_clip(&out, &s.clip)?;
    write_file(&out.join("canonical.png"), &encode_rgb(s.canonical.tensor(), 0))?;
    let max_diff = (0..src.frames)
        .map(|t| s.clip.frame(t).max_abs_diff(s.canonical.tensor()))
        .fold(0.0f64, f64::max);
    let summary = serde_json::json!({
        "dir": out,
        "seed": ctx.seed,
        "motion_seed": latents.motion_seed,
        "frames": src.frames,
        "resolution": bundle.config.resolution,
        "max_abs_diff_to_canonical": max_diff,
    });
    write_json(&out.join("sample.json"), &summary)?;
    print_json(&summary);
    Ok(())
}

fn propagate(ctx: &Ctx, sample_dir: &Path, edit: &Path) -> Outcome {
    let out = ctx.out_dir()?;
    let (canonical, fields) = load_sample_dir(sample_dir)?;
    let edited = if is_png(edit) {
        decode_rgb(&read_bytes(edit)?).map_err(runtime)?
    } else {
        gdf::load(edit)?
    };
    let edited = CanonicalImage::new(edited)?;
    let clip = propagate_edit(&edited, &fields)?;
    write_clip(&out, &clip)?;
    let original = propagate_edit(&canonical, &fields)?;
    print_json(&serde_json::json!({
        "dir": out,
        "frames": clip.frame_count(),
        "max_abs_change": clip.frames().max_abs_diff(original.frames()),
    }));
    Ok(())
}

fn track(ctx: &Ctx, sample_dir: &Path, x: f64, y: f64) -> Outcome {
    let (_, fields) = load_sample_dir(sample_dir)?;
    let tr = track_point((x, y), &fields).map_err(|e| match e {
        warpgen::Error::Invalid(m) => Failure::Usage(m),
        other => other.into(),
    })?;
    if let Some(out) = ctx.maybe_out()? {
        write_json(&out.join("trajectory.json"), &tr)?;
    }
    print_json(&tr);
    Ok(())
}

fn segment(ctx: &Ctx, sample_dir: &Path, mask: &Path) -> Outcome {
    let out = ctx.out_dir()?;
    let (_, fields) = load_sample_dir(sample_dir)?;
    let m = if is_png(mask) {
        decode_mask(&read_bytes(mask)?).map_err(runtime)?
    } else {
        Mask::new(gdf::load(mask)?)?
    };
    let seq = propagate_mask(&m, &fields)?;
    let stacked = Tensor::stack(&seq.frames.iter().map(|f| f.tensor().clone()).collect::<Vec<_>>())?;
    gdf::save(&stacked, out.join(MASKS_FILE))?;
    for (t, f) in seq.frames.iter().enumerate() {
        write_file(&out.join(format!("mask_{t:03}.png")), &encode_mask(f))?;
    }
    print_json(&serde_json::json!({
        "dir": out,
        "frames": seq.frames.len(),
        "source_pixels": m.count(),
        "pixels": seq.frames.iter().map(Mask::count).collect::<Vec<_>>(),
    }));
    Ok(())
}

#[derive(Serialize)]
struct EvalReport<'a> {
    checkpoint: Option<&'a Path>,
    data: &'a Path,
    eval: warpgen::experiment::EvalConfig,
    metrics: Metrics,
}

fn eval(ctx: &Ctx, checkpoint: Option<&Path>, data: &Path, videos: Option<usize>) -> Outcome {
    let bundle = ctx.bundle(checkpoint)?;
    let ds = load_dataset(data)?;
    let mut cfg = ctx.settings.eval;
    if let Some(v) = videos {
        cfg.videos = v;
    }
    let reference = Reference::new(&ds)?;
    let report = EvalReport {
        checkpoint,
        data,
        eval: cfg,
        metrics: evaluate(&bundle, &reference, &cfg)?,
    };
    if let Some(out) = ctx.maybe_out()? {
        write_json(&out.join("metrics.json"), &report)?;
    }
    print_json(&report);
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    axis: &'static str,
    seed: u64,
    toy_fid: f64,
    toy_fvd: Option<f64>,
    jerk_fields: Option<f64>,
    jerk_video: Option<f64>,
    seconds: f64,
}

#[derive(Serialize)]
struct AblationReport {
    schedule: Schedule,
    rows: Vec<AblationRow>,
    runs: Vec<SeedRun>,
}

fn ablate(
    ctx: &Ctx,
    data: Option<&Path>,
    axes: &str,
    seeds: u64,
    pretrain_steps: Option<u64>,
    finetune_steps: Option<u64>,
    videos: Option<usize>,
) -> Outcome {
    let variants = axes
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse::<Variant>())
        .collect::<warpgen::Result<Vec<_>>>()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    if variants.is_empty() || seeds == 0 {
        return Err(Failure::Usage("need at least one axis and one seed".into()));
    }
    let ds = match data {
        Some(d) => load_dataset(d)?,
        None => Dataset::generate(ctx.settings.data.clips, &ctx.settings.data.distribution, ctx.seed)?,
    };
    check_resolution(ctx, &ds)?;
    let mut schedule = Schedule {
        pretrain_steps: pretrain_steps.unwrap_or(ctx.settings.schedule.pretrain_steps),
        finetune_steps: finetune_steps.unwrap_or(ctx.settings.schedule.finetune_steps),
        train: ctx.settings.train.clone(),
        eval: ctx.settings.eval,
    };
    if let Some(v) = videos {
        schedule.eval.videos = v;
    }
    let reference = Reference::new(&ds)?;
    let mut runs = Vec::new();
    for seed in ctx.seed..ctx.seed + seeds {
        let run = run_seed(&ctx.settings.model, &ds, &reference, &variants, seed, &schedule, |p| match p {
            Progress::Stage { seed, what } => log::info!("seed {seed}: {what}"),
            Progress::Step { seed, what, step, loss_g, loss_d } => {
                log::debug!("seed {seed} {what} step {step} loss_G {loss_g:.4} loss_D {loss_d:.4}")
            }
        })?;
        runs.push(run);
    }
    let rows = runs
        .iter()
        .flat_map(|r| r.rows.iter())
        .map(|r| AblationRow {
            axis: r.variant.name(),
            seed: r.seed,
            toy_fid: r.metrics.toy_fid,
            toy_fvd: r.metrics.toy_fvd,
            jerk_fields: r.metrics.jerk_fields,
            jerk_video: r.metrics.jerk_video,
            seconds: r.seconds,
        })
        .collect();
    let report = AblationReport { schedule, rows, runs };
    if let Some(out) = ctx.maybe_out()? {
        write_json(&out.join("ablate.json"), &report)?;
    }
    print_json(&report);
    Ok(())
}

fn grad_check(ctx: &Ctx) -> Outcome {
    let reports = gradcheck::run_suite(ctx.seed)?;
    for r in &reports {
        out_line(&format!(
            "{} {:<24} max rel error {:.3e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.op,
            r.max_rel_error
        ));
    }
    if let Some(out) = ctx.maybe_out()? {
        write_json(&out.join("gradcheck.json"), &reports)?;
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} ops failed the gradient check", reports.len())));
    }
    Ok(())
}

fn serve(ctx: &Ctx, checkpoint: Option<&Path>, addr: &str) -> Outcome {
    let state = crate::server::AppState::new(ctx.bundle(checkpoint)?);
    let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
    rt.block_on(crate::server::serve(state, addr)).map_err(runtime)
}
