//! The `raygauge` command line: scene generation, training, rendering,
//! evaluation and entropy reports.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{RunConfig, RESOLVED_CONFIG_FILE};
use crate::data::{load_transforms, orbit_poses, write_procedural_scene, OrbitLayout, SceneDataset, SceneSpec};
use crate::error::{Error, Result};
use crate::eval::{
    entropy_report, entropy_table, eval_table, eval_view_table, evaluate, EntropyReport,
    EntropyReportConfig, EvalReport,
};
use crate::field::{write_atomic, AnalyticField, Checkpoint, NeuralField};
use crate::geometry::{CameraIntrinsics, Pose, Vec3};
use crate::render::{render_image, write_depth_raw, write_png_gray16, write_png_rgb8, DepthSidecar, SamplingConfig};
use crate::train::{train_to_dir, Trainer, TrainingState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "RAYGAUGE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "raygauge", version, about = "Few-shot radiance fields with ray-entropy regularization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render an analytic scene into train/test splits.
    GenScene(GenSceneArgs),
    /// Train a field from a run configuration.
    Train(TrainArgs),
    /// Render RGB and depth images from a checkpoint.
    Render(RenderArgs),
    /// Score a checkpoint on a test split.
    Eval(EvalArgs),
    /// Measure post-training ray entropy and information gain.
    EntropyReport(EntropyArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FieldKind {
    Sphere,
    TwoSphere,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LayoutKind {
    Fibonacci,
    Uniform,
}

fn parse_color(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected r,g,b, got {s:?}"));
    }
    let mut c = [0.0; 3];
    for (slot, p) in c.iter_mut().zip(parts) {
        let v: f64 = p.trim().parse().map_err(|_| format!("bad channel {p:?}"))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(format!("channel {v} outside [0, 1]"));
        }
        *slot = v;
    }
    Ok(c)
}

#[derive(Args, Debug)]
pub struct GenSceneArgs {
    /// Output scene directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = FieldKind::TwoSphere)]
    pub field: FieldKind,
    /// Sphere radius (sphere field only).
    #[arg(long, default_value_t = 1.0)]
    pub radius: f64,
    #[arg(long, default_value_t = 40.0)]
    pub sigma: f64,
    #[arg(long, value_parser = parse_color, default_value = "0.9,0.3,0.2")]
    pub color: [f64; 3],
    /// Color of the second sphere (two-sphere field only).
    #[arg(long, value_parser = parse_color, default_value = "0.2,0.3,0.9")]
    pub second_color: [f64; 3],
    /// Training views.
    #[arg(long, default_value_t = 4)]
    pub views: usize,
    #[arg(long, default_value_t = 8)]
    pub test_views: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub width: usize,
    #[arg(long, default_value_t = 100)]
    pub height: usize,
    #[arg(long, default_value_t = 137.0)]
    pub focal: f64,
    /// Camera distance from the origin.
    #[arg(long, default_value_t = 4.0)]
    pub orbit_radius: f64,
    #[arg(long, value_enum, default_value_t = LayoutKind::Fibonacci)]
    pub layout: LayoutKind,
    #[arg(long, default_value_t = 2.0)]
    pub near: f64,
    #[arg(long, default_value_t = 6.0)]
    pub far: f64,
    #[arg(long)]
    pub black_background: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-path override such as `losses.lambda1=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A transforms JSON file, or `orbit:N[:RADIUS]` for N cameras on a
    /// Fibonacci orbit.
    #[arg(long)]
    pub pose_source: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Write only depth outputs.
    #[arg(long)]
    pub depth_only: bool,
    /// Image size and focal length for orbit pose sources.
    #[arg(long, default_value_t = 100)]
    pub width: usize,
    #[arg(long, default_value_t = 100)]
    pub height: usize,
    #[arg(long, default_value_t = 137.0)]
    pub focal: f64,
    #[arg(long, default_value_t = 4096)]
    pub chunk: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Transforms file of the views to score.
    #[arg(long)]
    pub transforms: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// A second checkpoint; per-view differences are added to the table.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long, default_value_t = 4096)]
    pub chunk: usize,
}

#[derive(Args, Debug)]
pub struct EntropyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Transforms file supplying the cameras.
    #[arg(long)]
    pub transforms: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Partner rotation bound in degrees.
    #[arg(long, default_value_t = 5.0)]
    pub max_angle: f64,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    /// Rays per pose along each image axis.
    #[arg(long, default_value_t = 32)]
    pub grid: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// A second checkpoint; a delta column is added to the table.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    #[arg(long)]
    pub label: Option<String>,
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } | Error::Image { .. } | Error::Dataset { .. } | Error::Checkpoint { .. } => {
            EXIT_IO
        }
        Error::Diverged { .. } | Error::NonFinite { .. } => EXIT_DIVERGED,
        Error::Config(_) | Error::InvalidArgument(_) | Error::Contract(_) => EXIT_USAGE,
    }
}

/// Sizes the global worker pool from [`THREADS_ENV`] when set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // A pool that already exists (as in tests) keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::GenScene(a) => gen_scene(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Render(a) => render_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::EntropyReport(a) => entropy_cmd(&a),
    }
}

/// Runs the CLI on `args` (program name first) and returns the exit code,
/// printing errors to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

pub fn gen_scene(a: &GenSceneArgs) -> Result<()> {
    if a.views == 0 {
        return Err(Error::invalid("--views must be >= 1"));
    }
    if !(a.sigma.is_finite() && a.sigma >= 0.0) {
        return Err(Error::invalid(format!("--sigma must be finite and >= 0, got {}", a.sigma)));
    }
    if !(a.radius > 0.0 && a.radius.is_finite()) {
        return Err(Error::invalid(format!("--radius must be > 0, got {}", a.radius)));
    }
    let field = match a.field {
        FieldKind::Sphere => AnalyticField::sphere(Vec3::ZERO, a.radius, a.sigma, a.color),
        FieldKind::TwoSphere => AnalyticField::two_sphere(a.sigma, a.color, a.second_color),
    };
    let spec = SceneSpec {
        field,
        intrinsics: CameraIntrinsics::new(a.width, a.height, a.focal)?,
        radius: a.orbit_radius,
        near: a.near,
        far: a.far,
        layout: match a.layout {
            LayoutKind::Fibonacci => OrbitLayout::Fibonacci,
            LayoutKind::Uniform => OrbitLayout::Uniform,
        },
        white_background: !a.black_background,
    };
    if !(spec.near > 0.0 && spec.near < spec.far) {
        return Err(Error::invalid(format!("need 0 < near < far, got {} / {}", a.near, a.far)));
    }
    create_dir(&a.out)?;
    write_procedural_scene(&a.out, &spec, a.views, a.test_views, a.seed)
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::resolve(a.config.as_deref(), &a.overrides)?;
    if let Some(out) = &a.out {
        cfg.output.dir = out.clone();
    }
    let train_ds = cfg.load_train()?;
    for w in &train_ds.warnings {
        eprintln!("warning: {w}");
    }
    let test_ds = if cfg.train.eval_every > 0 {
        let mut probe = cfg.clone();
        Some(probe.load_test()?)
    } else {
        None
    };
    let out = cfg.output.dir.clone();
    create_dir(&out)?;
    write_text(&out.join(RESOLVED_CONFIG_FILE), &cfg.to_json())?;

    let setup = cfg.setup();
    let mut trainer = match &a.resume {
        Some(path) => Trainer::resume(&train_ds, setup, &Checkpoint::load(path)?)?,
        None => Trainer::new(&train_ds, setup)?,
    };
    let sampling = cfg.sampling;
    let chunk = cfg.eval.chunk;
    let mut snapshot = |field: &NeuralField, _iter: usize| -> Result<serde_json::Value> {
        let test = test_ds.as_ref().expect("loaded when evaluation is enabled");
        let r = evaluate(field, test, &sampling, chunk, "snapshot")?;
        Ok(json!({"psnr": r.psnr.map(|s| s.mean), "ssim": r.ssim.mean}))
    };
    match train_to_dir(&mut trainer, &out, &mut snapshot) {
        Ok(outputs) => {
            if let Some(last) = outputs.last {
                eprintln!(
                    "trained to iteration {}: rgb {:.6}, total {:.6}",
                    last.iter + 1,
                    last.rgb,
                    last.total
                );
            }
            Ok(())
        }
        Err(e @ Error::Diverged { .. }) => {
            eprintln!(
                "last good iteration {} saved to {}",
                trainer.iteration(),
                out.join(crate::train::CHECKPOINT_FILE).display()
            );
            Err(e)
        }
        Err(e) => Err(e),
    }
}

fn load_field(path: &Path) -> Result<(NeuralField, Option<crate::train::TrainSetup>)> {
    let state = TrainingState::load(path)?;
    Ok((state.field, state.setup))
}

fn sampling_for(setup: Option<&crate::train::TrainSetup>, ds: Option<&SceneDataset>) -> SamplingConfig {
    let mut s = setup.map(|s| s.sampling).unwrap_or_default();
    if let Some(ds) = ds {
        s.near = ds.near;
        s.far = ds.far;
        s.white_background = ds.white_background;
    }
    s.deterministic()
}

/// Cameras named by a `--pose-source` value.
pub enum PoseSource {
    Transforms(SceneDataset),
    Orbit { count: usize, radius: f64 },
}

pub fn parse_pose_source(s: &str) -> Result<PoseSource> {
    if let Some(rest) = s.strip_prefix("orbit:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let bad = || Error::invalid(format!("pose source {s:?} is not orbit:N[:RADIUS]"));
        if parts.is_empty() || parts.len() > 2 {
            return Err(bad());
        }
        let count: usize = parts[0].parse().map_err(|_| bad())?;
        let radius: f64 = match parts.get(1) {
            Some(r) => r.parse().map_err(|_| bad())?,
            None => 4.0,
        };
        if count == 0 || !(radius > 0.0 && radius.is_finite()) {
            return Err(bad());
        }
        return Ok(PoseSource::Orbit { count, radius });
    }
    let path = Path::new(s);
    if !path.is_file() {
        return Err(Error::invalid(format!("pose source {s:?} is neither orbit:N nor a transforms file")));
    }
    load_transforms(path, None).map(PoseSource::Transforms).map_err(|e| match e {
        Error::Dataset { path, reason } => Error::InvalidArgument(format!("{}: {reason}", path.display())),
        other => other,
    })
}

pub fn render_cmd(a: &RenderArgs) -> Result<()> {
    let source = parse_pose_source(&a.pose_source)?;
    let (field, setup) = load_field(&a.checkpoint)?;
    let (intr, poses, sampling): (CameraIntrinsics, Vec<Pose>, SamplingConfig) = match &source {
        PoseSource::Transforms(ds) => (ds.intrinsics, ds.poses(), sampling_for(setup.as_ref(), Some(ds))),
        PoseSource::Orbit { count, radius } => {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            (
                CameraIntrinsics::new(a.width, a.height, a.focal)?,
                orbit_poses(*count, *radius, OrbitLayout::Fibonacci, &mut rng),
                sampling_for(setup.as_ref(), None),
            )
        }
    };
    create_dir(&a.out)?;
    for (i, pose) in poses.iter().enumerate() {
        let img = render_image(&field, &intr, pose, &sampling, a.chunk)?;
        if !a.depth_only {
            write_png_rgb8(&a.out.join(format!("rgb_{i:03}.png")), img.width, img.height, &img.rgb)?;
        }
        write_png_gray16(&a.out.join(format!("depth_{i:03}.png")), img.width, img.height, &img.depth)?;
        let sidecar = DepthSidecar {
            width: img.width,
            height: img.height,
            near: sampling.near,
            far: sampling.far,
        };
        write_depth_raw(&a.out.join(format!("depth_{i:03}.raw")), &img.depth, &sidecar)?;
    }
    Ok(())
}

fn label_for(label: &Option<String>, path: &Path) -> String {
    label.clone().unwrap_or_else(|| {
        path.parent()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string())
    })
}

fn eval_one(path: &Path, label: String, test: &SceneDataset, chunk: usize) -> Result<EvalReport> {
    let (field, setup) = load_field(path)?;
    evaluate(&field, test, &sampling_for(setup.as_ref(), Some(test)), chunk, &label)
}

pub fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let test = load_transforms(&a.transforms, None)?;
    let report = eval_one(&a.checkpoint, label_for(&a.label, &a.checkpoint), &test, a.chunk)?;
    let other = match &a.compare {
        Some(p) => Some(eval_one(p, label_for(&None, p), &test, a.chunk)?),
        None => None,
    };
    create_dir(&a.out)?;
    let mut reports = vec![&report];
    reports.extend(other.as_ref());
    let json_doc = match &other {
        Some(o) => json!({"report": report, "compare": o}),
        None => json!(report),
    };
    write_text(&a.out.join("eval.json"), &serde_json::to_string_pretty(&json_doc).expect("json"))?;
    let mut text = eval_table(&reports);
    text.push('\n');
    text.push_str(&eval_view_table(&report, other.as_ref())?);
    write_text(&a.out.join("eval.txt"), &text)?;
    let timings: Vec<serde_json::Value> = reports
        .iter()
        .map(|r| json!({"label": r.label, "render_seconds": r.render_seconds}))
        .collect();
    write_text(&a.out.join("eval_timings.json"), &serde_json::to_string_pretty(&timings).expect("json"))?;
    print!("{text}");
    Ok(())
}

fn entropy_one(path: &Path, label: String, ds: &SceneDataset, cfg: &EntropyReportConfig) -> Result<EntropyReport> {
    let (field, setup) = load_field(path)?;
    let sampling = sampling_for(setup.as_ref(), Some(ds));
    entropy_report(&field, &ds.intrinsics, &ds.poses(), &sampling, cfg, &label)
}

pub fn entropy_cmd(a: &EntropyArgs) -> Result<()> {
    if !(a.max_angle.is_finite() && a.max_angle >= 0.0) {
        return Err(Error::invalid(format!("--max-angle must be >= 0, got {}", a.max_angle)));
    }
    let ds = load_transforms(&a.transforms, None)?;
    let cfg = EntropyReportConfig {
        grid: a.grid,
        max_angle: a.max_angle,
        epsilon: a.epsilon,
        seed: a.seed,
    };
    let report = entropy_one(&a.checkpoint, label_for(&a.label, &a.checkpoint), &ds, &cfg)?;
    let mut reports = vec![report];
    if let Some(p) = &a.compare {
        reports.push(entropy_one(p, label_for(&None, p), &ds, &cfg)?);
    }
    create_dir(&a.out)?;
    let json_doc = if reports.len() == 1 {
        json!(reports[0])
    } else {
        json!({"report": reports[0], "compare": reports[1]})
    };
    write_text(&a.out.join("entropy.json"), &serde_json::to_string_pretty(&json_doc).expect("json"))?;
    let text = entropy_table(&reports.iter().collect::<Vec<_>>());
    write_text(&a.out.join("entropy.txt"), &text)?;
    print!("{text}");
    Ok(())
}
