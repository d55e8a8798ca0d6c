use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use plenoxels::dataset::{camera_rays, load_dataset, read_split_meta, Dataset, LoadOptions, SceneType};
use plenoxels::io::{load_grid, save_grid, write_image, ExportManifest, SuggestedPose};
use plenoxels::raster::Image;
use plenoxels::toy::{make_toy, ToySpec};
use plenoxels::trainer::{
    default_config, evaluate_views, load_config, render_rays, JsonLinesSink, MetricRecord, MetricsSink, TrainConfig,
    Trainer,
};

#[derive(Parser)]
#[command(name = "plenoxel", version, about = "Train and render sparse voxel radiance grids")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Optimize a grid against a dataset.
    Train(TrainArgs),
    /// Render one PNG per pose of a frames file.
    Render(RenderArgs),
    /// Report mean PSNR and SSIM over the test split.
    Eval(EvalArgs),
    /// Write a grid and a viewer manifest into a directory.
    Export(ExportArgs),
    /// Generate the procedural spheres dataset.
    MakeToy(ToyArgs),
}

#[derive(Args)]
struct SceneArgs {
    /// TOML training config; render settings and scene type are taken from it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene type when no config is given.
    #[arg(long, value_parser = parse_scene_type, default_value = "bounded")]
    scene_type: SceneType,
    /// Dotted `key=value` config override, repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct LoadArgs {
    /// Integer image downscale factor.
    #[arg(long, default_value_t = 1)]
    downscale: u32,
    /// Use at most this many views per split.
    #[arg(long)]
    max_views: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    scene: SceneArgs,
    #[command(flatten)]
    load: LoadArgs,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    artifact: PathBuf,
    /// Frames file in the dataset transforms layout.
    #[arg(long)]
    camera_json: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Image size when the frames file has no `w`/`h` keys.
    #[arg(long, default_value_t = 800)]
    width: u32,
    #[arg(long, default_value_t = 800)]
    height: u32,
    /// Dataset the grid was trained on; needed to reproduce its scene normalization.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    scene: SceneArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    artifact: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    scene: SceneArgs,
    #[command(flatten)]
    load: LoadArgs,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    artifact: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Frames file whose first pose becomes the suggested viewpoint.
    #[arg(long)]
    camera_json: Option<PathBuf>,
    #[command(flatten)]
    scene: SceneArgs,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 25)]
    views: usize,
    #[arg(long, default_value_t = 8)]
    test_views: usize,
    #[arg(long, default_value_t = 128)]
    res: u32,
    #[arg(long, default_value_t = 64)]
    grid_dim: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn parse_scene_type(s: &str) -> Result<SceneType, String> {
    match s {
        "bounded" => Ok(SceneType::Bounded),
        "forward_facing_ndc" | "forward_facing" => Ok(SceneType::ForwardFacingNdc),
        "unbounded_360" | "unbounded" => Ok(SceneType::Unbounded360),
        _ => Err(format!("unknown scene type `{s}` (bounded, forward_facing_ndc, unbounded_360)")),
    }
}

/// A required input path is missing.
#[derive(Debug)]
struct MissingPath(PathBuf, &'static str);

impl std::fmt::Display for MissingPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} path does not exist: {}", self.1, self.0.display())
    }
}

impl std::error::Error for MissingPath {}

fn require(path: &Path, what: &'static str) -> Result<()> {
    if !path.exists() {
        return Err(MissingPath(path.to_path_buf(), what).into());
    }
    Ok(())
}

impl SceneArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        match &self.config {
            Some(p) => {
                require(p, "config")?;
                Ok(load_config(p, &self.overrides)?)
            }
            None => {
                let text = default_config(self.scene_type).to_toml_string()?;
                Ok(TrainConfig::from_toml_with_overrides(&text, &self.overrides)?)
            }
        }
    }
}

impl LoadArgs {
    fn options(&self, cfg: &TrainConfig) -> LoadOptions {
        LoadOptions {
            downscale: self.downscale,
            background: cfg.render.background.map(|c| c as f32),
            max_views: self.max_views,
            ..LoadOptions::default()
        }
    }
}

/// Writes every record to the log and echoes evaluations to stderr.
struct CliSink<W: Write> {
    log: JsonLinesSink<W>,
}

impl<W: Write> MetricsSink for CliSink<W> {
    fn record(&mut self, rec: &MetricRecord) -> plenoxels::Result<()> {
        match rec.kind.as_str() {
            "eval" => eprintln!(
                "step {:>7}  psnr {:.2}  ssim {:.4}  rows {}  {:.0}s",
                rec.step,
                rec.psnr.unwrap_or(f64::NAN),
                rec.ssim.unwrap_or(f64::NAN),
                rec.rows,
                rec.wall_time_s
            ),
            "rung" => eprintln!("step {:>7}  resampled to {:?}, {} rows", rec.step, rec.dims, rec.rows),
            _ => {}
        }
        self.log.record(rec)
    }
}

fn train(a: &TrainArgs) -> Result<()> {
    require(&a.data, "dataset")?;
    let mut cfg = a.scene.resolve()?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.threads.is_some() {
        cfg.threads = a.threads;
    }
    let ds = load_dataset(&a.data, cfg.scene_type, &a.load.options(&cfg))?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("config.toml"), cfg.to_toml_string()?)?;
    let metrics = a.out.join("metrics.jsonl");
    let file = File::create(&metrics).with_context(|| format!("creating {}", metrics.display()))?;
    let mut sink = CliSink {
        log: JsonLinesSink::new(BufWriter::new(file)),
    };
    let grid_path = a.out.join("grid.plnx");
    let mut trainer = Trainer::new(&ds, cfg)?
        .checkpoint_to(&grid_path)
        .dump_on_failure(a.out.join("failed.plnx"));
    let summary = trainer.run(&mut sink)?;
    save_grid(trainer.grid(), trainer.background(), &grid_path)?;
    let text = serde_json::to_string_pretty(&summary)?;
    fs::write(a.out.join("summary.json"), format!("{text}\n"))?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

/// Cameras of a frames file, mapped into the grid's frame when a dataset is given.
fn frames_for_render(
    a: &RenderArgs,
    cfg: &TrainConfig,
) -> Result<(Vec<(PathBuf, plenoxels::camera::Camera<f64>)>, Option<plenoxels::camera::Camera<f64>>)> {
    let meta = read_split_meta(&a.camera_json, Some((a.width, a.height)))?;
    let mut frames = meta.frames;
    let mut ndc = None;
    match &a.data {
        Some(d) => {
            require(d, "dataset")?;
            let opts = LoadOptions {
                max_views: Some(1),
                ..LoadOptions::default()
            };
            let ds = load_dataset(d, cfg.scene_type, &opts)?;
            if let Some(n) = &ds.normalization {
                for f in &mut frames {
                    f.1 = n.apply(&f.1);
                }
            }
            ndc = ds.ndc;
        }
        None if cfg.scene_type == SceneType::ForwardFacingNdc => {
            bail!("rendering a forward-facing scene needs --data to recover its NDC reference camera")
        }
        None => {}
    }
    Ok((frames, ndc))
}

fn render(a: &RenderArgs) -> Result<()> {
    require(&a.artifact, "artifact")?;
    require(&a.camera_json, "camera json")?;
    let cfg = a.scene.resolve()?;
    let (grid, bg) = load_grid(&a.artifact)?;
    let (frames, ndc) = frames_for_render(a, &cfg)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let opts = cfg.render.options::<f32>();
    for (i, (path, cam)) in frames.iter().enumerate() {
        let rays = camera_rays(cam, ndc.as_ref(), None)?;
        let px = render_rays(&grid, bg.as_ref(), &rays, &opts)?;
        let img = Image::from_data(cam.width, cam.height, px)?;
        let name = path
            .file_name()
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(format!("{i:04}.png")));
        write_image(&img, a.out_dir.join(name))?;
    }
    eprintln!("rendered {} views into {}", frames.len(), a.out_dir.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    require(&a.artifact, "artifact")?;
    require(&a.data, "dataset")?;
    let cfg = a.scene.resolve()?;
    let ds: Dataset = load_dataset(&a.data, cfg.scene_type, &a.load.options(&cfg))?;
    if ds.test.is_empty() {
        bail!("{} has no test views", a.data.display());
    }
    let (grid, bg) = load_grid(&a.artifact)?;
    let pool = rayon_pool(&cfg)?;
    let ev = evaluate_views(&grid, bg.as_ref(), &ds, &ds.test, &cfg.render.options(), &pool)?;
    let out = serde_json::json!({ "psnr": ev.psnr, "ssim": ev.ssim, "views": ev.per_view.len() });
    println!("{out}");
    Ok(())
}

fn rayon_pool(cfg: &TrainConfig) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new()
        .num_threads(plenoxels::trainer::thread_count(cfg))
        .build()?)
}

/// A view from outside the box looking at its center.
fn default_pose(grid: &plenoxels::Grid) -> SuggestedPose {
    let aabb = grid.aabb().cast::<f64>();
    let c = aabb.center();
    let r = aabb.extent().norm();
    let eye = c + plenoxels::Vec3::new(0.8, -1.2, 0.7).normalized() * (1.5 * r);
    let cam = plenoxels::camera::Camera::look_at(eye, c, plenoxels::Vec3::new(0.0, 0.0, 1.0), 400.0, 400, 400)
        .expect("eye is away from the target");
    SuggestedPose {
        transform_matrix: cam.c2w,
        camera_angle_x: 2.0 * (200.0f64 / 400.0).atan(),
        width: 400,
        height: 400,
    }
}

fn export(a: &ExportArgs) -> Result<()> {
    require(&a.artifact, "artifact")?;
    let cfg = a.scene.resolve()?;
    let (grid, bg) = load_grid(&a.artifact)?;
    let pose = match &a.camera_json {
        Some(p) => {
            require(p, "camera json")?;
            let meta = read_split_meta(p, Some((800, 800)))?;
            let (_, cam) = meta
                .frames
                .first()
                .with_context(|| format!("{} has no frames", p.display()))?;
            SuggestedPose {
                transform_matrix: cam.c2w,
                camera_angle_x: 2.0 * (cam.width as f64 / (2.0 * cam.focal)).atan(),
                width: cam.width,
                height: cam.height,
            }
        }
        None => default_pose(&grid),
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let name = a
        .artifact
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("grid.plnx")
        .to_string();
    save_grid(&grid, bg.as_ref(), a.out.join(&name))?;
    let manifest = ExportManifest::for_grid(name, &grid, bg.is_some(), cfg.render.step_frac, pose);
    manifest.save(a.out.join("manifest.json"))?;
    eprintln!("exported {} rows at {:?} into {}", grid.row_count(), grid.dims(), a.out.display());
    Ok(())
}

fn toy(a: &ToyArgs) -> Result<()> {
    let spec = ToySpec {
        train_views: a.views,
        test_views: a.test_views,
        resolution: a.res,
        grid_dim: a.grid_dim,
        seed: a.seed,
        ..ToySpec::default()
    };
    make_toy(&a.out, &spec)?;
    eprintln!("wrote toy dataset to {}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Train(a) => train(a),
        Cmd::Render(a) => render(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Export(a) => export(a),
        Cmd::MakeToy(a) => toy(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            if e.downcast_ref::<MissingPath>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
