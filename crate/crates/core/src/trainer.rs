//! End-to-end optimization of a grid against a [`Dataset`].
//!
//! Each step draws a batch of training rays (an epoch-wise permutation of
//! every pixel), renders them, backpropagates the reconstruction loss and
//! the enabled regularizers, and applies one optimizer update to the rows
//! that received gradient. At each rung of the resolution ladder the grid
//! is pruned and resampled onto the new lattice.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Ray;
use crate::dataset::{Dataset, SceneType};
use crate::error::{Error, Result};
use crate::grad::GradientBuffer;
use crate::grid::{Aabb, InterpMode, PruneCriterion, Row, SparseGrid, ROW_LEN};
use crate::io::{save_checkpoint, save_grid, OptimCheckpoint};
use crate::losses::{beta_term, cauchy_term, sample_tv_voxels, tv_loss, LossWeights};
use crate::metrics::{psnr, ssim};
use crate::msi::{
    backward_ray_with_background, bg_step, bg_tv_loss, trace_ray_with_background, BgGradients, BgOptimState,
    CompositeTrace, CompositeUpstream, MsiBackground,
};
use crate::optim::{self, LrSchedule, OptimMethod, OptimState};
use crate::raster::Image;
use crate::render::{accumulate_max_weights, backward_ray, trace_ray, Formula, RayTrace, RayUpstream, RenderOptions};
use crate::sh::{SH_BASIS_DIM, SH_C0};
use crate::vec3::Vec3;

/// One rung of the coarse-to-fine ladder: from `step` on, the grid has `dims`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rung {
    pub step: u64,
    pub dims: [usize; 3],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneKind {
    /// Maximum rendering weight over all training rays.
    #[default]
    Weight,
    /// Stored opacity.
    Density,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub criterion: PruneKind,
    pub threshold: f64,
    /// Divide a weight threshold by the largest axis of the new lattice.
    pub scale_by_resolution: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            criterion: PruneKind::Weight,
            threshold: 0.256,
            scale_by_resolution: true,
        }
    }
}

impl PruneConfig {
    /// Threshold actually compared against when moving to `new_dims`.
    pub fn effective_threshold(&self, new_dims: [usize; 3]) -> f64 {
        match self.criterion {
            PruneKind::Weight if self.scale_by_resolution => {
                self.threshold / *new_dims.iter().max().expect("three axes") as f64
            }
            _ => self.threshold,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub step_frac: f64,
    pub stop_threshold: f64,
    pub interpolation: InterpMode,
    pub formula: Formula,
    /// Color behind the grid; ignored when a background model is present.
    pub background: [f64; 3],
    /// Randomize the first sample offset of each training ray.
    pub jitter: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            step_frac: 0.5,
            stop_threshold: 1e-4,
            interpolation: InterpMode::Trilinear,
            formula: Formula::Max,
            background: [1.0; 3],
            jitter: false,
        }
    }
}

impl RenderConfig {
    pub fn options<T: crate::Scalar>(&self) -> RenderOptions<T> {
        RenderOptions {
            step_frac: T::lit(self.step_frac),
            stop_threshold: T::lit(self.stop_threshold),
            mode: self.interpolation,
            formula: self.formula,
            background: self.background.map(T::lit),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub method: OptimMethod,
    pub decay: f64,
    pub eps: f64,
    pub lr_sigma: LrSchedule,
    pub lr_sh: LrSchedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: OptimMethod::Rmsprop,
            decay: 0.95,
            eps: 1e-8,
            lr_sigma: LrSchedule::DelayedExponential {
                lr_init: 30.0,
                lr_final: 0.05,
                total_steps: 250_000,
                delay_steps: 15_000,
                delay_mult: 0.01,
            },
            lr_sh: LrSchedule::Exponential {
                lr_init: 0.01,
                lr_final: 5e-6,
                total_steps: 250_000,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub sigma: f64,
    /// Initial diffuse color per channel.
    pub color: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { sigma: 0.1, color: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub every: u64,
    /// Cap on held-out views rendered per evaluation.
    pub max_views: Option<usize>,
    /// Log the training loss every this many steps; 0 disables.
    pub log_every: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            every: 0,
            max_views: None,
            log_every: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackgroundConfig {
    pub n_layers: usize,
    pub width: usize,
    pub height: usize,
    pub tv_sigma: f64,
    pub tv_color: f64,
    pub tv_sample_fraction: f64,
    pub lr_sigma: LrSchedule,
    pub lr_color: LrSchedule,
    pub init_sigma: f64,
    pub init_color: f64,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        Self {
            n_layers: 64,
            width: 2048,
            height: 1024,
            tv_sigma: 1e-3,
            tv_color: 1e-3,
            tv_sample_fraction: 0.01,
            lr_sigma: LrSchedule::Exponential {
                lr_init: 3.0,
                lr_final: 3e-3,
                total_steps: 250_000,
            },
            lr_color: LrSchedule::Exponential {
                lr_init: 0.1,
                lr_final: 5e-6,
                total_steps: 250_000,
            },
            init_sigma: 0.1,
            init_color: 0.5,
        }
    }
}

/// Every training hyperparameter. Serialized as TOML with unknown keys rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub scene_type: SceneType,
    pub seed: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    /// Foreground box for bounded scenes; `None` picks the scene-type default.
    pub aabb: Option<[[f64; 3]; 2]>,
    /// Extra lattice cells added beyond each z face of the NDC cube.
    pub ndc_z_padding: usize,
    pub ladder: Vec<Rung>,
    pub prune: PruneConfig,
    pub render: RenderConfig,
    pub losses: LossWeights,
    pub optimizer: OptimizerConfig,
    pub init: InitConfig,
    pub eval: EvalConfig,
    pub background: Option<BackgroundConfig>,
    /// Save a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    /// Worker threads; `None` uses `PLENOXEL_THREADS` or all cores.
    pub threads: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        default_config(SceneType::Bounded)
    }
}

/// Published per-scene-type hyperparameters.
pub fn default_config(scene_type: SceneType) -> TrainConfig {
    let base = TrainConfig {
        scene_type,
        seed: 0,
        total_steps: 128_000,
        batch_size: 5000,
        aabb: None,
        ndc_z_padding: 0,
        ladder: vec![],
        prune: PruneConfig::default(),
        render: RenderConfig::default(),
        losses: LossWeights::default(),
        optimizer: OptimizerConfig::default(),
        init: InitConfig::default(),
        eval: EvalConfig::default(),
        background: None,
        checkpoint_every: 0,
        threads: None,
    };
    match scene_type {
        SceneType::Bounded => TrainConfig {
            ladder: vec![Rung { step: 0, dims: [256; 3] }, Rung { step: 38_400, dims: [512; 3] }],
            prune: PruneConfig {
                criterion: PruneKind::Weight,
                threshold: 0.256,
                scale_by_resolution: true,
            },
            losses: LossWeights {
                tv_sigma: 1e-5,
                tv_sh: 1e-3,
                tv_after_upsample: false,
                ..LossWeights::default()
            },
            ..base
        },
        SceneType::ForwardFacingNdc => TrainConfig {
            ladder: vec![
                Rung { step: 0, dims: [256, 256, 128] },
                Rung { step: 38_400, dims: [512, 512, 128] },
                Rung { step: 76_800, dims: [1408, 1156, 128] },
            ],
            prune: PruneConfig {
                criterion: PruneKind::Density,
                threshold: 5.0,
                scale_by_resolution: false,
            },
            losses: LossWeights {
                tv_sigma: 5e-4,
                tv_sh: 5e-3,
                sparsity: 1e-12,
                ..LossWeights::default()
            },
            render: RenderConfig {
                background: [0.0; 3],
                ..RenderConfig::default()
            },
            ..base
        },
        SceneType::Unbounded360 => TrainConfig {
            total_steps: 102_400,
            ladder: vec![
                Rung { step: 0, dims: [128; 3] },
                Rung { step: 25_600, dims: [256; 3] },
                Rung { step: 51_200, dims: [512; 3] },
                Rung { step: 76_800, dims: [640; 3] },
            ],
            prune: PruneConfig {
                criterion: PruneKind::Weight,
                threshold: 1.28,
                scale_by_resolution: true,
            },
            losses: LossWeights {
                tv_sigma: 5e-5,
                tv_sh: 5e-3,
                sparsity: 1e-11,
                beta: 1e-5,
                ..LossWeights::default()
            },
            render: RenderConfig {
                background: [0.0; 3],
                ..RenderConfig::default()
            },
            background: Some(BackgroundConfig::default()),
            ..base
        },
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.ladder.is_empty() {
            return bad("ladder needs at least one rung".into());
        }
        if self.ladder[0].step != 0 {
            return bad("the first rung must start at step 0".into());
        }
        for w in self.ladder.windows(2) {
            if w[1].step <= w[0].step {
                return bad("ladder steps must be strictly increasing".into());
            }
        }
        if self.ladder.len() > 1 && self.ladder.last().map(|r| r.step) >= Some(self.total_steps) {
            return bad("every ladder step must come before total_steps".into());
        }
        for r in &self.ladder {
            if r.dims.iter().any(|&d| d < 2) {
                return bad(format!("rung dims {:?} must be at least 2 per axis", r.dims));
            }
        }
        if !(self.render.step_frac > 0.0) || !(self.render.stop_threshold >= 0.0) {
            return bad("render.step_frac must be positive and stop_threshold nonnegative".into());
        }
        if !(self.prune.threshold >= 0.0) {
            return bad("prune.threshold must be nonnegative".into());
        }
        if !(self.optimizer.decay > 0.0 && self.optimizer.decay < 1.0 && self.optimizer.eps > 0.0) {
            return bad("optimizer.decay must lie in (0, 1) and eps be positive".into());
        }
        self.losses.validate()?;
        self.optimizer.lr_sigma.validate()?;
        self.optimizer.lr_sh.validate()?;
        match (self.scene_type, &self.background) {
            (SceneType::Unbounded360, None) => return bad("unbounded scenes need a [background] table".into()),
            (SceneType::Unbounded360, Some(b)) => {
                b.lr_sigma.validate()?;
                b.lr_color.validate()?;
                if !(b.tv_sample_fraction > 0.0 && b.tv_sample_fraction <= 1.0) {
                    return bad("background.tv_sample_fraction must lie in (0, 1]".into());
                }
            }
            (_, Some(_)) => return bad("a background model is only used for unbounded scenes".into()),
            _ => {}
        }
        if let Some([lo, hi]) = self.aabb {
            if (0..3).any(|a| !(hi[a] > lo[a])) {
                return bad("aabb max must exceed min on every axis".into());
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses TOML after applying `key.path=value` overrides. Values are
    /// read as TOML literals, falling back to plain strings.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: TrainConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Foreground box implied by the scene type.
    pub fn grid_aabb(&self) -> Aabb<f64> {
        if let Some([lo, hi]) = self.aabb {
            return Aabb::new(Vec3::from_array(lo), Vec3::from_array(hi));
        }
        match self.scene_type {
            SceneType::Bounded => Aabb::cube(1.5),
            SceneType::ForwardFacingNdc => {
                let dz = self.ladder.first().map(|r| r.dims[2]).unwrap_or(2).max(2);
                let pad = self.ndc_z_padding as f64 * 2.0 / (dz as f64 - 1.0);
                Aabb::new(Vec3::new(-1.0, -1.0, -1.0 - pad), Vec3::new(1.0, 1.0, 1.0 + pad))
            }
            // Cube inscribed in the unit sphere.
            SceneType::Unbounded360 => Aabb::cube(1.0 / 3f64.sqrt()),
        }
    }
}

fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut table = doc;
    for p in path {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Epoch-wise permutation sampler: each index appears once per epoch.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    perm: Vec<u32>,
    pos: usize,
    rng: ChaCha8Rng,
    epoch: u64,
}

impl EpochSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut perm: Vec<u32> = (0..n as u32).collect();
        perm.shuffle(&mut rng);
        Self {
            perm,
            pos: 0,
            rng,
            epoch: 0,
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Fills `out` with the next `k` indices, starting a new epoch as needed.
    pub fn next_batch(&mut self, k: usize, out: &mut Vec<u32>) {
        out.clear();
        if self.perm.is_empty() {
            return;
        }
        while out.len() < k {
            if self.pos == self.perm.len() {
                self.perm.shuffle(&mut self.rng);
                self.pos = 0;
                self.epoch += 1;
            }
            let take = (k - out.len()).min(self.perm.len() - self.pos);
            out.extend_from_slice(&self.perm[self.pos..self.pos + take]);
            self.pos += take;
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// `train`, `eval`, `rung` or `summary`.
    pub kind: String,
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    pub rows: usize,
    pub dims: [usize; 3],
    pub wall_time_s: f64,
}

pub trait MetricsSink {
    fn record(&mut self, rec: &MetricRecord) -> Result<()>;
}

/// Discards records.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: &MetricRecord) -> Result<()> {
        Ok(())
    }
}

impl MetricsSink for Vec<MetricRecord> {
    fn record(&mut self, rec: &MetricRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Appends one JSON object per line.
pub struct JsonLinesSink<W: Write> {
    out: W,
}

impl<W: Write> JsonLinesSink<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }
}

impl<W: Write> MetricsSink for JsonLinesSink<W> {
    fn record(&mut self, rec: &MetricRecord) -> Result<()> {
        let line = serde_json::to_string(rec).map_err(|e| Error::Invalid(e.to_string()))?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io("<metrics>", e))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub recon: f64,
    /// Fraction of rows that received a nonzero gradient.
    pub grad_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub psnr: f64,
    pub ssim: f64,
    pub per_view: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: f64,
    pub test_psnr: Option<f64>,
    pub test_ssim: Option<f64>,
    pub rows: usize,
    pub dims: [usize; 3],
    pub wall_time_s: f64,
}

struct Worker {
    grads: GradientBuffer<f32>,
    bg: Option<BgGradients<f32>>,
    trace: RayTrace<f32>,
    ctrace: CompositeTrace<f32>,
    extra: Vec<f32>,
    loss: [f64; 3],
}

impl Worker {
    fn new(rows: usize, bg_texels: Option<usize>) -> Self {
        Self {
            grads: GradientBuffer::new(rows),
            bg: bg_texels.map(BgGradients::new),
            trace: RayTrace::new(),
            ctrace: CompositeTrace::new(),
            extra: Vec::new(),
            loss: [0.0; 3],
        }
    }
}

/// Initial grid: every lattice point occupied with the configured σ and gray.
pub fn initial_grid(dims: [usize; 3], aabb: Aabb<f32>, init: &InitConfig) -> Result<SparseGrid<f32>> {
    let mut row: Row<f32> = [0.0; ROW_LEN];
    row[0] = init.sigma as f32;
    for ch in 0..3 {
        row[1 + ch * SH_BASIS_DIM] = (init.color / SH_C0) as f32;
    }
    SparseGrid::dense(dims, aabb, row)
}

pub fn thread_count(cfg: &TrainConfig) -> usize {
    cfg.threads
        .or_else(|| std::env::var("PLENOXEL_THREADS").ok().and_then(|v| v.parse().ok()))
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Training state. Drive it with [`Trainer::run`] or step by step.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    ds: &'a Dataset,
    rays: Vec<Ray<f32>>,
    grid: SparseGrid<f32>,
    bg: Option<MsiBackground<f32>>,
    optim: OptimState<f32>,
    bg_optim: Option<BgOptimState<f32>>,
    workers: Vec<Worker>,
    sampler: EpochSampler,
    rng: ChaCha8Rng,
    pool: rayon::ThreadPool,
    step: u64,
    rung: usize,
    batch: Vec<u32>,
    offsets: Vec<f32>,
    started: Instant,
    checkpoint: Option<PathBuf>,
    dump: Option<PathBuf>,
    last_loss: f64,
}

impl<'a> Trainer<'a> {
    pub fn new(ds: &'a Dataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let aabb = cfg.grid_aabb().cast();
        let grid = initial_grid(cfg.ladder[0].dims, aabb, &cfg.init)?;
        let bg = match (&cfg.background, ds.scene_type) {
            (Some(b), SceneType::Unbounded360) => Some(MsiBackground::new(
                b.n_layers,
                b.width,
                b.height,
                [b.init_sigma as f32, b.init_color as f32, b.init_color as f32, b.init_color as f32],
            )?),
            _ => None,
        };
        Self::with_grid(ds, cfg, grid, bg)
    }

    /// Starts from an existing grid and background.
    pub fn with_grid(
        ds: &'a Dataset,
        cfg: TrainConfig,
        grid: SparseGrid<f32>,
        bg: Option<MsiBackground<f32>>,
    ) -> Result<Self> {
        cfg.validate()?;
        if ds.scene_type != cfg.scene_type {
            return Err(Error::Config(format!(
                "config is for {:?} scenes but the dataset is {:?}",
                cfg.scene_type, ds.scene_type
            )));
        }
        if ds.train.is_empty() {
            return Err(Error::Invalid("dataset has no training views".into()));
        }
        if cfg.scene_type == SceneType::Unbounded360 && bg.is_none() {
            return Err(Error::Config("unbounded scenes need a background model".into()));
        }
        let rays = ds.train_rays()?;
        let threads = thread_count(&cfg);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
        let (decay, eps) = (cfg.optimizer.decay as f32, cfg.optimizer.eps as f32);
        let optim = OptimState::new(grid.row_count(), decay, eps);
        let bg_optim = bg.as_ref().map(|b| BgOptimState::new(b.texel_count(), decay, eps));
        let workers = (0..threads)
            .map(|_| Worker::new(grid.row_count(), bg.as_ref().map(|b| b.texel_count())))
            .collect();
        let sampler = EpochSampler::new(rays.len(), cfg.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(2);
        Ok(Self {
            cfg,
            ds,
            rays,
            grid,
            bg,
            optim,
            bg_optim,
            workers,
            sampler,
            rng,
            pool,
            step: 0,
            rung: 0,
            batch: Vec::new(),
            offsets: Vec::new(),
            started: Instant::now(),
            checkpoint: None,
            dump: None,
            last_loss: f64::NAN,
        })
    }

    /// Periodic checkpoints are written to `path` (plus an optimizer sidecar).
    pub fn checkpoint_to(mut self, path: impl Into<PathBuf>) -> Self {
        self.checkpoint = Some(path.into());
        self
    }

    /// On a non-finite loss the grid is saved to `path` before aborting.
    pub fn dump_on_failure(mut self, path: impl Into<PathBuf>) -> Self {
        self.dump = Some(path.into());
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &SparseGrid<f32> {
        &self.grid
    }

    pub fn background(&self) -> Option<&MsiBackground<f32>> {
        self.bg.as_ref()
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn train_ray_count(&self) -> usize {
        self.rays.len()
    }

    pub fn into_parts(self) -> (SparseGrid<f32>, Option<MsiBackground<f32>>) {
        (self.grid, self.bg)
    }

    fn render_options(&self) -> RenderOptions<f32> {
        self.cfg.render.options()
    }

    fn record(&self, sink: &mut dyn MetricsSink, kind: &str, loss: Option<f64>, eval: Option<&EvalResult>) -> Result<()> {
        sink.record(&MetricRecord {
            kind: kind.to_string(),
            step: self.step,
            loss,
            psnr: eval.map(|e| e.psnr),
            ssim: eval.map(|e| e.ssim),
            rows: self.grid.row_count(),
            dims: self.grid.dims(),
            wall_time_s: self.started.elapsed().as_secs_f64(),
        })
    }

    /// Runs to `total_steps`, evaluating and checkpointing on the configured cadence.
    pub fn run(&mut self, sink: &mut dyn MetricsSink) -> Result<TrainSummary> {
        self.started = Instant::now();
        while self.step < self.cfg.total_steps {
            if self.rung + 1 < self.cfg.ladder.len() && self.cfg.ladder[self.rung + 1].step == self.step {
                self.rung += 1;
                let dims = self.cfg.ladder[self.rung].dims;
                self.prune_and_resample(dims)?;
                self.record(sink, "rung", None, None)?;
            }
            let stats = self.step()?;
            let log = self.cfg.eval.log_every;
            if log > 0 && self.step % log == 0 {
                self.record(sink, "train", Some(stats.loss), None)?;
            }
            let every = self.cfg.eval.every;
            if every > 0 && self.step % every == 0 && self.step < self.cfg.total_steps && !self.ds.test.is_empty() {
                let ev = self.evaluate()?;
                self.record(sink, "eval", None, Some(&ev))?;
            }
            let ck = self.cfg.checkpoint_every;
            if ck > 0 && self.step % ck == 0 {
                self.save_checkpoint()?;
            }
        }
        let ev = if self.ds.test.is_empty() { None } else { Some(self.evaluate()?) };
        if let Some(e) = &ev {
            self.record(sink, "eval", None, Some(e))?;
        }
        let summary = TrainSummary {
            steps: self.step,
            final_loss: self.last_loss,
            test_psnr: ev.as_ref().map(|e| e.psnr),
            test_ssim: ev.as_ref().map(|e| e.ssim),
            rows: self.grid.row_count(),
            dims: self.grid.dims(),
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        self.record(sink, "summary", Some(self.last_loss), ev.as_ref())?;
        Ok(summary)
    }

    pub fn save_checkpoint(&self) -> Result<()> {
        let Some(path) = &self.checkpoint else { return Ok(()) };
        let ck = OptimCheckpoint {
            step: self.step,
            grid_state: self.optim.clone(),
            bg_moments: self.bg_optim.as_ref().map(|s| s.second_moment.clone()),
        };
        save_checkpoint(&self.grid, self.bg.as_ref(), &ck, path)
    }

    /// One optimization step on the next batch.
    pub fn step(&mut self) -> Result<StepStats> {
        let opts = self.render_options();
        let n_batch = self.cfg.batch_size.min(self.rays.len().max(1));
        self.sampler.next_batch(n_batch, &mut self.batch);
        self.offsets.clear();
        if self.cfg.render.jitter {
            let rng = &mut self.rng;
            self.offsets.extend((0..self.batch.len()).map(|_| rng.gen::<f32>()));
        } else {
            self.offsets.resize(self.batch.len(), 0.0);
        }

        let lw = self.cfg.losses;
        let sparsity = lw.sparsity as f32;
        let beta = lw.beta as f32;
        let inv_b = 1.0 / self.batch.len() as f32;
        let chunk = self.batch.len().div_ceil(self.workers.len());
        let (grid, bg, rays) = (&self.grid, self.bg.as_ref(), &self.rays);
        let (batch, offsets) = (&self.batch, &self.offsets);
        let workers = &mut self.workers;
        self.pool.install(|| {
            workers.par_iter_mut().enumerate().try_for_each(|(wi, w)| -> Result<()> {
                w.loss = [0.0; 3];
                let lo = (wi * chunk).min(batch.len());
                let hi = ((wi + 1) * chunk).min(batch.len());
                for i in lo..hi {
                    let ray = &rays[batch[i] as usize];
                    let off = offsets[i];
                    let (rgb, t_fg) = match bg {
                        Some(bgm) => {
                            let r = trace_ray_with_background(grid, bgm, ray, &opts, off, &mut w.ctrace)?;
                            (r.rgb, r.t_fg)
                        }
                        None => (trace_ray(grid, ray, &opts, off, &mut w.trace).rgb, 1.0),
                    };
                    // Mean over rays of the channel-summed squared error.
                    let mut g = [0f32; 3];
                    for ch in 0..3 {
                        let d = rgb[ch] - ray.rgb[ch];
                        w.loss[0] += (d * d * inv_b) as f64;
                        g[ch] = 2.0 * d * inv_b;
                    }
                    let samples = match bg {
                        Some(_) => &w.ctrace.fg.samples,
                        None => &w.trace.samples,
                    };
                    let extra = if sparsity > 0.0 {
                        w.extra.clear();
                        for s in samples {
                            let (v, gs) = cauchy_term(s.sigma, sparsity);
                            w.loss[1] += v as f64;
                            w.extra.push(gs);
                        }
                        Some(w.extra.as_slice())
                    } else {
                        None
                    };
                    match bg {
                        Some(_) => {
                            let mut up = CompositeUpstream {
                                color: g,
                                residual: 0.0,
                                t_fg: 0.0,
                            };
                            if beta > 0.0 {
                                let (v, gb) = beta_term(t_fg, beta);
                                w.loss[2] += v as f64;
                                up.t_fg = gb;
                            }
                            let bgg = w.bg.as_mut().expect("background workers carry texel gradients");
                            backward_ray_with_background(&w.ctrace, &opts, &up, extra, &mut w.grads, bgg);
                        }
                        None => backward_ray(&w.trace, &opts, &RayUpstream::color(g), extra, &mut w.grads),
                    }
                }
                Ok(())
            })
        })?;

        let (first, rest) = self.workers.split_first_mut().expect("at least one worker");
        let mut recon = first.loss[0];
        let mut reg = first.loss[1] + first.loss[2];
        for w in rest.iter_mut() {
            first.grads.merge(&w.grads);
            w.grads.clear();
            if let (Some(a), Some(b)) = (first.bg.as_mut(), w.bg.as_mut()) {
                a.merge(b);
                b.clear();
            }
            recon += w.loss[0];
            reg += w.loss[1] + w.loss[2];
        }

        let tv_on = self.rung == 0 || lw.tv_after_upsample;
        if tv_on && (lw.tv_sigma > 0.0 || lw.tv_sh > 0.0) {
            let cells = sample_tv_voxels(self.grid.cell_count(), lw.tv_sample_fraction, lw.tv_segment, &mut self.rng);
            let tv = tv_loss(
                &self.grid,
                &cells,
                lw.tv_sigma as f32,
                lw.tv_sh as f32,
                lw.tv_epsilon as f32,
                Some(&mut first.grads),
            );
            reg += tv.weighted(lw.tv_sigma as f32, lw.tv_sh as f32) as f64;
        }
        if let (Some(b), Some(bgm), Some(bgg)) = (&self.cfg.background, self.bg.as_ref(), first.bg.as_mut()) {
            if b.tv_sigma > 0.0 || b.tv_color > 0.0 {
                let texels = sample_tv_voxels(bgm.texel_count(), b.tv_sample_fraction, lw.tv_segment, &mut self.rng);
                let tv = bg_tv_loss(bgm, &texels, b.tv_sigma as f32, b.tv_color as f32, lw.tv_epsilon as f32, Some(bgg));
                reg += tv.weighted(b.tv_sigma as f32, b.tv_color as f32) as f64;
            }
        }

        let loss = recon + reg;
        if !loss.is_finite() {
            let detail = format!(
                "loss {loss} (reconstruction {recon}, regularizers {reg}) with {} rows at dims {:?}",
                self.grid.row_count(),
                self.grid.dims()
            );
            if let Some(p) = &self.dump {
                let _ = save_grid(&self.grid, self.bg.as_ref(), p);
            }
            return Err(Error::NonFinite {
                step: self.step,
                detail,
            });
        }

        let grad_fraction = first.grads.nonzero_fraction();
        let oc = &self.cfg.optimizer;
        optim::step(
            self.grid.rows_mut(),
            &first.grads,
            &mut self.optim,
            oc.lr_sigma.lr_at(self.step) as f32,
            oc.lr_sh.lr_at(self.step) as f32,
            oc.method,
        )?;
        first.grads.clear();
        if let (Some(b), Some(bgm), Some(st), Some(bgg)) =
            (&self.cfg.background, self.bg.as_mut(), self.bg_optim.as_mut(), first.bg.as_mut())
        {
            bg_step(
                bgm,
                bgg,
                st,
                b.lr_sigma.lr_at(self.step) as f32,
                b.lr_color.lr_at(self.step) as f32,
                oc.method,
            )?;
            bgg.clear();
        }
        self.step += 1;
        self.last_loss = loss;
        Ok(StepStats {
            loss,
            recon,
            grad_fraction,
        })
    }

    /// Per-row maximum rendering weight over every training ray.
    pub fn max_weights(&self) -> Vec<f32> {
        let opts = self.render_options();
        let (grid, rays) = (&self.grid, &self.rays);
        let chunk = rays.len().div_ceil(self.workers.len()).max(1);
        let parts: Vec<Vec<f32>> = self.pool.install(|| {
            rays.par_chunks(chunk)
                .map(|rs| {
                    let mut out = vec![0f32; grid.row_count()];
                    let mut tr = RayTrace::new();
                    for r in rs {
                        trace_ray(grid, r, &opts, 0.0, &mut tr);
                        accumulate_max_weights(&tr, &mut out);
                    }
                    out
                })
                .collect()
        });
        let mut out = vec![0f32; grid.row_count()];
        for p in parts {
            for (o, v) in out.iter_mut().zip(p) {
                *o = o.max(v);
            }
        }
        out
    }

    /// Prunes with the configured criterion, then resamples onto `dims`.
    /// Optimizer moments follow the prune and are reset by the resample.
    pub fn prune_and_resample(&mut self, dims: [usize; 3]) -> Result<()> {
        let thr = self.cfg.prune.effective_threshold(dims) as f32;
        self.prune_with(thr)?;
        if dims != self.grid.dims() {
            self.grid = self.grid.upsample(dims)?;
            self.optim.reset(self.grid.row_count());
        }
        self.resize_workers();
        Ok(())
    }

    /// Prunes at an explicit threshold without resampling.
    pub fn prune_with(&mut self, threshold: f32) -> Result<()> {
        let remap = match self.cfg.prune.criterion {
            PruneKind::Weight => {
                let w = self.max_weights();
                self.grid.prune(PruneCriterion::Weight(&w), threshold)?
            }
            PruneKind::Density => self.grid.prune(PruneCriterion::Density, threshold)?,
        };
        self.optim.remap(&remap);
        self.resize_workers();
        Ok(())
    }

    /// Replaces the grid, resetting optimizer moments.
    pub fn replace_grid(&mut self, grid: SparseGrid<f32>) {
        self.grid = grid;
        self.optim.reset(self.grid.row_count());
        self.resize_workers();
    }

    fn resize_workers(&mut self) {
        let rows = self.grid.row_count();
        for w in &mut self.workers {
            if w.grads.len() != rows {
                w.grads.reset(rows);
            }
        }
    }

    /// Renders every held-out view and averages PSNR and SSIM.
    pub fn evaluate(&self) -> Result<EvalResult> {
        let views = self.ds.test.len().min(self.cfg.eval.max_views.unwrap_or(usize::MAX));
        evaluate_views(
            &self.grid,
            self.bg.as_ref(),
            self.ds,
            &self.ds.test[..views],
            &self.render_options(),
            &self.pool,
        )
    }
}

/// Renders all pixels of `rays` in parallel.
pub fn render_rays(
    grid: &SparseGrid<f32>,
    bg: Option<&MsiBackground<f32>>,
    rays: &[Ray<f32>],
    opts: &RenderOptions<f32>,
) -> Result<Vec<[f32; 3]>> {
    rays.par_chunks(1024)
        .map(|rs| {
            let mut tr = RayTrace::new();
            let mut ct = CompositeTrace::new();
            rs.iter()
                .map(|r| match bg {
                    Some(b) => trace_ray_with_background(grid, b, r, opts, 0.0, &mut ct).map(|x| x.rgb),
                    None => Ok(trace_ray(grid, r, opts, 0.0, &mut tr).rgb),
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().flatten().collect())
}

/// Renders one view of a dataset.
pub fn render_view(
    grid: &SparseGrid<f32>,
    bg: Option<&MsiBackground<f32>>,
    ds: &Dataset,
    view: &crate::dataset::View,
    opts: &RenderOptions<f32>,
) -> Result<Image<f32>> {
    let rays = ds.view_rays(view)?;
    let px = render_rays(grid, bg, &rays, opts)?;
    Image::from_data(view.camera.width, view.camera.height, px)
}

pub fn evaluate_views(
    grid: &SparseGrid<f32>,
    bg: Option<&MsiBackground<f32>>,
    ds: &Dataset,
    views: &[crate::dataset::View],
    opts: &RenderOptions<f32>,
    pool: &rayon::ThreadPool,
) -> Result<EvalResult> {
    if views.is_empty() {
        return Err(Error::Invalid("no held-out views to evaluate".into()));
    }
    let mut per_view = Vec::with_capacity(views.len());
    for v in views {
        let img = pool.install(|| render_view(grid, bg, ds, v, opts))?;
        let a = img.cast::<f64>();
        let b = v.image.cast::<f64>();
        let p = psnr(&a, &b)?;
        let s = if a.width >= 11 && a.height >= 11 { ssim(&a, &b)? } else { f64::NAN };
        per_view.push((p, s));
    }
    let n = per_view.len() as f64;
    Ok(EvalResult {
        psnr: per_view.iter().map(|x| x.0).sum::<f64>() / n,
        ssim: per_view.iter().map(|x| x.1).sum::<f64>() / n,
        per_view,
    })
}

/// Output of [`train`].
pub struct TrainOutput {
    pub grid: SparseGrid<f32>,
    pub background: Option<MsiBackground<f32>>,
    pub summary: TrainSummary,
}

/// Trains from scratch and returns the final grid.
pub fn train(ds: &Dataset, cfg: TrainConfig, sink: &mut dyn MetricsSink) -> Result<TrainOutput> {
    let mut t = Trainer::new(ds, cfg)?;
    let summary = t.run(sink)?;
    let (grid, background) = t.into_parts();
    Ok(TrainOutput {
        grid,
        background,
        summary,
    })
}

/// Loads a config file, applying overrides.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TrainConfig::from_toml_with_overrides(&text, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Camera;
    use crate::dataset::View;
    use crate::optim::LrSchedule;
    use crate::render::render_image;
    use std::collections::HashSet;

    #[test]
    fn sampler_covers_each_epoch_once() {
        let n = 103;
        let mut s = EpochSampler::new(n, 9);
        let mut seen = Vec::new();
        let mut b = Vec::new();
        while seen.len() < 3 * n {
            s.next_batch(10, &mut b);
            seen.extend_from_slice(&b);
        }
        for e in 0..3 {
            let set: HashSet<u32> = seen[e * n..(e + 1) * n].iter().copied().collect();
            assert_eq!(set.len(), n);
        }
        assert_ne!(&seen[..n], &seen[n..2 * n]);
    }

    #[test]
    fn published_defaults() {
        let b = default_config(SceneType::Bounded);
        assert_eq!(b.ladder, vec![Rung { step: 0, dims: [256; 3] }, Rung { step: 38_400, dims: [512; 3] }]);
        assert_eq!(b.total_steps, 128_000);
        assert_eq!(b.batch_size, 5000);
        assert_eq!(b.prune.threshold, 0.256);
        assert_eq!(b.prune.criterion, PruneKind::Weight);
        assert_eq!((b.losses.tv_sigma, b.losses.tv_sh), (1e-5, 1e-3));
        assert!(!b.losses.tv_after_upsample);
        assert!((b.optimizer.lr_sigma.lr_at(250_000) - 0.05).abs() < 1e-12);
        assert!((b.optimizer.lr_sh.lr_at(0) - 0.01).abs() < 1e-12);

        let f = default_config(SceneType::ForwardFacingNdc);
        assert_eq!(f.ladder.iter().map(|r| r.dims).collect::<Vec<_>>(), vec![[256, 256, 128], [512, 512, 128], [1408, 1156, 128]]);
        assert_eq!(f.ladder[2].step, 76_800);
        assert_eq!((f.prune.criterion, f.prune.threshold), (PruneKind::Density, 5.0));
        assert_eq!((f.losses.tv_sigma, f.losses.tv_sh, f.losses.sparsity), (5e-4, 5e-3, 1e-12));
        assert!(f.losses.tv_after_upsample);

        let u = default_config(SceneType::Unbounded360);
        assert_eq!(u.ladder.iter().map(|r| (r.step, r.dims[0])).collect::<Vec<_>>(), vec![(0, 128), (25_600, 256), (51_200, 512), (76_800, 640)]);
        assert_eq!(u.total_steps, 102_400);
        assert_eq!(u.prune.threshold, 1.28);
        assert_eq!((u.losses.tv_sigma, u.losses.tv_sh), (5e-5, 5e-3));
        assert_eq!((u.losses.sparsity, u.losses.beta), (1e-11, 1e-5));
        let bg = u.background.unwrap();
        assert_eq!((bg.n_layers, bg.width, bg.height), (64, 2048, 1024));
        assert_eq!((bg.tv_sigma, bg.tv_color), (1e-3, 1e-3));
        assert!(matches!(bg.lr_sigma, LrSchedule::Exponential { .. }));
        for c in [b, f, u] {
            c.validate().unwrap();
        }
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        for st in [SceneType::Bounded, SceneType::ForwardFacingNdc, SceneType::Unbounded360] {
            let c = default_config(st);
            let text = c.to_toml_string().unwrap();
            assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), c);
        }
        let e = TrainConfig::from_toml_str("bogus = 1\n").unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        let e = TrainConfig::from_toml_str("[losses]\ntv_sigmaa = 1.0\n").unwrap_err();
        assert!(e.to_string().contains("tv_sigmaa"), "{e}");
    }

    #[test]
    fn overrides_use_dotted_keys() {
        let c = TrainConfig::from_toml_with_overrides(
            "",
            &["optimizer.method=sgd".into(), "total_steps=40000".into(), "render.jitter=true".into()],
        )
        .unwrap();
        assert_eq!(c.optimizer.method, OptimMethod::Sgd);
        assert_eq!(c.total_steps, 40_000);
        assert!(c.render.jitter);
        assert!(TrainConfig::from_toml_with_overrides("", &["no_equals".into()]).is_err());
        assert!(TrainConfig::from_toml_with_overrides("", &["batch_size=0".into()]).is_err());
    }

    #[test]
    fn effective_weight_threshold_scales_with_resolution() {
        let p = default_config(SceneType::Bounded).prune;
        assert!((p.effective_threshold([512; 3]) - 0.0005).abs() < 1e-15);
        let d = default_config(SceneType::ForwardFacingNdc).prune;
        assert_eq!(d.effective_threshold([512, 512, 128]), 5.0);
    }

    // A tiny scene rendered from a known grid, in memory.
    fn tiny_dataset(views: usize, res: u32) -> (Dataset, SparseGrid<f64>) {
        let aabb = Aabb::cube(1.0);
        let gt = SparseGrid::from_fn([8; 3], aabb, |_, p| {
            let d = p.norm();
            (d < 0.9).then(|| {
                let mut r = [0.0; ROW_LEN];
                r[0] = if d < 0.6 { 20.0 } else { 0.0 };
                r[1] = (0.3 + 0.3 * p.x) / SH_C0;
                r[10] = 0.6 / SH_C0;
                r[19] = (0.5 - 0.2 * p.y) / SH_C0;
                r
            })
        })
        .unwrap();
        let opts = RenderOptions::<f64>::default();
        let mk = |n: usize, off: f64| -> Vec<View> {
            (0..n)
                .map(|i| {
                    let a = off + i as f64 * std::f64::consts::TAU / n as f64;
                    let eye = Vec3::new(3.0 * a.cos(), 3.0 * a.sin(), 1.2);
                    let cam = Camera::look_at(eye, Vec3::zero(), Vec3::new(0.0, 0.0, 1.0), res as f64 * 1.2, res, res).unwrap();
                    let img = render_image(&gt, &cam, &opts, None).unwrap().cast();
                    View {
                        image: img,
                        camera: cam,
                        path: PathBuf::from(format!("{off}-{i}")),
                    }
                })
                .collect()
        };
        let ds = Dataset {
            scene_type: SceneType::Bounded,
            train: mk(views, 0.0),
            test: mk(2, 0.3),
            background: [1.0; 3],
            ndc: None,
            normalization: None,
        };
        (ds, gt)
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            total_steps: 60,
            batch_size: 256,
            aabb: Some([[-1.0; 3], [1.0; 3]]),
            ladder: vec![Rung { step: 0, dims: [8; 3] }],
            losses: LossWeights::default(),
            optimizer: OptimizerConfig {
                lr_sigma: LrSchedule::Constant { lr: 5.0 },
                lr_sh: LrSchedule::Constant { lr: 0.05 },
                ..OptimizerConfig::default()
            },
            eval: EvalConfig {
                log_every: 10,
                ..EvalConfig::default()
            },
            threads: Some(1),
            ..default_config(SceneType::Bounded)
        }
    }

    #[test]
    fn zero_steps_returns_initial_grid() {
        let (ds, _) = tiny_dataset(2, 12);
        let cfg = TrainConfig {
            total_steps: 0,
            ..tiny_config()
        };
        let out = train(&ds, cfg, &mut NullSink).unwrap();
        assert_eq!(out.grid.row_count(), 512);
        for r in out.grid.rows() {
            assert!((r[0] - 0.1).abs() < 1e-7);
            assert!((r[1] * SH_C0 as f32 - 0.1).abs() < 1e-6);
            assert_eq!(r[2], 0.0);
        }
        assert_eq!(out.summary.steps, 0);
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let (ds, _) = tiny_dataset(4, 12);
        let mut log_a: Vec<MetricRecord> = Vec::new();
        let a = train(&ds, tiny_config(), &mut log_a).unwrap();
        let mut log_b: Vec<MetricRecord> = Vec::new();
        let b = train(&ds, tiny_config(), &mut log_b).unwrap();
        let losses = |l: &[MetricRecord]| l.iter().filter(|r| r.kind == "train").map(|r| r.loss.unwrap().to_bits()).collect::<Vec<_>>();
        assert_eq!(losses(&log_a), losses(&log_b));
        assert_eq!(a.grid, b.grid);
        let first = log_a.iter().find(|r| r.kind == "train").unwrap().loss.unwrap();
        assert!(a.summary.final_loss < 0.5 * first, "{first} -> {}", a.summary.final_loss);
        assert!(a.grid.is_finite());
        assert!(log_a.iter().any(|r| r.kind == "summary" && r.psnr.is_some()));
    }

    #[test]
    fn multi_threaded_matches_single_threaded_closely() {
        let (ds, _) = tiny_dataset(3, 12);
        let a = train(&ds, tiny_config(), &mut NullSink).unwrap();
        let b = train(&ds, TrainConfig { threads: Some(3), ..tiny_config() }, &mut NullSink).unwrap();
        let diff = a
            .grid
            .rows()
            .iter()
            .zip(b.grid.rows())
            .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
            .fold(0f32, f32::max);
        assert!(diff < 1e-2, "{diff}");
    }

    #[test]
    fn ladder_prunes_then_upsamples() {
        let (ds, _) = tiny_dataset(4, 12);
        let cfg = TrainConfig {
            total_steps: 40,
            ladder: vec![Rung { step: 0, dims: [8; 3] }, Rung { step: 20, dims: [12; 3] }],
            prune: PruneConfig {
                criterion: PruneKind::Weight,
                threshold: 0.05,
                scale_by_resolution: false,
            },
            ..tiny_config()
        };
        let mut log: Vec<MetricRecord> = Vec::new();
        let out = train(&ds, cfg, &mut log).unwrap();
        assert_eq!(out.grid.dims(), [12; 3]);
        let rung = log.iter().find(|r| r.kind == "rung").unwrap();
        assert_eq!(rung.step, 20);
        assert!(out.grid.row_count() <= 12 * 12 * 12);

        let mut t = Trainer::new(&ds, tiny_config()).unwrap();
        t.prune_with(0.0).unwrap();
        assert_eq!(t.grid().row_count(), 512);
        t.prune_with(2.0).unwrap();
        assert_eq!(t.grid().row_count(), 0);
        assert!(t.step().unwrap().loss.is_finite());
    }

    #[test]
    fn sparsity_and_tv_terms_run() {
        let (ds, _) = tiny_dataset(2, 12);
        let cfg = TrainConfig {
            total_steps: 5,
            losses: LossWeights {
                tv_sigma: 1e-3,
                tv_sh: 1e-2,
                sparsity: 1e-4,
                ..LossWeights::default()
            },
            render: RenderConfig {
                jitter: true,
                ..RenderConfig::default()
            },
            ..tiny_config()
        };
        let mut t = Trainer::new(&ds, cfg).unwrap();
        let s = t.step().unwrap();
        assert!(s.loss > s.recon);
        assert!(s.grad_fraction > 0.0 && s.grad_fraction <= 1.0);
    }

    #[test]
    fn nan_aborts_with_dump() {
        let (ds, _) = tiny_dataset(2, 12);
        let dir = tempfile::tempdir().unwrap();
        let dump = dir.path().join("dump.plnx");
        let mut t = Trainer::new(&ds, tiny_config()).unwrap().dump_on_failure(&dump);
        let mut g = t.grid().clone();
        for r in g.rows_mut() {
            r[1] = f32::INFINITY;
        }
        t.replace_grid(g);
        let e = t.step().unwrap_err();
        assert!(matches!(e, Error::NonFinite { step: 0, .. }), "{e}");
        assert!(dump.exists());
    }

    #[test]
    fn unbounded_scene_trains_with_background() {
        let (mut ds, _) = tiny_dataset(3, 10);
        ds.scene_type = SceneType::Unbounded360;
        let norm = crate::dataset::normalization_from_cameras(ds.train.iter().map(|v| &v.camera), 1.1);
        for v in ds.train.iter_mut().chain(ds.test.iter_mut()) {
            v.camera = norm.apply(&v.camera);
        }
        let cfg = TrainConfig {
            scene_type: SceneType::Unbounded360,
            aabb: None,
            total_steps: 10,
            ladder: vec![Rung { step: 0, dims: [6; 3] }],
            losses: LossWeights {
                beta: 1e-3,
                sparsity: 1e-6,
                ..LossWeights::default()
            },
            background: Some(BackgroundConfig {
                n_layers: 4,
                width: 8,
                height: 4,
                tv_sample_fraction: 0.5,
                ..BackgroundConfig::default()
            }),
            ..tiny_config()
        };
        let mut log: Vec<MetricRecord> = Vec::new();
        let out = train(&ds, cfg, &mut log).unwrap();
        assert!(out.background.unwrap().is_finite());
        assert!(out.summary.final_loss.is_finite());
    }

    #[test]
    fn mismatched_scene_type_is_rejected() {
        let (ds, _) = tiny_dataset(1, 8);
        let cfg = TrainConfig {
            scene_type: SceneType::ForwardFacingNdc,
            ..tiny_config()
        };
        assert!(Trainer::new(&ds, cfg).is_err());
    }
}
