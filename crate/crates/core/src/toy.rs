//! Procedural test scene whose images are exactly reproducible by a grid.
//!
//! The ground truth is itself a [`SparseGrid`]: a few soft-edged spheres with
//! smoothly varying diffuse colors and a small first-order view-dependent
//! term. Views are rendered from that grid, so a grid of the same
//! resolution can match them up to 8-bit quantization.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::Camera;
use crate::dataset::{write_split, FrameOut, SceneType};
use crate::error::{Error, Result};
use crate::grid::{Aabb, InterpMode, Row, SparseGrid, ROW_LEN};
use crate::io::{save_grid, write_image};
use crate::render::{render_image, Formula, RenderOptions};
use crate::optim::LrSchedule;
use crate::sh::{SH_BASIS_DIM, SH_C0};
use crate::trainer::{default_config, EvalConfig, OptimizerConfig, Rung, TrainConfig};
use crate::vec3::Vec3;

/// File name of the baked ground-truth grid inside a toy dataset.
pub const GROUND_TRUTH_FILE: &str = "ground_truth.plnx";

#[derive(Clone, Debug)]
pub struct ToySpec {
    pub train_views: usize,
    pub test_views: usize,
    pub resolution: u32,
    pub grid_dim: usize,
    pub seed: u64,
    /// Horizontal field of view in radians.
    pub camera_angle_x: f64,
    /// Distance of every camera from the origin.
    pub camera_distance: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            train_views: 25,
            test_views: 8,
            resolution: 128,
            grid_dim: 64,
            seed: 7,
            camera_angle_x: 0.8,
            camera_distance: 3.2,
        }
    }
}

struct Sphere {
    center: [f64; 3],
    radius: f64,
    color: [f64; 3],
    /// Coefficient on the z-aligned first-order harmonic, per channel.
    gloss: f64,
}

const SPHERES: [Sphere; 4] = [
    Sphere { center: [-0.38, -0.22, -0.28], radius: 0.36, color: [0.85, 0.25, 0.2], gloss: 0.0 },
    Sphere { center: [0.36, 0.12, -0.3], radius: 0.3, color: [0.2, 0.7, 0.3], gloss: 0.12 },
    Sphere { center: [0.02, 0.3, 0.32], radius: 0.3, color: [0.25, 0.35, 0.9], gloss: 0.2 },
    Sphere { center: [-0.12, -0.5, 0.3], radius: 0.22, color: [0.9, 0.8, 0.2], gloss: 0.08 },
];

/// Peak opacity inside a sphere, per unit length.
const TOY_SIGMA: f64 = 60.0;
/// Width of the opacity ramp at each sphere's surface.
const SHELL: f64 = 0.08;

pub fn toy_aabb() -> Aabb<f64> {
    Aabb::cube(1.0)
}

/// Rendering settings used for the toy images.
pub fn toy_render_options() -> RenderOptions<f64> {
    RenderOptions {
        step_frac: 0.5,
        stop_threshold: 1e-4,
        mode: InterpMode::Trilinear,
        formula: Formula::Max,
        background: [1.0; 3],
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Ground-truth grid at `dim`³ over `[-1, 1]³`.
pub fn toy_ground_truth(dim: usize) -> Result<SparseGrid<f64>> {
    let edge = 2.0 / (dim as f64 - 1.0);
    SparseGrid::from_fn([dim; 3], toy_aabb(), |_, p| {
        // Nearest sphere by signed distance owns the cell's color.
        let (s, d) = SPHERES
            .iter()
            .map(|s| {
                let c = Vec3::from_array(s.center);
                (s, (p - c).norm() - s.radius)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))?;
        if d > 2.0 * edge {
            return None;
        }
        let sigma = TOY_SIGMA * smoothstep(-d / SHELL + 0.5);
        let mut row: Row<f64> = [0.0; ROW_LEN];
        row[0] = sigma;
        let shade = 0.85 + 0.15 * (2.5 * p.x).sin() * (2.0 * p.y).cos();
        for ch in 0..3 {
            let base = 1 + ch * SH_BASIS_DIM;
            row[base] = s.color[ch] * shade / SH_C0;
            row[base + 2] = s.gloss;
        }
        Some(row)
    })
}

/// Training settings sized for the toy scene: one 64³ rung, 5000 steps of
/// 1024 rays, schedules compressed to the shorter run.
pub fn toy_config() -> TrainConfig {
    let mut cfg = default_config(SceneType::Bounded);
    cfg.total_steps = 5000;
    cfg.batch_size = 1024;
    cfg.aabb = Some([[-1.0; 3], [1.0; 3]]);
    cfg.ladder = vec![Rung { step: 0, dims: [64; 3] }];
    cfg.optimizer = OptimizerConfig {
        lr_sigma: LrSchedule::DelayedExponential {
            lr_init: 1.0,
            lr_final: 0.05,
            total_steps: 5000,
            delay_steps: 250,
            delay_mult: 0.01,
        },
        lr_sh: LrSchedule::Exponential {
            lr_init: 0.01,
            lr_final: 1e-4,
            total_steps: 5000,
        },
        ..OptimizerConfig::default()
    };
    cfg.eval = EvalConfig {
        every: 1000,
        max_views: None,
        log_every: 100,
    };
    cfg
}

/// Cameras on the upper hemisphere looking at the origin.
pub fn toy_cameras(n: usize, spec: &ToySpec, seed: u64) -> Result<Vec<Camera<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let focal = Camera::focal_from_fov(spec.resolution, spec.camera_angle_x);
    (0..n)
        .map(|i| {
            // Stratified azimuth keeps coverage even for few views.
            let az = (i as f64 + rng.gen_range(0.0..1.0)) / n as f64 * std::f64::consts::TAU;
            let el = rng.gen_range(0.15..1.3f64);
            let eye = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * spec.camera_distance;
            Camera::look_at(eye, Vec3::zero(), Vec3::new(0.0, 0.0, 1.0), focal, spec.resolution, spec.resolution)
        })
        .collect()
}

/// Writes a NeRF-layout dataset plus the baked ground-truth grid into `dir`.
pub fn make_toy(dir: &Path, spec: &ToySpec) -> Result<()> {
    if spec.train_views == 0 || spec.resolution == 0 || spec.grid_dim < 2 {
        return Err(Error::Invalid("toy scene needs at least one view, a positive resolution and grid size".into()));
    }
    let gt = toy_ground_truth(spec.grid_dim)?;
    let opts = toy_render_options();
    for (split, n, seed) in [
        ("train", spec.train_views, spec.seed),
        ("test", spec.test_views, spec.seed.wrapping_add(1_000_003)),
    ] {
        let sub = dir.join(split);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let cams = toy_cameras(n, spec, seed)?;
        let mut frames = Vec::with_capacity(n);
        for (i, cam) in cams.iter().enumerate() {
            let img = render_image(&gt, cam, &opts, None)?;
            let name = format!("r_{i}");
            write_image(&img, sub.join(format!("{name}.png")))?;
            frames.push(FrameOut {
                file_path: format!("./{split}/{name}"),
                transform_matrix: cam.c2w,
            });
        }
        write_split(
            &dir.join(format!("transforms_{split}.json")),
            spec.camera_angle_x,
            spec.resolution,
            spec.resolution,
            &frames,
        )?;
    }
    save_grid(&gt, None, dir.join(GROUND_TRUTH_FILE))
}
