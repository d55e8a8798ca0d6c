//! Calibrated image collections.
//!
//! The primary layout is a directory holding `transforms_train.json` and
//! optionally `transforms_test.json`, each with a horizontal field of view
//! (`camera_angle_x`) or focal length (`fl_x`) and a list of frames with a
//! `file_path` and a row-major 4×4 camera-to-world `transform_matrix`.
//! Cameras look down −z with +y up. Forward-facing captures stored as
//! `poses_bounds.npy` next to an `images/` directory are converted into the
//! same form at load time.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::camera::{generate_ray, to_ndc, Camera, Ray};
use crate::error::{Error, Result};
use crate::io::read_image_over;
use crate::raster::Image;
use crate::vec3::Vec3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneType {
    /// Object inside a known box, white background.
    #[default]
    Bounded,
    /// Forward-facing capture warped to normalized device coordinates.
    ForwardFacingNdc,
    /// Inward-facing capture with an unbounded background.
    Unbounded360,
}

#[derive(Clone, Debug)]
pub struct View {
    pub image: Image<f32>,
    pub camera: Camera<f64>,
    pub path: PathBuf,
}

/// Translation and uniform scale applied to camera positions so the scene
/// of interest sits inside the unit sphere.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneNormalization {
    pub center: Vec3<f64>,
    pub scale: f64,
}

impl SceneNormalization {
    pub fn apply(&self, cam: &Camera<f64>) -> Camera<f64> {
        let mut c = *cam;
        let p = (cam.position() - self.center) * self.scale;
        for (r, v) in p.to_array().into_iter().enumerate() {
            c.c2w[r][3] = v;
        }
        c
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub scene_type: SceneType,
    pub train: Vec<View>,
    pub test: Vec<View>,
    /// Color that transparent pixels were composited over.
    pub background: [f32; 3],
    /// Intrinsics and near plane defining the NDC warp.
    pub ndc: Option<Camera<f64>>,
    pub normalization: Option<SceneNormalization>,
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// Integer box-filter reduction applied to every image.
    pub downscale: u32,
    pub background: [f32; 3],
    /// Multiplier on the largest camera distance when normalizing unbounded scenes.
    pub scene_margin: f64,
    /// Keep at most this many views per split.
    pub max_views: Option<usize>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            downscale: 1,
            background: [1.0; 3],
            scene_margin: 1.1,
            max_views: None,
        }
    }
}

/// Camera metadata from one split file, without pixels.
#[derive(Clone, Debug)]
pub struct SplitMeta {
    pub frames: Vec<(PathBuf, Camera<f64>)>,
    pub near: f64,
    pub far: f64,
}

fn field<'a>(v: &'a Value, file: &Path, name: &str) -> Result<&'a Value> {
    v.get(name)
        .ok_or_else(|| Error::parse(file, name, "missing"))
}

fn number(v: &Value, file: &Path, name: &str) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::parse(file, name, format!("expected a number, found {v}")))
}

fn parse_matrix(v: &Value, file: &Path, name: &str) -> Result<[[f64; 4]; 4]> {
    let rows = v
        .as_array()
        .filter(|r| r.len() == 4)
        .ok_or_else(|| Error::parse(file, name, "expected 4 rows"))?;
    let mut m = [[0.0; 4]; 4];
    for (i, row) in rows.iter().enumerate() {
        let cols = row
            .as_array()
            .filter(|c| c.len() == 4)
            .ok_or_else(|| Error::parse(file, name, format!("row {i} must have 4 entries")))?;
        for (j, x) in cols.iter().enumerate() {
            m[i][j] = number(x, file, name)?;
        }
    }
    Ok(m)
}

/// Reads camera poses from a split file. `size` supplies the image size
/// when the file has no `w`/`h` keys.
pub fn read_split_meta(json: &Path, size: Option<(u32, u32)>) -> Result<SplitMeta> {
    let text = fs::read_to_string(json).map_err(|e| Error::io(json, e))?;
    let root: Value = serde_json::from_str(&text).map_err(|e| Error::parse(json, "<document>", e.to_string()))?;
    let dir = json.parent().unwrap_or(Path::new("."));
    let frames = field(&root, json, "frames")?
        .as_array()
        .ok_or_else(|| Error::parse(json, "frames", "expected an array"))?;

    let (w, h) = match (root.get("w"), root.get("h")) {
        (Some(w), Some(h)) => (number(w, json, "w")? as u32, number(h, json, "h")? as u32),
        _ => size.ok_or_else(|| Error::parse(json, "w", "image size unknown"))?,
    };
    let focal = match root.get("fl_x") {
        Some(f) => number(f, json, "fl_x")?,
        None => {
            let fov = number(field(&root, json, "camera_angle_x")?, json, "camera_angle_x")?;
            Camera::focal_from_fov(w, fov)
        }
    };
    let near = root.get("near").map(|v| number(v, json, "near")).transpose()?.unwrap_or(1.0);
    let far = root.get("far").map(|v| number(v, json, "far")).transpose()?.unwrap_or(1e3);

    let mut out = Vec::with_capacity(frames.len());
    for (i, fr) in frames.iter().enumerate() {
        let name = format!("frames[{i}].file_path");
        let rel = fr
            .get("file_path")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::parse(json, &name, "missing or not a string"))?;
        let mut path = dir.join(rel);
        if path.extension().is_none() {
            path.set_extension("png");
        }
        let tname = format!("frames[{i}].transform_matrix");
        let m = parse_matrix(
            fr.get("transform_matrix").ok_or_else(|| Error::parse(json, &tname, "missing"))?,
            json,
            &tname,
        )?;
        let cam = Camera::new(m, focal, w, h, near, far)
            .map_err(|e| Error::parse(json, &tname, e.to_string()))?;
        out.push((path, cam));
    }
    Ok(SplitMeta { frames: out, near, far })
}

/// Integer box-filter downscale.
pub fn downscale(img: &Image<f32>, k: u32) -> Image<f32> {
    if k <= 1 {
        return img.clone();
    }
    let (w, h) = (img.width / k, img.height / k);
    let mut out = Image::new(w, h);
    let inv = 1.0 / (k * k) as f32;
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f32; 3];
            for dy in 0..k {
                for dx in 0..k {
                    let p = img.get(x * k + dx, y * k + dy);
                    for ch in 0..3 {
                        acc[ch] += p[ch];
                    }
                }
            }
            out.set(x, y, acc.map(|v| v * inv));
        }
    }
    out
}

fn scaled_camera(cam: &Camera<f64>, k: u32, w: u32, h: u32) -> Camera<f64> {
    Camera {
        focal: cam.focal / k.max(1) as f64,
        width: w,
        height: h,
        ..*cam
    }
}

fn load_split(json: &Path, opts: &LoadOptions) -> Result<Vec<View>> {
    // Image size comes from the first image when the split omits it.
    let first_size = match read_split_meta(json, Some((1, 1))) {
        Ok(m) => match m.frames.first() {
            Some((p, _)) => {
                let img = read_image_over(p, opts.background)?;
                Some((img.width, img.height))
            }
            None => None,
        },
        Err(_) => None,
    };
    let meta = read_split_meta(json, first_size)?;
    if meta.frames.is_empty() {
        return Err(Error::parse(json, "frames", "no frames listed"));
    }
    let take = opts.max_views.unwrap_or(usize::MAX);
    let mut views = Vec::new();
    let mut size = None;
    for (path, cam) in meta.frames.into_iter().take(take) {
        let raw = read_image_over(&path, opts.background)?;
        if (raw.width, raw.height) != (cam.width, cam.height) {
            return Err(Error::Invalid(format!(
                "{}: image is {}x{}, camera metadata says {}x{}",
                path.display(),
                raw.width,
                raw.height,
                cam.width,
                cam.height
            )));
        }
        let image = downscale(&raw, opts.downscale);
        if let Some(s) = size {
            if s != (image.width, image.height) {
                return Err(Error::Invalid(format!("{}: image size differs from the rest of the split", path.display())));
            }
        }
        size = Some((image.width, image.height));
        let camera = scaled_camera(&cam, opts.downscale, image.width, image.height);
        views.push(View { image, camera, path });
    }
    Ok(views)
}

/// Center on the mean camera position and scale the farthest camera to
/// `1 / margin`.
pub fn normalization_from_cameras<'a>(cams: impl IntoIterator<Item = &'a Camera<f64>>, margin: f64) -> SceneNormalization {
    let pos: Vec<Vec3<f64>> = cams.into_iter().map(Camera::position).collect();
    let n = pos.len().max(1) as f64;
    let center = pos.iter().fold(Vec3::zero(), |a, &p| a + p) * (1.0 / n);
    let radius = pos.iter().map(|&p| (p - center).norm()).fold(0.0, f64::max);
    let scale = if radius > 0.0 { 1.0 / (radius * margin) } else { 1.0 };
    SceneNormalization { center, scale }
}

fn check_disjoint(train: &[View], test: &[View]) -> Result<()> {
    for t in test {
        if train.iter().any(|v| v.path == t.path) {
            return Err(Error::Invalid(format!("{} appears in both train and test splits", t.path.display())));
        }
    }
    Ok(())
}

fn finish(mut ds: Dataset, opts: &LoadOptions, near: f64) -> Result<Dataset> {
    check_disjoint(&ds.train, &ds.test)?;
    match ds.scene_type {
        SceneType::Bounded => {}
        SceneType::ForwardFacingNdc => {
            if ds.ndc.is_none() {
                let c = &ds.train[0].camera;
                ds.ndc = Some(Camera { near, ..*c });
            }
        }
        SceneType::Unbounded360 => {
            let norm = normalization_from_cameras(ds.train.iter().map(|v| &v.camera), opts.scene_margin);
            for v in ds.train.iter_mut().chain(ds.test.iter_mut()) {
                v.camera = norm.apply(&v.camera);
            }
            ds.normalization = Some(norm);
        }
    }
    Ok(ds)
}

/// Loads a dataset directory in either supported layout.
pub fn load_dataset(dir: &Path, scene_type: SceneType, opts: &LoadOptions) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found")));
    }
    if dir.join("transforms_train.json").exists() {
        load_nerf_dataset(dir, scene_type, opts)
    } else if dir.join("poses_bounds.npy").exists() {
        load_llff(dir, scene_type, opts)
    } else {
        Err(Error::Invalid(format!(
            "{}: neither transforms_train.json nor poses_bounds.npy found",
            dir.display()
        )))
    }
}

/// Loads `transforms_{train,test}.json` and their images.
pub fn load_nerf_dataset(dir: &Path, scene_type: SceneType, opts: &LoadOptions) -> Result<Dataset> {
    let train_json = dir.join("transforms_train.json");
    let train = load_split(&train_json, opts)?;
    let test_json = dir.join("transforms_test.json");
    let test = if test_json.exists() { load_split(&test_json, opts)? } else { Vec::new() };
    let near = read_split_meta(&train_json, Some((1, 1))).map(|m| m.near).unwrap_or(1.0);
    finish(
        Dataset {
            scene_type,
            train,
            test,
            background: opts.background,
            ndc: None,
            normalization: None,
        },
        opts,
        near,
    )
}

/// Parses a little-endian `float64` C-order `.npy` matrix.
pub fn read_npy_f64(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::parse(path, "npy header", m.to_string());
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err(bad("missing magic"));
    }
    let (hlen, start) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => (u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize, 12),
        v => return Err(bad(&format!("unsupported version {v}"))),
    };
    let header = std::str::from_utf8(bytes.get(start..start + hlen).ok_or_else(|| bad("truncated"))?)
        .map_err(|_| bad("not utf-8"))?;
    if !header.contains("'descr': '<f8'") {
        return Err(bad("only little-endian float64 is supported"));
    }
    if header.contains("'fortran_order': True") {
        return Err(bad("fortran order is not supported"));
    }
    let open = header.find("'shape': (").ok_or_else(|| bad("no shape"))? + "'shape': (".len();
    let close = header[open..].find(')').ok_or_else(|| bad("no shape"))? + open;
    let shape: Vec<usize> = header[open..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad("bad shape")))
        .collect::<Result<_>>()?;
    let count: usize = shape.iter().product();
    let data = &bytes[start + hlen..];
    if data.len() != count * 8 {
        return Err(bad(&format!("expected {count} values, found {} bytes", data.len())));
    }
    let vals = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((shape, vals))
}

/// Forward-facing capture: `poses_bounds.npy` rows hold a 3×5 matrix
/// `[R | t | (h, w, f)]` with rotation columns (down, right, back) followed
/// by near/far depth bounds. Poses are rescaled so the nearest bound sits
/// at 4/3, recentered on their average, and every eighth view is held out.
pub fn load_llff(dir: &Path, scene_type: SceneType, opts: &LoadOptions) -> Result<Dataset> {
    let npy = dir.join("poses_bounds.npy");
    let (shape, vals) = read_npy_f64(&npy)?;
    if shape.len() != 2 || shape[1] != 17 || shape[0] == 0 {
        return Err(Error::parse(&npy, "shape", format!("expected (N, 17), found {shape:?}")));
    }
    let n = shape[0];
    let img_dir = dir.join("images");
    let mut files: Vec<PathBuf> = fs::read_dir(&img_dir)
        .map_err(|e| Error::io(&img_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    if files.len() != n {
        return Err(Error::Invalid(format!(
            "{}: {} images for {n} poses",
            img_dir.display(),
            files.len()
        )));
    }
    let min_bound = (0..n).map(|i| vals[i * 17 + 15]).fold(f64::INFINITY, f64::min);
    if !(min_bound > 0.0) {
        return Err(Error::parse(&npy, "bounds", "near bounds must be positive"));
    }
    let sc = 1.0 / (min_bound * 0.75);
    let mut poses = Vec::with_capacity(n);
    for i in 0..n {
        let r = &vals[i * 17..i * 17 + 15];
        let at = |row: usize, col: usize| r[row * 5 + col];
        let right = Vec3::new(at(0, 1), at(1, 1), at(2, 1));
        let up = Vec3::new(-at(0, 0), -at(1, 0), -at(2, 0));
        let back = Vec3::new(at(0, 2), at(1, 2), at(2, 2));
        let t = Vec3::new(at(0, 3), at(1, 3), at(2, 3)) * sc;
        poses.push(([right, up, back, t], at(0, 4), at(1, 4), at(2, 4)));
    }
    // Average pose becomes the world frame.
    let inv_n = 1.0 / n as f64;
    let center = poses.iter().fold(Vec3::zero(), |a, p| a + p.0[3]) * inv_n;
    let z = poses.iter().fold(Vec3::zero(), |a, p| a + p.0[2]).normalized();
    let upm = poses.iter().fold(Vec3::zero(), |a, p| a + p.0[1]);
    let x = upm.cross(z).normalized();
    let y = z.cross(x);
    let to_local = |v: Vec3<f64>| Vec3::new(v.dot(x), v.dot(y), v.dot(z));

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, (p, _, w, f)) in poses.into_iter().enumerate() {
        let [cr, cu, cb, t] = p;
        let (cr, cu, cb, t) = (to_local(cr), to_local(cu), to_local(cb), to_local(t - center));
        let m = [
            [cr.x, cu.x, cb.x, t.x],
            [cr.y, cu.y, cb.y, t.y],
            [cr.z, cu.z, cb.z, t.z],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let raw = read_image_over(&files[i], opts.background)?;
        // Images may already be reduced relative to the stored intrinsics.
        let f = f * raw.width as f64 / w;
        let cam = Camera::new(m, f, raw.width, raw.height, 1.0, 1e3)
            .map_err(|e| Error::parse(&npy, format!("pose {i}"), e.to_string()))?;
        let image = downscale(&raw, opts.downscale);
        let camera = scaled_camera(&cam, opts.downscale, image.width, image.height);
        let view = View {
            image,
            camera,
            path: files[i].clone(),
        };
        if i % 8 == 0 {
            test.push(view);
        } else {
            train.push(view);
        }
    }
    if train.is_empty() {
        return Err(Error::Invalid(format!("{}: no training views", dir.display())));
    }
    let take = opts.max_views.unwrap_or(usize::MAX);
    train.truncate(take);
    test.truncate(take);
    // NDC is defined in the average-pose frame.
    let ref_cam = Camera {
        c2w: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]],
        near: 1.0,
        ..train[0].camera
    };
    finish(
        Dataset {
            scene_type,
            train,
            test,
            background: opts.background,
            ndc: (scene_type == SceneType::ForwardFacingNdc).then_some(ref_cam),
            normalization: None,
        },
        opts,
        1.0,
    )
}

impl Dataset {
    /// Every pixel ray of `view`, carrying its ground-truth color.
    pub fn view_rays(&self, view: &View) -> Result<Vec<Ray<f32>>> {
        camera_rays(&view.camera, self.ndc.as_ref(), Some(&view.image))
    }

    pub fn train_rays(&self) -> Result<Vec<Ray<f32>>> {
        let mut out = Vec::with_capacity(self.train.iter().map(|v| v.image.data.len()).sum());
        for v in &self.train {
            out.extend(self.view_rays(v)?);
        }
        Ok(out)
    }
}

/// Rays for all pixels of `cam`, row by row, in single precision.
pub fn camera_rays(cam: &Camera<f64>, ndc: Option<&Camera<f64>>, truth: Option<&Image<f32>>) -> Result<Vec<Ray<f32>>> {
    let mut out = Vec::with_capacity(cam.pixel_count());
    for y in 0..cam.height {
        for x in 0..cam.width {
            let mut r = generate_ray(cam, x, y)?;
            if let Some(n) = ndc {
                r = to_ndc(&r, n)?;
            }
            let mut r = r.cast::<f32>();
            if let Some(img) = truth {
                r.rgb = img.get(x, y);
            }
            out.push(r);
        }
    }
    Ok(out)
}

/// One frame entry for [`write_split`].
#[derive(Clone, Debug, Serialize)]
pub struct FrameOut {
    pub file_path: String,
    pub transform_matrix: [[f64; 4]; 4],
}

/// Writes a split file in the layout read by [`read_split_meta`].
pub fn write_split(path: &Path, camera_angle_x: f64, width: u32, height: u32, frames: &[FrameOut]) -> Result<()> {
    let doc = serde_json::json!({
        "camera_angle_x": camera_angle_x,
        "w": width,
        "h": height,
        "frames": frames,
    });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Invalid(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
