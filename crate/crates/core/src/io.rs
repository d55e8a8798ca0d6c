//! On-disk formats: grid files, optimizer checkpoints, PNG images and the
//! viewer export manifest.
//!
//! Grid file layout, all little-endian:
//!
//! | field | encoding |
//! |---|---|
//! | magic | `b"PLNX"` |
//! | version | u32 = 1 |
//! | dims | 3 × u32 |
//! | AABB | min xyz, max xyz as 6 × f64 |
//! | SH degree | u8 = 2 |
//! | row count | u64 |
//! | index lattice | i32 per cell, x fastest, −1 for empty |
//! | rows | 28 × f32 per row (σ then 27 SH coefficients, channel-major) |
//! | background flag | u8 (0 or 1) |
//! | background | n_layers u16, width u32, height u32, radii f64 × n_layers, texels 4 × f32 |
//! | CRC32 | u32 over every preceding byte |

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::grid::{Aabb, SparseGrid, EMPTY, ROW_LEN};
use crate::msi::MsiBackground;
use crate::optim::OptimState;
use crate::raster::Image;
use crate::scalar::Scalar;
use crate::vec3::Vec3;

pub const GRID_MAGIC: [u8; 4] = *b"PLNX";
pub const GRID_VERSION: u32 = 1;
pub const OPTIM_MAGIC: [u8; 4] = *b"PLNO";
pub const OPTIM_VERSION: u32 = 1;
pub const SH_DEGREE: u8 = 2;

/// Bytes before the index lattice.
pub const HEADER_LEN: usize = 4 + 4 + 12 + 48 + 1 + 8;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: [u8; 4], version: u32) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(&magic);
        w.u32(version);
        w
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated { what })?;
        if end > self.buf.len() {
            return Err(FormatError::Truncated { what });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn arr<const N: usize>(&mut self, what: &'static str) -> std::result::Result<[u8; N], FormatError> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
    fn u8(&mut self, what: &'static str) -> std::result::Result<u8, FormatError> {
        Ok(self.arr::<1>(what)?[0])
    }
    fn u16(&mut self, what: &'static str) -> std::result::Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.arr(what)?))
    }
    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.arr(what)?))
    }
    fn u64(&mut self, what: &'static str) -> std::result::Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.arr(what)?))
    }
    fn f64(&mut self, what: &'static str) -> std::result::Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.arr(what)?))
    }
    /// `count` items of `size` bytes, checked against the remaining length
    /// before anything is allocated.
    fn block(&mut self, count: u64, size: usize, what: &'static str) -> std::result::Result<&'a [u8], FormatError> {
        let n = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(size))
            .ok_or(FormatError::Truncated { what })?;
        self.take(n, what)
    }
}

fn check_magic_and_crc(bytes: &[u8], magic: [u8; 4], version: u32) -> std::result::Result<(), FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated { what: "magic" });
    }
    if bytes[..4] != magic {
        return Err(FormatError::BadMagic {
            found: bytes[..4].try_into().expect("4 bytes"),
            expected: magic,
        });
    }
    if bytes.len() < 8 {
        return Err(FormatError::Truncated { what: "version" });
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if found != version {
        return Err(FormatError::Version { found, expected: version });
    }
    if bytes.len() < 12 {
        return Err(FormatError::Truncated { what: "checksum" });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }
    Ok(())
}

/// Serializes a grid and optional background. Values are stored as `f32`.
pub fn grid_to_bytes<T: Scalar>(grid: &SparseGrid<T>, bg: Option<&MsiBackground<T>>) -> Result<Vec<u8>> {
    let dims = grid.dims();
    let mut w = Writer::new(GRID_MAGIC, GRID_VERSION);
    for d in dims {
        w.u32(u32::try_from(d).map_err(|_| Error::Invalid(format!("dimension {d} exceeds u32")))?);
    }
    let aabb = grid.aabb();
    for v in aabb.min.to_array().into_iter().chain(aabb.max.to_array()) {
        w.f64(v.as_f64());
    }
    w.u8(SH_DEGREE);
    w.u64(grid.row_count() as u64);
    w.buf.reserve(grid.cell_count() * 4 + grid.row_count() * ROW_LEN * 4);
    for &i in grid.index() {
        w.i32(i);
    }
    for row in grid.rows() {
        for &v in row {
            w.f32(v.as_f32());
        }
    }
    match bg {
        None => w.u8(0),
        Some(bg) => {
            w.u8(1);
            w.u16(bg.n_layers() as u16);
            w.u32(bg.width() as u32);
            w.u32(bg.height() as u32);
            for &r in bg.radii() {
                w.f64(r.as_f64());
            }
            for t in bg.data() {
                for &v in t {
                    w.f32(v.as_f32());
                }
            }
        }
    }
    Ok(w.finish())
}

/// Parses a grid file.
pub fn grid_from_bytes(bytes: &[u8]) -> Result<(SparseGrid<f32>, Option<MsiBackground<f32>>)> {
    check_magic_and_crc(bytes, GRID_MAGIC, GRID_VERSION)?;
    let body = &bytes[..bytes.len() - 4];
    let mut r = Reader { buf: body, pos: 8 };
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = r.u32("dims")? as usize;
    }
    let mut corners = [0f64; 6];
    for c in &mut corners {
        *c = r.f64("aabb")?;
    }
    let degree = r.u8("sh degree")?;
    if degree != SH_DEGREE {
        return Err(FormatError::ShDegree(degree).into());
    }
    let rows = r.u64("row count")?;
    let cells = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
        .ok_or_else(|| FormatError::Corrupt("lattice size overflows".into()))?;
    let index_bytes = r.block(cells, 4, "index lattice")?;
    let row_bytes = r.block(rows, ROW_LEN * 4, "data table")?;
    let index: Vec<i32> = index_bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let table: Vec<[f32; ROW_LEN]> = row_bytes
        .chunks_exact(ROW_LEN * 4)
        .map(|row| std::array::from_fn(|k| f32::from_le_bytes(row[k * 4..k * 4 + 4].try_into().expect("4 bytes"))))
        .collect();
    if index.iter().any(|&i| i != EMPTY && (i < 0 || i as u64 >= rows)) {
        return Err(FormatError::Corrupt("index entry outside the data table".into()).into());
    }
    let aabb = Aabb::new(
        Vec3::new(corners[0] as f32, corners[1] as f32, corners[2] as f32),
        Vec3::new(corners[3] as f32, corners[4] as f32, corners[5] as f32),
    );
    let grid = SparseGrid::from_parts(dims, aabb, index, table)
        .map_err(|e| FormatError::Corrupt(e.to_string()))?;

    let bg = match r.u8("background flag")? {
        0 => None,
        1 => {
            let n = r.u16("background layers")? as usize;
            let width = r.u32("background width")? as usize;
            let height = r.u32("background height")? as usize;
            let mut radii = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                radii.push(r.f64("background radii")? as f32);
            }
            let texels = (n as u64) * (width as u64) * (height as u64);
            let raw = r.block(texels, 16, "background texels")?;
            let data = raw
                .chunks_exact(16)
                .map(|t| std::array::from_fn(|k| f32::from_le_bytes(t[k * 4..k * 4 + 4].try_into().expect("4 bytes"))))
                .collect();
            Some(
                MsiBackground::from_parts(n, width, height, radii, data)
                    .map_err(|e| FormatError::Corrupt(e.to_string()))?,
            )
        }
        f => return Err(FormatError::Corrupt(format!("background flag {f}")).into()),
    };
    if r.pos != body.len() {
        return Err(FormatError::Corrupt(format!("{} trailing bytes", body.len() - r.pos)).into());
    }
    Ok((grid, bg))
}

pub fn save_grid<T: Scalar>(grid: &SparseGrid<T>, bg: Option<&MsiBackground<T>>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = grid_to_bytes(grid, bg)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<(SparseGrid<f32>, Option<MsiBackground<f32>>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    grid_from_bytes(&bytes).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format(f) => Error::Invalid(format!("{}: {f}", path.display())),
        other => other,
    }
}

/// Optimizer state saved next to a grid checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimCheckpoint {
    pub step: u64,
    pub grid_state: OptimState<f32>,
    pub bg_moments: Option<Vec<[f32; 4]>>,
}

pub fn optim_to_bytes(ck: &OptimCheckpoint) -> Vec<u8> {
    let mut w = Writer::new(OPTIM_MAGIC, OPTIM_VERSION);
    w.u64(ck.step);
    w.f64(ck.grid_state.decay as f64);
    w.f64(ck.grid_state.eps as f64);
    w.u64(ck.grid_state.step);
    w.u64(ck.grid_state.second_moment.len() as u64);
    for row in &ck.grid_state.second_moment {
        for &v in row {
            w.f32(v);
        }
    }
    match &ck.bg_moments {
        None => w.u8(0),
        Some(m) => {
            w.u8(1);
            w.u64(m.len() as u64);
            for t in m {
                for &v in t {
                    w.f32(v);
                }
            }
        }
    }
    w.finish()
}

pub fn optim_from_bytes(bytes: &[u8]) -> Result<OptimCheckpoint> {
    check_magic_and_crc(bytes, OPTIM_MAGIC, OPTIM_VERSION)?;
    let body = &bytes[..bytes.len() - 4];
    let mut r = Reader { buf: body, pos: 8 };
    let step = r.u64("step")?;
    let decay = r.f64("decay")? as f32;
    let eps = r.f64("eps")? as f32;
    let inner_step = r.u64("optimizer step")?;
    let rows = r.u64("moment rows")?;
    let raw = r.block(rows, ROW_LEN * 4, "second moments")?;
    let mut state = OptimState::new(0, decay, eps);
    state.step = inner_step;
    state.second_moment = raw
        .chunks_exact(ROW_LEN * 4)
        .map(|row| std::array::from_fn(|k| f32::from_le_bytes(row[k * 4..k * 4 + 4].try_into().expect("4 bytes"))))
        .collect();
    let bg_moments = match r.u8("background flag")? {
        0 => None,
        1 => {
            let n = r.u64("background moments")?;
            let raw = r.block(n, 16, "background moments")?;
            Some(
                raw.chunks_exact(16)
                    .map(|t| std::array::from_fn(|k| f32::from_le_bytes(t[k * 4..k * 4 + 4].try_into().expect("4 bytes"))))
                    .collect(),
            )
        }
        f => return Err(FormatError::Corrupt(format!("background flag {f}")).into()),
    };
    if r.pos != body.len() {
        return Err(FormatError::Corrupt(format!("{} trailing bytes", body.len() - r.pos)).into());
    }
    Ok(OptimCheckpoint {
        step,
        grid_state: state,
        bg_moments,
    })
}

/// Path of the optimizer sidecar for a checkpoint grid file.
pub fn optim_sidecar(grid_path: &Path) -> PathBuf {
    let mut p = grid_path.as_os_str().to_owned();
    p.push(".optim");
    PathBuf::from(p)
}

pub fn save_checkpoint(
    grid: &SparseGrid<f32>,
    bg: Option<&MsiBackground<f32>>,
    optim: &OptimCheckpoint,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    save_grid(grid, bg, path)?;
    let side = optim_sidecar(path);
    fs::write(&side, optim_to_bytes(optim)).map_err(|e| Error::io(side, e))
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(SparseGrid<f32>, Option<MsiBackground<f32>>, OptimCheckpoint)> {
    let path = path.as_ref();
    let (grid, bg) = load_grid(path)?;
    let side = optim_sidecar(path);
    let bytes = fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let ck = optim_from_bytes(&bytes).map_err(|e| with_path(e, &side))?;
    if ck.grid_state.len() != grid.row_count() {
        return Err(Error::Invalid(format!(
            "{}: optimizer state has {} rows, grid has {}",
            side.display(),
            ck.grid_state.len(),
            grid.row_count()
        )));
    }
    Ok((grid, bg, ck))
}

fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0).round() as u8
}

/// Writes an 8-bit RGB PNG, clamping to `[0, 1]` and rounding to nearest.
pub fn write_image<T: Scalar>(img: &Image<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u8> = img
        .data
        .iter()
        .flat_map(|p| p.map(|v| quantize(v.as_f64())))
        .collect();
    let buf = image::RgbImage::from_raw(img.width, img.height, raw)
        .ok_or_else(|| Error::Invalid("image buffer does not match its size".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Reads a PNG, compositing any alpha channel over `background`.
pub fn read_image_over(path: impl AsRef<Path>, background: [f32; 3]) -> Result<Image<f32>> {
    let path = path.as_ref();
    let dynimg = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgba = dynimg.to_rgba8();
    let (w, h) = rgba.dimensions();
    let data = rgba
        .pixels()
        .map(|p| {
            let a = p[3] as f32 / 255.0;
            std::array::from_fn(|ch| p[ch] as f32 / 255.0 * a + background[ch] * (1.0 - a))
        })
        .collect();
    Image::from_data(w, h, data)
}

/// Reads a PNG, compositing any alpha channel over white.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image<f32>> {
    read_image_over(path, [1.0; 3])
}

/// Initial viewpoint suggested to the viewer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuggestedPose {
    /// Camera-to-world matrix, row-major, camera looking down −z.
    pub transform_matrix: [[f64; 4]; 4],
    /// Horizontal field of view in radians.
    pub camera_angle_x: f64,
    pub width: u32,
    pub height: u32,
}

/// Sidecar JSON describing an exported grid for the viewer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportManifest {
    /// Grid file name relative to the manifest.
    pub file: String,
    pub dims: [usize; 3],
    pub aabb: Aabb<f64>,
    pub row_count: usize,
    pub sh_degree: u8,
    pub has_background: bool,
    pub step_frac: f64,
    pub suggested_pose: SuggestedPose,
}

impl ExportManifest {
    pub fn for_grid<T: Scalar>(file: String, grid: &SparseGrid<T>, has_background: bool, step_frac: f64, pose: SuggestedPose) -> Self {
        Self {
            file,
            dims: grid.dims(),
            aabb: grid.aabb().cast(),
            row_count: grid.row_count(),
            sh_degree: SH_DEGREE,
            has_background,
            step_frac,
            suggested_pose: pose,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, "manifest", e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng) -> SparseGrid<f32> {
        let dims = [rng.gen_range(2..7), rng.gen_range(2..7), rng.gen_range(2..7)];
        let aabb = Aabb::new(Vec3::new(-1.0, -0.5, 0.0), Vec3::new(1.0, 2.0, 0.25));
        SparseGrid::from_fn(dims, aabb, |_, _| {
            rng.gen_bool(0.6).then(|| std::array::from_fn(|_| rng.gen_range(-5.0..5.0)))
        })
        .unwrap()
    }

    #[test]
    fn empty_two_cubed_size() {
        let g = SparseGrid::<f32>::empty([2, 2, 2], Aabb::cube(1.0)).unwrap();
        let bytes = grid_to_bytes(&g, None).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 8 * 4 + 1 + 4);
        assert_eq!(bytes.len(), 114);
        assert_eq!(&bytes[..4], b"PLNX");
        assert!(bytes[HEADER_LEN..HEADER_LEN + 32].chunks(4).all(|c| c == (-1i32).to_le_bytes()));
    }

    #[test]
    fn random_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let g = random_grid(&mut rng);
            let (back, bg) = grid_from_bytes(&grid_to_bytes(&g, None).unwrap()).unwrap();
            assert!(bg.is_none());
            assert_eq!(back.index(), g.index());
            for (a, b) in back.rows().iter().zip(g.rows()) {
                assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn background_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_grid(&mut rng);
        let mut bg = MsiBackground::<f32>::new(3, 4, 2, [0.0; 4]).unwrap();
        for t in bg.data_mut() {
            *t = std::array::from_fn(|_| rng.gen());
        }
        let bytes = grid_to_bytes(&g, Some(&bg)).unwrap();
        let (_, back) = grid_from_bytes(&bytes).unwrap();
        assert_eq!(back.unwrap(), bg);
    }

    #[test]
    fn corruption_is_named() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bytes = grid_to_bytes(&random_grid(&mut rng), None).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(grid_from_bytes(&bad), Err(Error::Format(FormatError::BadMagic { .. }))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(grid_from_bytes(&bad), Err(Error::Format(FormatError::Version { found: 9, .. }))));
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 1] ^= 0x40;
        assert!(matches!(grid_from_bytes(&bad), Err(Error::Format(FormatError::Checksum { .. }))));
        let mut bad = bytes.clone();
        bad[HEADER_LEN + 1] ^= 1;
        assert!(matches!(grid_from_bytes(&bad), Err(Error::Format(FormatError::Checksum { .. }))));
    }

    #[test]
    fn truncation_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bytes = grid_to_bytes(&random_grid(&mut rng), None).unwrap();
        for cut in [0, 3, 7, 11, 50, bytes.len() - 1] {
            assert!(grid_from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        // A consistent checksum over a short body still fails the length checks.
        let mut short = bytes[..HEADER_LEN + 4].to_vec();
        let crc = crc32fast::hash(&short);
        short.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(grid_from_bytes(&short), Err(Error::Format(FormatError::Truncated { .. }))));
    }

    #[test]
    fn optim_sidecar_round_trip() {
        let mut st = OptimState::new(5, 0.95f32, 1e-8);
        st.step = 17;
        st.second_moment[3][7] = 0.25;
        let ck = OptimCheckpoint {
            step: 42,
            grid_state: st,
            bg_moments: Some(vec![[1.0, 2.0, 3.0, 4.0]; 3]),
        };
        let back = optim_from_bytes(&optim_to_bytes(&ck)).unwrap();
        assert_eq!(back, ck);
        let mut bad = optim_to_bytes(&ck);
        bad[20] ^= 1;
        assert!(optim_from_bytes(&bad).is_err());
    }

    #[test]
    fn checkpoint_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.plnx");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_grid(&mut rng);
        let ck = OptimCheckpoint {
            step: 3,
            grid_state: OptimState::new(g.row_count(), 0.9, 1e-6),
            bg_moments: None,
        };
        save_checkpoint(&g, None, &ck, &path).unwrap();
        let (g2, bg, ck2) = load_checkpoint(&path).unwrap();
        assert_eq!(g2, g);
        assert!(bg.is_none());
        assert_eq!(ck2, ck);
    }

    #[test]
    fn png_white_and_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("white.png");
        write_image(&Image::<f32>::filled(3, 2, [1.0; 3]), &p).unwrap();
        let raw = image::open(&p).unwrap().to_rgb8();
        assert!(raw.pixels().all(|px| px.0 == [255; 3]));

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = Image::from_data(8, 5, (0..40).map(|_| std::array::from_fn(|_| rng.gen::<f32>())).collect()).unwrap();
        let q = dir.path().join("q.png");
        write_image(&img, &q).unwrap();
        let back = read_image(&q).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            for ch in 0..3 {
                assert!((a[ch] - b[ch]).abs() <= 1.0 / 510.0 + 1e-6);
            }
        }
        // Out of range values clamp.
        let p2 = dir.path().join("c.png");
        write_image(&Image::<f32>::filled(1, 1, [-0.5, 2.0, f32::NAN]), &p2).unwrap();
        assert_eq!(image::open(&p2).unwrap().to_rgb8().get_pixel(0, 0).0, [0, 255, 0]);
    }

    #[test]
    fn rgba_composites_over_white() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let mut buf = image::RgbaImage::new(2, 1);
        buf.put_pixel(0, 0, image::Rgba([0, 0, 0, 0]));
        buf.put_pixel(1, 0, image::Rgba([255, 0, 0, 255]));
        buf.save(&p).unwrap();
        let img = read_image(&p).unwrap();
        assert_eq!(img.get(0, 0), [1.0; 3]);
        assert_eq!(img.get(1, 0), [1.0, 0.0, 0.0]);
        assert!(read_image(dir.path().join("missing.png")).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = SparseGrid::<f32>::empty([4, 5, 6], Aabb::cube(1.0)).unwrap();
        let pose = SuggestedPose {
            transform_matrix: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 4.0], [0.0, 0.0, 0.0, 1.0]],
            camera_angle_x: 0.7,
            width: 64,
            height: 64,
        };
        let m = ExportManifest::for_grid("scene.plnx".into(), &g, false, 0.5, pose);
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        assert_eq!(ExportManifest::load(&p).unwrap(), m);
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(v["dims"], serde_json::json!([4, 5, 6]));
        assert_eq!(v["has_background"], serde_json::json!(false));
    }
}
