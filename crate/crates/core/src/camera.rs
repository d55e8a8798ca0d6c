//! Pinhole cameras (OpenGL convention, looking down -z) and ray generation.

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::vec3::Vec3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera<T> {
    /// Row-major camera-to-world transform.
    pub c2w: [[T; 4]; 4],
    /// Focal length in pixels.
    pub focal: T,
    pub width: u32,
    pub height: u32,
    pub near: T,
    pub far: T,
}

impl<T: Scalar> Camera<T> {
    pub fn new(c2w: [[T; 4]; 4], focal: T, width: u32, height: u32, near: T, far: T) -> Result<Self> {
        if !(focal > T::zero() && focal.is_finite()) {
            return Err(Error::Invalid(format!("focal length must be positive, got {focal}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Invalid("image size must be nonzero".into()));
        }
        let tol = T::lit(1e-4);
        for a in 0..3 {
            for b in 0..3 {
                let d: T = (0..3).map(|r| c2w[r][a] * c2w[r][b]).sum();
                let want = if a == b { T::one() } else { T::zero() };
                if (d - want).abs() > tol {
                    return Err(Error::Invalid(format!(
                        "camera rotation is not orthonormal (column dot {a},{b} = {d})"
                    )));
                }
            }
        }
        Ok(Self {
            c2w,
            focal,
            width,
            height,
            near,
            far,
        })
    }

    /// Camera at `eye` looking at `target`.
    pub fn look_at(eye: Vec3<T>, target: Vec3<T>, up: Vec3<T>, focal: T, width: u32, height: u32) -> Result<Self> {
        let back = (eye - target).normalized();
        let right = up.cross(back);
        if right.norm() < T::lit(1e-8) {
            return Err(Error::Invalid("look_at: up is parallel to view direction".into()));
        }
        let right = right.normalized();
        let up = back.cross(right);
        let z = T::zero();
        let c2w = [
            [right.x, up.x, back.x, eye.x],
            [right.y, up.y, back.y, eye.y],
            [right.z, up.z, back.z, eye.z],
            [z, z, z, T::one()],
        ];
        Self::new(c2w, focal, width, height, T::zero(), T::infinity())
    }

    /// Focal length from a horizontal field of view in radians.
    pub fn focal_from_fov(width: u32, fov_x: T) -> T {
        T::lit(0.5) * T::from_usize_lossy(width as usize) / (T::lit(0.5) * fov_x).tan()
    }

    pub fn position(&self) -> Vec3<T> {
        Vec3::new(self.c2w[0][3], self.c2w[1][3], self.c2w[2][3])
    }

    pub fn rotate(&self, v: Vec3<T>) -> Vec3<T> {
        let m = &self.c2w;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn cast<U: Scalar>(&self) -> Camera<U> {
        Camera {
            c2w: self.c2w.map(|r| r.map(cast)),
            focal: cast(self.focal),
            width: self.width,
            height: self.height,
            near: cast(self.near),
            far: cast(self.far),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray<T> {
    pub origin: Vec3<T>,
    /// Marching direction: world-space unit vector, or NDC-space for forward-facing scenes.
    pub dir: Vec3<T>,
    /// Unit world-space direction used for SH evaluation.
    pub view_dir: Vec3<T>,
    pub pixel: (u32, u32),
    /// Ground-truth color, zero when unknown.
    pub rgb: [T; 3],
}

impl<T: Scalar> Ray<T> {
    pub fn new(origin: Vec3<T>, dir: Vec3<T>) -> Self {
        let view_dir = dir.normalized();
        Self {
            origin,
            dir: view_dir,
            view_dir,
            pixel: (0, 0),
            rgb: [T::zero(); 3],
        }
    }

    pub fn at(&self, t: T) -> Vec3<T> {
        self.origin + self.dir * t
    }

    pub fn cast<U: Scalar>(&self) -> Ray<U> {
        Ray {
            origin: self.origin.cast(),
            dir: self.dir.cast(),
            view_dir: self.view_dir.cast(),
            pixel: self.pixel,
            rgb: self.rgb.map(crate::scalar::cast::<T, U>),
        }
    }
}

/// Ray through the center of pixel `(px, py)`.
pub fn generate_ray<T: Scalar>(cam: &Camera<T>, px: u32, py: u32) -> Result<Ray<T>> {
    if px >= cam.width || py >= cam.height {
        return Err(Error::Contract(format!(
            "pixel ({px}, {py}) outside {}x{} image",
            cam.width, cam.height
        )));
    }
    let half = T::lit(0.5);
    let w = T::from_usize_lossy(cam.width as usize);
    let h = T::from_usize_lossy(cam.height as usize);
    let x = (T::from_usize_lossy(px as usize) + half - half * w) / cam.focal;
    let y = -(T::from_usize_lossy(py as usize) + half - half * h) / cam.focal;
    let d = cam.rotate(Vec3::new(x, y, -T::one())).normalized();
    Ok(Ray {
        origin: cam.position(),
        dir: d,
        view_dir: d,
        pixel: (px, py),
        rgb: [T::zero(); 3],
    })
}

/// Warps a world ray into normalized device coordinates.
///
/// The origin is first moved onto the near plane `z = -near`; the frustum
/// then maps to `[-1, 1]^3` with the far limit at `z = 1`. The returned
/// direction is not normalized; `view_dir` keeps the world direction.
pub fn to_ndc<T: Scalar>(ray: &Ray<T>, cam: &Camera<T>) -> Result<Ray<T>> {
    let (o, d) = (ray.origin, ray.dir);
    if d.z.abs() < T::lit(1e-9) {
        return Err(Error::Invalid("ray parallel to the image plane cannot be mapped to NDC".into()));
    }
    let t = -(cam.near + o.z) / d.z;
    let o = o + d * t;
    let two = T::lit(2.0);
    let ax = -cam.focal / (T::lit(0.5) * T::from_usize_lossy(cam.width as usize));
    let ay = -cam.focal / (T::lit(0.5) * T::from_usize_lossy(cam.height as usize));
    let origin = Vec3::new(ax * o.x / o.z, ay * o.y / o.z, T::one() + two * cam.near / o.z);
    let dir = Vec3::new(
        ax * (d.x / d.z - o.x / o.z),
        ay * (d.y / d.z - o.y / o.z),
        -two * cam.near / o.z,
    );
    Ok(Ray {
        origin,
        dir,
        view_dir: ray.view_dir,
        pixel: ray.pixel,
        rgb: ray.rgb,
    })
}

/// Inverse of the NDC point map: NDC position back to world space.
pub fn ndc_to_world<T: Scalar>(p: Vec3<T>, cam: &Camera<T>) -> Vec3<T> {
    let two = T::lit(2.0);
    let z = two * cam.near / (p.z - T::one());
    let ax = -cam.focal / (T::lit(0.5) * T::from_usize_lossy(cam.width as usize));
    let ay = -cam.focal / (T::lit(0.5) * T::from_usize_lossy(cam.height as usize));
    Vec3::new(p.x * z / ax, p.y * z / ay, z)
}
