//! Pinhole cameras, rays, bounds and positional encoding.
//!
//! Convention: a camera looks down its local +z axis, image x grows to the
//! right and image y grows downward. Extrinsics map world to camera:
//! `x_cam = R x_world + t`. Integer pixel coordinates address pixel centers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};

/// Smallest near bound handed out by [`ray_bounds`].
pub const MIN_NEAR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major.
    pub rotation: Mat3,
    /// World-to-camera translation in meters.
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Mat3,
        translation: Vec3,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` aimed at `target`, with `up` mapped to image-up.
    /// The principal point sits at the image center.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Result<Self> {
        let z = (target - eye).normalized();
        let down = -(up - z * up.dot(z));
        if z == Vec3::ZERO || down.norm() < 1e-9 {
            return Err(Error::InvalidCamera("look_at with degenerate up or target".into()));
        }
        let y = down.normalized();
        let x = y.cross(z);
        let rotation = Mat3::from_rows(x, y, z);
        let translation = -rotation.mul_vec(eye);
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            rotation,
            translation,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.rotation.orthonormality_error() > 1e-6 || (self.rotation.det() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidCamera("rotation is not a proper orthonormal matrix".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("empty image size".into()));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -self.rotation.transpose().mul_vec(self.translation)
    }

    /// World-space unit optical axis.
    pub fn forward(&self) -> Vec3 {
        self.rotation.row(2)
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        self.rotation.mul_vec(p) + self.translation
    }

    /// World point at camera-space depth `depth` behind pixel `q`.
    pub fn unproject(&self, q: [f64; 2], depth: f64) -> Vec3 {
        let local = Vec3::new((q[0] - self.cx) / self.fx * depth, (q[1] - self.cy) / self.fy * depth, depth);
        self.rotation.transpose().mul_vec(local - self.translation)
    }

    pub fn in_image(&self, q: [f64; 2]) -> bool {
        q[0] >= 0.0 && q[1] >= 0.0 && q[0] <= (self.width - 1) as f64 && q[1] <= (self.height - 1) as f64
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub q: [f64; 2],
    /// Camera-space z.
    pub depth: f64,
    pub in_front: bool,
}

pub fn project(camera: &Camera, p: Vec3) -> Projection {
    let c = camera.to_camera(p);
    let z = c.z();
    let in_front = z > 0.0;
    let q = if z.abs() > 1e-12 {
        [camera.fx * c.x() / z + camera.cx, camera.fy * c.y() / z + camera.cy]
    } else {
        [f64::NAN, f64::NAN]
    };
    Projection { q, depth: z, in_front }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }

    pub fn has_bounds(&self) -> bool {
        self.near > 0.0 && self.far > self.near
    }

    pub fn with_bounds(mut self, near: f64, far: f64) -> Self {
        self.near = near;
        self.far = far;
        self
    }
}

/// Ray through continuous pixel `q`; bounds are left unset (zero).
pub fn generate_ray(camera: &Camera, q: [f64; 2]) -> Ray {
    let local = Vec3::new((q[0] - camera.cx) / camera.fx, (q[1] - camera.cy) / camera.fy, 1.0);
    Ray {
        origin: camera.center(),
        dir: camera.rotation.transpose().mul_vec(local).normalized(),
        near: 0.0,
        far: 0.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).any(|i| min[i] > max[i]) {
            return Err(Error::InvalidInput(format!("aabb min {min:?} exceeds max {max:?}")));
        }
        Ok(Self { min, max })
    }

    pub fn from_points(points: impl IntoIterator<Item = Vec3>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let (min, max) = it.fold((first, first), |(lo, hi), p| (lo.min(p), hi.max(p)));
        Some(Self { min, max })
    }

    pub fn dilate(&self, margin: f64) -> Self {
        let m = Vec3::new(margin, margin, margin);
        Self {
            min: self.min - m,
            max: self.max + m,
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// Slab intersection. Returns `None` on a miss or an empty interval.
pub fn ray_bounds(ray: &Ray, aabb: &Aabb) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for i in 0..3 {
        let (o, d) = (ray.origin[i], ray.dir[i]);
        if d.abs() < 1e-15 {
            if o < aabb.min[i] || o > aabb.max[i] {
                return None;
            }
            continue;
        }
        let a = (aabb.min[i] - o) / d;
        let b = (aabb.max[i] - o) / d;
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    let near = t0.max(MIN_NEAR);
    (t1 > near).then_some((near, t1))
}

/// `[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]`.
pub fn positional_encode(x: &[f64], levels: usize) -> Vec<f64> {
    autodiff::kernels::pos_encode(x, x.len(), levels)
}

pub fn encoded_len(dim: usize, levels: usize) -> usize {
    dim * (1 + 2 * levels)
}
