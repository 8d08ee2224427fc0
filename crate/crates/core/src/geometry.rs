//! Pinhole cameras, rigid transforms, target rays and feature sampling.
//!
//! Camera convention: right-handed, `+z` forward, `+x` right, `+y` down,
//! image origin at the top-left corner and pixel centres at integer
//! coordinates.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Depth at or below which a projected point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.fx > 0.0 && self.fy > 0.0,
            "focal lengths must be positive"
        );
        ensure!(
            self.cx >= 0.0
                && self.cx < self.width as f64
                && self.cy >= 0.0
                && self.cy < self.height as f64,
            "principal point ({}, {}) outside {}x{} image",
            self.cx,
            self.cy,
            self.width,
            self.height
        );
        Ok(())
    }

    /// Centred camera with a given horizontal field of view (radians).
    pub fn with_fov(width: usize, height: usize, fov_x: f64) -> Self {
        let f = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    /// Same camera sampled on an image `factor` times larger, such that pixel
    /// `(u, v)` of `self` coincides with pixel `(factor·u, factor·v)`.
    pub fn upscaled(&self, factor: usize) -> Self {
        let s = factor as f64;
        Self {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
            width: self.width * factor,
            height: self.height * factor,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Whether a continuous pixel coordinate lies on the image.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && v >= -0.5 && u <= self.width as f64 - 0.5 && v <= self.height as f64 - 0.5
    }

    /// Unnormalized camera-space direction through a pixel.
    pub fn back_project(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Rigid transform `x ↦ R x + t`.
///
/// A [`RelativePose`] maps target-camera coordinates into origin-camera
/// coordinates; a world pose maps camera coordinates into world coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Se3 {
    #[serde(with = "mat3_rows")]
    pub rotation: Matrix3<f64>,
    #[serde(with = "vec3_array")]
    pub translation: Vector3<f64>,
}

pub type RelativePose = Se3;

impl Default for Se3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Se3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let p = Self {
            rotation,
            translation,
        };
        p.validate(1e-6)?;
        Ok(p)
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation from an axis-angle vector (exponential map of so(3)).
    pub fn from_axis_angle(omega: Vector3<f64>, t: Vector3<f64>) -> Self {
        Self {
            rotation: exp_so3(omega),
            translation: t,
        }
    }

    /// Parses 12 row-major floats `[R | t]`.
    pub fn from_row_major_3x4(v: &[f64]) -> Result<Self> {
        ensure!(v.len() == 12, "expected 12 pose values, got {}", v.len());
        let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        Self::new(r, Vector3::new(v[3], v[7], v[11]))
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if !(ortho <= tol && (det - 1.0).abs() <= tol && self.translation.iter().all(|v| v.is_finite())) {
            return Err(Error::Contract(format!(
                "pose is not a valid SE(3) element (|RᵀR − I| = {ortho:e}, det = {det})"
            )));
        }
        Ok(())
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ first`: applies `first`, then `self`.
    pub fn after(&self, first: &Se3) -> Self {
        Self {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }

    /// Camera centre, when `self` is a camera-to-world pose.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    /// Camera-to-world pose at `eye` looking at `target`, with world `up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        Self {
            rotation: Matrix3::from_columns(&[right, down, forward]),
            translation: eye,
        }
    }

    pub fn max_abs_diff(&self, other: &Se3) -> f64 {
        (self.rotation - other.rotation)
            .abs()
            .max()
            .max((self.translation - other.translation).abs().max())
    }
}

pub fn exp_so3(omega: Vector3<f64>) -> Matrix3<f64> {
    Rotation3::from_scaled_axis(omega).into_inner()
}

/// Transform mapping frame-`a` coordinates into frame-`b` coordinates, given
/// the camera-to-world poses of both frames.
pub fn relative_pose(world_a: &Se3, world_b: &Se3) -> Result<RelativePose> {
    world_a.validate(1e-6)?;
    world_b.validate(1e-6)?;
    Ok(world_b.inverse().after(world_a))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>, near: f64, far: f64) -> Result<Self> {
        ensure!(
            near > 0.0 && near < far,
            "ray bounds must satisfy 0 < near < far (got {near}, {far})"
        );
        let n = direction.norm();
        ensure!(n > 0.0 && n.is_finite(), "ray direction must be non-zero");
        Ok(Self {
            origin,
            direction: direction / n,
            near,
            far,
        })
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// Ray through pixel `(u, v)` of the target camera, expressed in the origin
/// camera frame through `pose` (target → origin).
pub fn generate_ray(
    pixel: (f64, f64),
    intrinsics: &Intrinsics,
    pose: &RelativePose,
    near: f64,
    far: f64,
) -> Result<Ray> {
    let (u, v) = pixel;
    ensure!(
        intrinsics.contains(u, v),
        "pixel ({u}, {v}) outside {}x{} image",
        intrinsics.width,
        intrinsics.height
    );
    let dir = pose.rotation * intrinsics.back_project(u, v);
    Ray::new(pose.translation, dir, near, far)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointSamples {
    pub depths: Vec<f64>,
    pub positions: Vec<Vector3<f64>>,
}

/// `count` depths uniformly spaced over `[near, far]`, both ends included.
pub fn sample_depths(near: f64, far: f64, count: usize) -> Result<Vec<f64>> {
    ensure!(count >= 2, "need at least 2 samples per ray, got {count}");
    let step = (far - near) / (count - 1) as f64;
    Ok((0..count)
        .map(|i| if i + 1 == count { far } else { near + step * i as f64 })
        .collect())
}

pub fn sample_points(ray: &Ray, count: usize) -> Result<PointSamples> {
    let depths = sample_depths(ray.near, ray.far, count)?;
    let positions = depths.iter().map(|&t| ray.at(t)).collect();
    Ok(PointSamples { depths, positions })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub behind: bool,
}

/// Projects `point` through `pose` and the pinhole `intrinsics`, with
/// perspective divide.
pub fn project(point: &Vector3<f64>, intrinsics: &Intrinsics, pose: &RelativePose) -> Projection {
    let p = pose.apply(point);
    let depth = p.z;
    if depth <= MIN_DEPTH {
        return Projection {
            u: f64::NAN,
            v: f64::NAN,
            depth,
            behind: true,
        };
    }
    Projection {
        u: intrinsics.fx * p.x / depth + intrinsics.cx,
        v: intrinsics.fy * p.y / depth + intrinsics.cy,
        depth,
        behind: false,
    }
}

/// Bilinear taps `(texel index, weight)` on an `h × w` grid at continuous
/// texel coordinates `(x, y)`, clamped to the border. The flag reports
/// whether clamping happened.
pub fn bilinear_taps(h: usize, w: usize, x: f64, y: f64) -> ([(usize, f64); 4], bool) {
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    let oob = !(x >= 0.0 && y >= 0.0 && x <= max_x && y <= max_y);
    let xc = if x.is_nan() { 0.0 } else { x.clamp(0.0, max_x) };
    let yc = if y.is_nan() { 0.0 } else { y.clamp(0.0, max_y) };
    let x0 = (xc.floor() as usize).min(w.saturating_sub(2));
    let y0 = (yc.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = if x1 == x0 { 0.0 } else { xc - x0 as f64 };
    let fy = if y1 == y0 { 0.0 } else { yc - y0 as f64 };
    (
        [
            (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
            (y0 * w + x1, fx * (1.0 - fy)),
            (y1 * w + x0, (1.0 - fx) * fy),
            (y1 * w + x1, fx * fy),
        ],
        oob,
    )
}

/// Bilinear interpolation of an `h × w × c` feature map at texel
/// coordinates `uv`, clamped to the border.
pub fn interpolate(map: &[f32], h: usize, w: usize, c: usize, uv: (f64, f64)) -> Result<(Vec<f32>, bool)> {
    ensure!(h > 0 && w > 0 && c > 0, "empty feature map");
    ensure!(map.len() == h * w * c, "feature map size mismatch");
    let (taps, oob) = bilinear_taps(h, w, uv.0, uv.1);
    let mut out = vec![0.0f32; c];
    for (idx, wt) in taps {
        if wt == 0.0 {
            continue;
        }
        for (o, &v) in out.iter_mut().zip(&map[idx * c..(idx + 1) * c]) {
            *o += wt as f32 * v;
        }
    }
    Ok((out, oob))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub seed: u64,
}

/// Composes the rotation with `exp(ε)`, `ε ~ N(0, σ² I₃)`, and adds
/// `N(0, σ² I₃)` to the translation.
pub fn perturb_pose(pose: &Se3, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Se3> {
    ensure!(sigma >= 0.0 && sigma.is_finite(), "noise sigma must be >= 0");
    if sigma == 0.0 {
        return Ok(*pose);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Contract(e.to_string()))?;
    let mut draw = || Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
    let omega = draw();
    let dt = draw();
    Ok(Se3 {
        rotation: exp_so3(omega) * pose.rotation,
        translation: pose.translation + dt,
    })
}

/// Intrinsic XYZ Euler angles `(a, b, c)` with `R = Rx(a)·Ry(b)·Rz(c)`.
pub fn euler_xyz(r: &Matrix3<f64>) -> [f64; 3] {
    let b = r[(0, 2)].clamp(-1.0, 1.0).asin();
    if r[(0, 2)].abs() < 1.0 - 1e-12 {
        let a = (-r[(1, 2)]).atan2(r[(2, 2)]);
        let c = (-r[(0, 1)]).atan2(r[(0, 0)]);
        [a, b, c]
    } else {
        // Gimbal lock: fold everything into the first angle.
        let a = r[(2, 1)].atan2(r[(1, 1)]);
        [a, b, 0.0]
    }
}

impl NoiseConfig {
    /// Fresh noise generator for this configuration.
    pub fn rng(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

mod mat3_rows {
    use nalgebra::Matrix3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix3<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: [[f64; 3]; 3] = [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ];
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix3<f64>, D::Error> {
        let r = <[[f64; 3]; 3]>::deserialize(d)?;
        Ok(Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        ))
    }
}

mod vec3_array {
    use nalgebra::Vector3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector3<f64>, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector3<f64>, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        Ok(Vector3::new(a[0], a[1], a[2]))
    }
}
