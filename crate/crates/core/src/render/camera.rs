use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Pinhole camera with OpenCV axes: x right, y down, looking along +z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub name: String,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major rigid transform taking camera coordinates to world.
    pub world_from_camera: [[f64; 4]; 4],
}

impl Camera {
    /// Camera at `eye` looking at `target`, with `up` pointing roughly
    /// opposite the image y axis. `fov_x` is the horizontal field of view.
    pub fn look_at(name: impl Into<String>, eye: Vec3, target: Vec3, up: Vec3, width: u32, height: u32, fov_x: f64) -> Self {
        let forward = normalize(sub(target, eye));
        let right = normalize(cross(forward, up));
        let down = cross(forward, right);
        let f = 0.5 * width as f64 / (0.5 * fov_x).tan();
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            m[r][0] = right[r];
            m[r][1] = down[r];
            m[r][2] = forward[r];
            m[r][3] = eye[r];
        }
        m[3][3] = 1.0;
        Camera {
            name: name.into(),
            width,
            height,
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            world_from_camera: m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::invalid(format!(
                "camera {}: intrinsics and image size must be positive",
                self.name
            )));
        }
        let m = &self.world_from_camera;
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("camera {}: non-finite pose", self.name)));
        }
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-4 {
                    return Err(Error::invalid(format!(
                        "camera {}: rotation is not orthonormal (RᵀR[{i}][{j}] = {d})",
                        self.name
                    )));
                }
            }
        }
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::invalid(format!("camera {}: last pose row must be 0 0 0 1", self.name)));
        }
        Ok(())
    }

    pub fn position(&self) -> Vec3 {
        let m = &self.world_from_camera;
        [m[0][3], m[1][3], m[2][3]]
    }

    fn rotate(&self, d: Vec3) -> Vec3 {
        let m = &self.world_from_camera;
        [
            m[0][0] * d[0] + m[0][1] * d[1] + m[0][2] * d[2],
            m[1][0] * d[0] + m[1][1] * d[1] + m[1][2] * d[2],
            m[2][0] * d[0] + m[2][1] * d[1] + m[2][2] * d[2],
        ]
    }

    /// Unit world-space direction through continuous image coordinates
    /// `(u, v)`; pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
    pub fn direction(&self, u: f64, v: f64) -> Vec3 {
        normalize(self.rotate([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]))
    }

    /// Image coordinates of a world point, `None` behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let m = &self.world_from_camera;
        let d = sub(p, self.position());
        let c = [
            m[0][0] * d[0] + m[1][0] * d[1] + m[2][0] * d[2],
            m[0][1] * d[0] + m[1][1] * d[1] + m[2][1] * d[2],
            m[0][2] * d[0] + m[1][2] * d[1] + m[2][2] * d[2],
        ];
        if c[2] <= 0.0 {
            return None;
        }
        Some((self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy))
    }

    /// Depth along the optical axis of a world point.
    pub fn z_depth(&self, p: Vec3) -> f64 {
        let m = &self.world_from_camera;
        let d = sub(p, self.position());
        m[0][2] * d[0] + m[1][2] * d[1] + m[2][2] * d[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub o: Vec3,
    pub v: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        [self.o[0] + t * self.v[0], self.o[1] + t * self.v[1], self.o[2] + t * self.v[2]]
    }
}

/// Entry and exit distances of `o + t·v` through the cube `[−half, half]³`.
pub fn intersect_cube(o: Vec3, v: Vec3, half: f64) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        if v[k].abs() < 1e-15 {
            if o[k].abs() > half {
                return None;
            }
            continue;
        }
        let a = (-half - o[k]) / v[k];
        let b = (half - o[k]) / v[k];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    let t0 = t0.max(0.0);
    (t1 > t0).then_some((t0, t1))
}

/// Rays through the given image coordinates, clipped to `[−1,1]³`.
/// Rays that miss the cube come back as `None`.
pub fn generate_rays(camera: &Camera, pixels: &[(f64, f64)]) -> Result<Vec<Option<Ray>>> {
    camera.validate()?;
    let (w, h) = (camera.width as f64, camera.height as f64);
    let o = camera.position();
    pixels
        .iter()
        .map(|&(u, v)| {
            if !(0.0..=w).contains(&u) || !(0.0..=h).contains(&v) {
                return Err(Error::invalid(format!(
                    "pixel ({u}, {v}) outside the {w}x{h} image of camera {}",
                    camera.name
                )));
            }
            let d = camera.direction(u, v);
            Ok(intersect_cube(o, d, 1.0).map(|(t_near, t_far)| Ray { o, v: d, t_near, t_far }))
        })
        .collect()
}
