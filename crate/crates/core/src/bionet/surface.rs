use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::fields::ImplicitField;

/// Surface points with per-point semantic features (`n×c`, row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct SurfacePointCloud {
    pub points: Vec<[f64; 3]>,
    pub features: Vec<f64>,
    pub channels: usize,
}

impl SurfacePointCloud {
    pub fn new(points: Vec<[f64; 3]>, features: Vec<f64>, channels: usize) -> Result<Self> {
        let cloud = SurfacePointCloud {
            points,
            features,
            channels,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::invalid("surface point cloud is empty"));
        }
        if self.features.len() != self.points.len() * self.channels {
            return Err(Error::invalid(format!(
                "{} feature values for {} points with {} channels",
                self.features.len(),
                self.points.len(),
                self.channels
            )));
        }
        if self.points.iter().flatten().chain(&self.features).any(|v| !v.is_finite()) {
            return Err(Error::invalid("surface point cloud contains non-finite values"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / self.points.len() as f64)
    }
}

/// Lattice coordinate `i` of `res` evenly spaced values over `[−1,1]`.
pub fn lattice_coord(i: usize, res: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / (res - 1) as f64
}

/// Zero-level-set points of `field` on a `grid_res³` lattice over `[−1,1]³`
/// (those with `|sdf| < tau`) and their features.
pub fn extract_surface_features(field: &dyn ImplicitField, grid_res: usize, tau: f64) -> Result<SurfacePointCloud> {
    if grid_res < 16 {
        return Err(Error::invalid(format!("grid_res must be at least 16, got {grid_res}")));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    let mut kept = Vec::new();
    let slab = grid_res * grid_res;
    let mut coords = Vec::with_capacity(slab * 3);
    for i in 0..grid_res {
        coords.clear();
        let x = lattice_coord(i, grid_res);
        for j in 0..grid_res {
            for k in 0..grid_res {
                coords.extend_from_slice(&[x, lattice_coord(j, grid_res), lattice_coord(k, grid_res)]);
            }
        }
        let sdf = field.sdf(&Tensor::new(slab, 3, coords.clone()))?;
        for (r, s) in sdf.iter().enumerate() {
            if s.abs() < tau {
                kept.push([coords[3 * r], coords[3 * r + 1], coords[3 * r + 2]]);
            }
        }
    }
    if kept.is_empty() {
        return Err(Error::invalid(format!(
            "no lattice point within |sdf| < {tau} at grid_res {grid_res}; increase tau"
        )));
    }
    let flat: Vec<f64> = kept.iter().flatten().copied().collect();
    let (_, features) = field.evaluate(&Tensor::new(kept.len(), 3, flat))?;
    log::info!("extracted {} surface points at grid_res {grid_res}", kept.len());
    SurfacePointCloud::new(kept, features.into_data(), field.feature_dim())
}

pub const MAX_THETA: f64 = PI / 18.0;
pub const MAX_ALPHA_ROT: f64 = PI / 18.0;
pub const MAX_PHI: f64 = PI / 12.0;

/// Rigid augmentation: rotations about x (`theta`), y (`alpha_rot`) and z
/// (`phi`) followed by a translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub theta: f64,
    pub alpha_rot: f64,
    pub phi: f64,
    pub delta: [f64; 3],
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            theta: 0.0,
            alpha_rot: 0.0,
            phi: 0.0,
            delta: [0.0; 3],
        }
    }

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        AugmentParams {
            theta: rng.random_range(-MAX_THETA..=MAX_THETA),
            alpha_rot: rng.random_range(-MAX_ALPHA_ROT..=MAX_ALPHA_ROT),
            phi: rng.random_range(-MAX_PHI..=MAX_PHI),
            delta: [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("theta", self.theta, MAX_THETA),
            ("alpha_rot", self.alpha_rot, MAX_ALPHA_ROT),
            ("phi", self.phi, MAX_PHI),
        ];
        for (name, v, max) in checks {
            if !(v.abs() <= max) {
                return Err(Error::invalid(format!("{name} = {v} outside [-{max}, {max}]")));
            }
        }
        if self.delta.iter().any(|d| !d.is_finite()) {
            return Err(Error::invalid("non-finite translation"));
        }
        Ok(())
    }

    /// `R_z(phi)·R_y(alpha_rot)·R_x(theta)`.
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let (st, ct) = self.theta.sin_cos();
        let (sa, ca) = self.alpha_rot.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, ct, -st], [0.0, st, ct]];
        let ry = [[ca, 0.0, sa], [0.0, 1.0, 0.0], [-sa, 0.0, ca]];
        let rz = [[cp, -sp, 0.0], [sp, cp, 0.0], [0.0, 0.0, 1.0]];
        mat3_mul(&rz, &mat3_mul(&ry, &rx))
    }
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Rotates about the centroid, then translates. Features are untouched.
pub fn augment(cloud: &SurfacePointCloud, params: &AugmentParams) -> Result<SurfacePointCloud> {
    params.validate()?;
    let r = params.rotation();
    let c = cloud.centroid();
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
            // p + (R − I)·d + δ keeps the identity exact
            std::array::from_fn(|i| {
                let rd = (r[i][0] * d[0] + r[i][1] * d[1] + r[i][2] * d[2]) - d[i];
                p[i] + rd + params.delta[i]
            })
        })
        .collect();
    Ok(SurfacePointCloud {
        points,
        features: cloud.features.clone(),
        channels: cloud.channels,
    })
}
