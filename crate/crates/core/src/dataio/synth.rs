use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::bundle::{FeatureMap, Rgb8Image, SceneBundle, Similarity};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::fields::ImplicitField;
use crate::render::{dot, generate_rays, norm, normalize, sub, Camera, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Box { center: Vec3, half_extents: Vec3 },
    /// Half-space `z ≤ height`.
    Plane { height: f64 },
}

impl Shape {
    pub fn sdf(&self, p: Vec3) -> f64 {
        match self {
            Shape::Sphere { center, radius } => norm(sub(p, *center)) - radius,
            Shape::Box { center, half_extents } => {
                let q: Vec3 = [0, 1, 2].map(|k| (p[k] - center[k]).abs() - half_extents[k]);
                let outside = norm(q.map(|v| v.max(0.0)));
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            Shape::Plane { height } => p[2] - height,
        }
    }

    pub fn normal(&self, p: Vec3) -> Vec3 {
        match self {
            Shape::Sphere { center, .. } => normalize(sub(p, *center)),
            Shape::Plane { .. } => [0.0, 0.0, 1.0],
            Shape::Box { .. } => {
                let h = 1e-6;
                let g = [0, 1, 2].map(|k| {
                    let mut a = p;
                    let mut b = p;
                    a[k] += h;
                    b[k] -= h;
                    self.sdf(a) - self.sdf(b)
                });
                normalize(g)
            }
        }
    }

    fn sample_surface<R: Rng>(&self, rng: &mut R) -> Vec3 {
        match self {
            Shape::Sphere { center, radius } => {
                let d = normalize([0, 1, 2].map(|_| rng.sample::<f64, _>(StandardNormal)));
                [0, 1, 2].map(|k| center[k] + radius * d[k])
            }
            Shape::Plane { height } => [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), *height],
            Shape::Box { center, half_extents: h } => {
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random_range(0.0..total);
                let mut axis = 2;
                for (k, a) in areas.iter().enumerate() {
                    if pick < *a {
                        axis = k;
                        break;
                    }
                    pick -= a;
                }
                let mut p = [0, 1, 2].map(|k| center[k] + rng.random_range(-h[k]..h[k]));
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                p[axis] = center[axis] + sign * h[axis];
                p
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: [f64; 3],
    /// Semantic feature label; empty means a seeded random unit vector.
    #[serde(default)]
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub primitives: Vec<Primitive>,
    pub feature_dim: usize,
    /// Direction towards the light.
    pub light: Vec3,
    pub ambient: f64,
    pub background: [f64; 3],
    pub camera_distance: f64,
    /// Radians above the horizontal plane.
    pub camera_elevation: f64,
    pub fov_x: f64,
    pub sparse_points: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec::sphere_on_plane(64)
    }
}

impl SynthSpec {
    /// A sphere resting on a square ground tile, everything inside the
    /// normalized cube.
    pub fn sphere_on_plane(feature_dim: usize) -> Self {
        SynthSpec {
            primitives: vec![
                Primitive {
                    shape: Shape::Sphere {
                        center: [0.0, 0.0, 0.1],
                        radius: 0.4,
                    },
                    albedo: [0.85, 0.35, 0.2],
                    feature: Vec::new(),
                },
                Primitive {
                    shape: Shape::Box {
                        center: [0.0, 0.0, -0.4],
                        half_extents: [0.85, 0.85, 0.1],
                    },
                    albedo: [0.3, 0.6, 0.35],
                    feature: Vec::new(),
                },
            ],
            feature_dim,
            light: normalize([0.4, 0.3, 1.0]),
            ambient: 0.3,
            background: [0.5; 3],
            camera_distance: 3.2,
            camera_elevation: PI / 6.0,
            fov_x: 50f64.to_radians(),
            sparse_points: 2000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::invalid("synthetic scene needs at least one primitive"));
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid("feature_dim must be positive"));
        }
        for p in &self.primitives {
            if !p.feature.is_empty() && p.feature.len() != self.feature_dim {
                return Err(Error::invalid(format!(
                    "primitive feature has {} entries, expected {}",
                    p.feature.len(),
                    self.feature_dim
                )));
            }
            let ok = match &p.shape {
                Shape::Sphere { radius, .. } => *radius > 0.0,
                Shape::Box { half_extents, .. } => half_extents.iter().all(|h| *h > 0.0),
                Shape::Plane { .. } => true,
            };
            if !ok {
                return Err(Error::invalid("primitive sizes must be positive"));
            }
        }
        Ok(())
    }
}

/// The analytic scene with resolved feature labels.
#[derive(Clone, Debug)]
pub struct AnalyticScene {
    pub spec: SynthSpec,
    pub labels: Vec<Vec<f64>>,
}

impl AnalyticScene {
    pub fn new(spec: SynthSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1abe);
        let labels = spec
            .primitives
            .iter()
            .map(|p| {
                if p.feature.is_empty() {
                    let v: Vec<f64> = (0..spec.feature_dim).map(|_| rng.sample(StandardNormal)).collect();
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.into_iter().map(|x| x / n).collect()
                } else {
                    p.feature.clone()
                }
            })
            .collect();
        Ok(AnalyticScene { spec, labels })
    }

    /// Signed distance and index of the closest primitive.
    pub fn sdf(&self, p: Vec3) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (i, prim) in self.spec.primitives.iter().enumerate() {
            let d = prim.shape.sdf(p);
            if d < best.0 {
                best = (d, i);
            }
        }
        best
    }

    /// First surface hit in `[t0, t1]`, as `(t, primitive)`.
    pub fn trace(&self, o: Vec3, v: Vec3, t0: f64, t1: f64) -> Option<(f64, usize)> {
        let mut t = t0;
        for _ in 0..1024 {
            let p = [0, 1, 2].map(|k| o[k] + t * v[k]);
            let (d, i) = self.sdf(p);
            if d < 1e-9 {
                return Some((t, i));
            }
            t += d;
            if t > t1 {
                return None;
            }
        }
        None
    }

    fn shade(&self, p: Vec3, prim: usize) -> [f64; 3] {
        let pr = &self.spec.primitives[prim];
        let n = pr.shape.normal(p);
        let lambert = dot(n, normalize(self.spec.light)).max(0.0);
        let k = self.spec.ambient + (1.0 - self.spec.ambient) * lambert;
        pr.albedo.map(|a| (a * k).clamp(0.0, 1.0))
    }

    /// Whether surface point `p` is seen unoccluded from `eye`.
    pub fn visible_from(&self, p: Vec3, eye: Vec3) -> bool {
        let (_, prim) = self.sdf(p);
        let n = self.spec.primitives[prim].shape.normal(p);
        let to_eye = sub(eye, p);
        if dot(n, to_eye) <= 0.0 {
            return false;
        }
        let dist = norm(to_eye);
        let v = to_eye.map(|c| -c / dist);
        match self.trace(eye, v, 0.0, dist + 1.0) {
            Some((t, _)) => (t - dist).abs() < 1e-5,
            None => false,
        }
    }

    /// `n` surface points inside the cube that at least one camera sees.
    pub fn sample_surface_points<R: Rng>(&self, n: usize, cameras: &[Camera], rng: &mut R) -> Vec<Vec3> {
        let eyes: Vec<Vec3> = cameras.iter().map(Camera::position).collect();
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n && attempts < 1000 * n.max(1) {
            attempts += 1;
            let prim = &self.spec.primitives[rng.random_range(0..self.spec.primitives.len())];
            let p = prim.shape.sample_surface(rng);
            if p.iter().any(|c| c.abs() > 1.0) || self.sdf(p).0.abs() >= 1e-6 {
                continue;
            }
            if eyes.is_empty() || eyes.iter().any(|e| self.visible_from(p, *e)) {
                out.push(p);
            }
        }
        out
    }

    /// Ground-truth color, feature label and ray distance of every pixel.
    pub fn render_view(&self, camera: &Camera) -> Result<(Rgb8Image, FeatureMap, FeatureMap)> {
        let (w, h) = (camera.width as usize, camera.height as usize);
        let c = self.spec.feature_dim;
        let pixels: Vec<(f64, f64)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x as f64 + 0.5, y as f64 + 0.5)))
            .collect();
        let rays = generate_rays(camera, &pixels)?;
        let mut rgb = Vec::with_capacity(w * h * 3);
        let mut feat = vec![0f32; w * h * c];
        let mut depth = vec![0f32; w * h];
        for (i, ray) in rays.iter().enumerate() {
            let hit = ray.and_then(|r| self.trace(r.o, r.v, r.t_near, r.t_far).map(|(t, p)| (r, t, p)));
            match hit {
                Some((r, t, prim)) => {
                    rgb.extend_from_slice(&self.shade(r.at(t), prim));
                    for (o, v) in feat[i * c..(i + 1) * c].iter_mut().zip(&self.labels[prim]) {
                        *o = *v as f32;
                    }
                    depth[i] = t as f32;
                }
                None => rgb.extend_from_slice(&self.spec.background),
            }
        }
        Ok((
            Rgb8Image::from_unit(w, h, &rgb),
            FeatureMap {
                height: h,
                width: w,
                channels: c,
                data: feat,
            },
            FeatureMap {
                height: h,
                width: w,
                channels: 1,
                data: depth,
            },
        ))
    }

    /// Cameras evenly spaced on the view circle; `phase` is a fraction of
    /// the angular step (0.5 puts views halfway between those of phase 0).
    pub fn view_circle(&self, n: usize, resolution: usize, phase: f64) -> Vec<Camera> {
        let s = &self.spec;
        (0..n)
            .map(|k| {
                let az = 2.0 * PI * (k as f64 + phase) / n as f64;
                let (ce, se) = (s.camera_elevation.cos(), s.camera_elevation.sin());
                let eye = [
                    s.camera_distance * ce * az.cos(),
                    s.camera_distance * ce * az.sin(),
                    s.camera_distance * se,
                ];
                Camera::look_at(
                    format!("view_{k:03}"),
                    eye,
                    [0.0; 3],
                    [0.0, 0.0, 1.0],
                    resolution as u32,
                    resolution as u32,
                    s.fov_x,
                )
            })
            .collect()
    }

    /// Bundle of the given cameras with ground-truth depth.
    pub fn bundle_for(&self, cameras: Vec<Camera>, sparse_points: Vec<Vec3>) -> Result<SceneBundle> {
        let mut images = Vec::with_capacity(cameras.len());
        let mut feature_maps = Vec::with_capacity(cameras.len());
        let mut depths = Vec::with_capacity(cameras.len());
        for cam in &cameras {
            let (img, feat, depth) = self.render_view(cam)?;
            images.push(img);
            feature_maps.push(feat);
            depths.push(depth);
        }
        let bundle = SceneBundle {
            cameras,
            images,
            feature_maps,
            sparse_points,
            norm_transform: Similarity::default(),
            gt_depths: Some(depths),
            plots: None,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

impl ImplicitField for AnalyticScene {
    fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    fn evaluate(&self, points: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let c = self.spec.feature_dim;
        let mut sdf = Vec::with_capacity(points.rows());
        let mut feats = Vec::with_capacity(points.rows() * c);
        for r in 0..points.rows() {
            let p = points.row_slice(r);
            let (d, i) = self.sdf([p[0], p[1], p[2]]);
            sdf.push(d);
            feats.extend_from_slice(&self.labels[i]);
        }
        Ok((sdf, Tensor::new(points.rows(), c, feats)))
    }
}

/// Synthetic scene bundle: `n_views` cameras on the view circle at
/// `resolution²` pixels, sparse points seen by those cameras.
pub fn synth_scene(spec: &SynthSpec, n_views: usize, resolution: usize, seed: u64) -> Result<(SceneBundle, AnalyticScene)> {
    if n_views == 0 || resolution == 0 {
        return Err(Error::invalid("synthetic scene needs at least one view and pixel"));
    }
    let scene = AnalyticScene::new(spec.clone(), seed)?;
    let cameras = scene.view_circle(n_views, resolution, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = scene.sample_surface_points(spec.sparse_points, &cameras, &mut rng);
    let bundle = scene.bundle_for(cameras, points)?;
    Ok((bundle, scene))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_only() -> SynthSpec {
        SynthSpec {
            primitives: vec![Primitive {
                shape: Shape::Sphere {
                    center: [0.0; 3],
                    radius: 0.5,
                },
                albedo: [1.0, 1.0, 1.0],
                feature: Vec::new(),
            }],
            feature_dim: 4,
            sparse_points: 100,
            ..SynthSpec::sphere_on_plane(4)
        }
    }

    #[test]
    fn silhouette_matches_projected_disk() {
        let scene = AnalyticScene::new(sphere_only(), 0).unwrap();
        for cam in scene.view_circle(3, 128, 0.0) {
            let (_, _, depth) = scene.render_view(&cam).unwrap();
            let count = depth.data.iter().filter(|d| **d > 0.0).count() as f64;
            let dist = norm(cam.position());
            let r_px = cam.fx * 0.5 / (dist * dist - 0.25).sqrt();
            let area = PI * r_px * r_px;
            assert!((count - area).abs() / area < 0.02, "{count} vs {area}");
        }
    }

    #[test]
    fn fronto_parallel_plane_depth() {
        let spec = SynthSpec {
            primitives: vec![Primitive {
                shape: Shape::Plane { height: -0.25 },
                albedo: [0.5; 3],
                feature: Vec::new(),
            }],
            ..sphere_only()
        };
        let scene = AnalyticScene::new(spec, 0).unwrap();
        let cam = Camera::look_at("top", [0.0, 0.0, 0.9], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0], 32, 32, 0.8);
        let (_, _, depth) = scene.render_view(&cam).unwrap();
        let d = depth.at(16, 16)[0] as f64;
        // pixel (16,16) is half a pixel off the axis; its ray is 1e-4 rad tilted
        let ray = cam.direction(16.5, 16.5);
        assert!((d - 1.15 / -ray[2]).abs() < 1e-4, "{d}");
        let center = cam.direction(16.0, 16.0);
        let t = scene.trace(cam.position(), center, 0.0, 10.0).unwrap().0;
        assert!((t - 1.15).abs() < 1e-4);
    }

    #[test]
    fn sparse_points_lie_on_surface() {
        let (bundle, scene) = synth_scene(&SynthSpec::sphere_on_plane(4), 6, 16, 3).unwrap();
        assert!(bundle.sparse_points.len() > 1000);
        for p in &bundle.sparse_points {
            assert!(scene.sdf(*p).0.abs() < 1e-6);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec {
            sparse_points: 50,
            ..SynthSpec::sphere_on_plane(3)
        };
        let a = synth_scene(&spec, 3, 12, 7).unwrap().0;
        let b = synth_scene(&spec, 3, 12, 7).unwrap().0;
        assert_eq!(a, b);
    }
}
