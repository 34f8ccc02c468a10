//! Rays, sampling, SDF-to-opacity conversion and volumetric compositing of
//! color, semantic features and depth.

mod camera;
mod volume;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use camera::{generate_rays, intersect_cube, Camera, Ray, Vec3};
pub(crate) use camera::{cross, dot, norm, normalize, sub};
pub use volume::{
    alpha_from_sdf, alphas_from_sdf_samples, alphas_from_sigma, alphas_midpoint, composite, composite_sigma,
    density_from_sdf, final_transmittance, sample_ray, RaySamples, SampleMode, PHI_FLOOR,
};

use crate::diffcore::{Axis, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::fields::{encode_rows, EncodingKind, FieldSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub samples_per_ray: usize,
    pub mode: SampleMode,
    pub background: [f64; 3],
    /// Skip the radiance and feature networks at samples whose weight is
    /// at most this value. Negative disables pruning.
    pub prune_below: f64,
    pub render_features: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            samples_per_ray: 64,
            mode: SampleMode::Stratified,
            background: [0.5; 3],
            prune_below: -1.0,
            render_features: true,
        }
    }
}

/// Composited outputs of one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderResult {
    pub color: [f64; 3],
    pub feature: Vec<f64>,
    pub depth: f64,
    pub weights: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Graph nodes of a rendered ray batch (`R` rays, `n` samples each).
#[derive(Clone, Copy, Debug)]
pub struct BatchNodes {
    /// `R×3`
    pub color: NodeId,
    /// `R×c`, present when features are rendered.
    pub feature: Option<NodeId>,
    /// `R×n`
    pub weights: NodeId,
    /// `R×n`
    pub transmittance: NodeId,
    /// `R×n`
    pub alpha: NodeId,
}

/// Builds the differentiable render of a batch of rays into `g`.
///
/// The signed distance is evaluated at every sample and once more at
/// `t_far`, so each of the `n` samples owns the segment to its successor.
pub fn render_graph(
    g: &mut Graph,
    fields: &FieldSet,
    rays: &[Ray],
    samples: &[RaySamples],
    settings: &RenderSettings,
) -> Result<BatchNodes> {
    let r = rays.len();
    if r == 0 || samples.len() != r {
        return Err(Error::invalid(format!(
            "render batch needs matching non-empty rays and samples ({} vs {})",
            r,
            samples.len()
        )));
    }
    let n = samples[0].t.len();
    if samples.iter().any(|s| s.t.len() != n) {
        return Err(Error::invalid("all rays in a batch need the same sample count"));
    }
    let enc = fields.config.encoding;
    let mut pts = Vec::with_capacity(r * n * 3);
    for s in samples {
        for x in &s.x {
            pts.extend_from_slice(x);
        }
    }
    let ends: Vec<f64> = rays.iter().flat_map(|ray| ray.at(ray.t_far)).collect();
    let dirs: Vec<f64> = rays.iter().flat_map(|ray| ray.v).collect();
    let ex = g.constant(encode_rows(&Tensor::new(r * n, 3, pts), &enc, EncodingKind::Position));
    let ee = g.constant(encode_rows(&Tensor::new(r, 3, ends), &enc, EncodingKind::Position));
    let ev_rays = encode_rows(&Tensor::new(r, 3, dirs), &enc, EncodingKind::Direction);

    let geo = fields.geometry_nodes(g, ex)?;
    let end_geo = fields.geometry_nodes(g, ee)?;
    let sdf = g.reshape(geo.sdf, r, n)?;
    let sdf = g.concat_cols(&[sdf, end_geo.sdf])?;
    let scale = fields.density_scale_node(g);
    let z = g.mul(sdf, scale)?;
    let phi = g.sigmoid(z);
    let pa = g.slice_cols(phi, 0, n)?;
    let pb = g.slice_cols(phi, 1, n)?;
    let num = g.sub(pa, pb)?;
    let den = g.clamp_min(pa, PHI_FLOOR);
    let ratio = g.div(num, den)?;
    let alpha = g.relu(ratio);
    let keep = g.neg(alpha);
    let keep = g.add_scalar(keep, 1.0);
    let trans = g.cumprod_exclusive(keep);
    let weights = g.mul(trans, alpha)?;

    // Rows that go through the radiance and feature heads.
    let (kept, scatter): (Option<Arc<[Option<u32>]>>, Option<Arc<[Option<u32>]>>) = if settings.prune_below >= 0.0 {
        let w = g.value(weights).data();
        let mut kept = Vec::new();
        let mut scatter = Vec::with_capacity(r * n);
        for (i, &wi) in w.iter().enumerate() {
            if wi > settings.prune_below {
                scatter.push(Some(kept.len() as u32));
                kept.push(Some(i as u32));
            } else {
                scatter.push(None);
            }
        }
        (Some(kept.into()), Some(scatter.into()))
    } else {
        (None, None)
    };

    let wcol = g.reshape(weights, r * n, 1)?;
    let acc = g.sum_axis(weights, Axis::Cols);
    let resid = g.neg(acc);
    let resid = g.add_scalar(resid, 1.0);

    let empty = kept.as_ref().is_some_and(|k| k.is_empty());
    let color = if empty {
        let bg = g.constant(Tensor::row(&settings.background));
        g.mul(resid, bg)?
    } else {
        let (ex_k, gf_k, dir_rows): (NodeId, NodeId, Vec<usize>) = match &kept {
            Some(k) => {
                let ex_k = g.gather_rows(ex, k.clone())?;
                let gf_k = g.gather_rows(geo.feature, k.clone())?;
                (ex_k, gf_k, k.iter().map(|i| i.unwrap() as usize / n).collect())
            }
            None => (ex, geo.feature, (0..r * n).map(|i| i / n).collect()),
        };
        let ev_data: Vec<f64> = dir_rows.iter().flat_map(|&q| ev_rays.row_slice(q).to_vec()).collect();
        let ev = g.constant(Tensor::new(dir_rows.len(), ev_rays.cols(), ev_data));
        let c_k = fields.radiance_nodes(g, ex_k, ev, gf_k)?;
        let c = match &scatter {
            Some(s) => g.gather_rows(c_k, s.clone())?,
            None => c_k,
        };
        let wc = g.mul(c, wcol)?;
        let color = g.row_group_sum(wc, n)?;
        let bg = g.constant(Tensor::row(&settings.background));
        let bgc = g.mul(resid, bg)?;
        g.add(color, bgc)?
    };

    let feature = if settings.render_features {
        let cdim = fields.config.feature_dim;
        Some(if empty {
            g.constant(Tensor::zeros(r, cdim))
        } else {
            let gf_k = match &kept {
                Some(k) => g.gather_rows(geo.feature, k.clone())?,
                None => geo.feature,
            };
            let f_k = fields.feature_nodes(g, gf_k)?;
            let f = match &scatter {
                Some(s) => g.gather_rows(f_k, s.clone())?,
                None => f_k,
            };
            let wf = g.mul(f, wcol)?;
            g.row_group_sum(wf, n)?
        })
    } else {
        None
    };

    Ok(BatchNodes {
        color,
        feature,
        weights,
        transmittance: trans,
        alpha,
    })
}

/// Expected termination distance `Σ w_i t_i / max(Σ w_i, 1e-8)`.
pub fn expected_depth(weights: &[f64], t: &[f64]) -> f64 {
    let acc: f64 = weights.iter().sum();
    weights.iter().zip(t).map(|(w, t)| w * t).sum::<f64>() / acc.max(1e-8)
}

const INFER_CHUNK: usize = 1024;

/// Render many rays without gradients; degenerate rays give the background.
pub fn render_rays<R: Rng>(
    fields: &FieldSet,
    rays: &[Option<Ray>],
    settings: &RenderSettings,
    rng: &mut R,
) -> Result<Vec<RenderResult>> {
    let n = settings.samples_per_ray;
    let cdim = fields.config.feature_dim;
    let mut out: Vec<Option<RenderResult>> = vec![None; rays.len()];
    let valid: Vec<usize> = (0..rays.len()).filter(|&i| rays[i].is_some()).collect();
    for chunk in valid.chunks(INFER_CHUNK) {
        let batch: Vec<Ray> = chunk.iter().map(|&i| rays[i].unwrap()).collect();
        let samples = batch
            .iter()
            .map(|ray| sample_ray(ray, n, settings.mode, rng))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let nodes = render_graph(&mut g, fields, &batch, &samples, settings)?;
        let color = g.value(nodes.color);
        let w = g.value(nodes.weights);
        let tr = g.value(nodes.transmittance);
        let al = g.value(nodes.alpha);
        for (j, &i) in chunk.iter().enumerate() {
            let weights = w.row_slice(j).to_vec();
            let sigma = al
                .row_slice(j)
                .iter()
                .zip(&samples[j].dt)
                .map(|(a, dt)| if *a < 1.0 { -(1.0 - a).ln() / dt } else { f64::INFINITY })
                .collect();
            out[i] = Some(RenderResult {
                color: [color.get(j, 0), color.get(j, 1), color.get(j, 2)],
                feature: match nodes.feature {
                    Some(f) => g.value(f).row_slice(j).to_vec(),
                    None => Vec::new(),
                },
                depth: expected_depth(&weights, &samples[j].t),
                weights,
                transmittance: tr.row_slice(j).to_vec(),
                sigma,
            });
        }
    }
    Ok(out
        .into_iter()
        .zip(rays)
        .map(|(r, ray)| {
            r.unwrap_or_else(|| RenderResult {
                color: settings.background,
                feature: if settings.render_features { vec![0.0; cdim] } else { Vec::new() },
                depth: ray.map(|ray| ray.t_far).unwrap_or(0.0),
                weights: Vec::new(),
                transmittance: Vec::new(),
                sigma: Vec::new(),
            })
        })
        .collect())
}

pub fn render_ray(fields: &FieldSet, ray: &Ray, settings: &RenderSettings, seed: u64) -> Result<RenderResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(render_rays(fields, &[Some(*ray)], settings, &mut rng)?.remove(0))
}

/// Full-resolution render of one camera.
#[derive(Clone, Debug)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    /// `h·w·3`, row-major.
    pub color: Vec<f64>,
    /// `h·w·c`, row-major; empty if features were not rendered.
    pub feature: Vec<f64>,
    pub feature_dim: usize,
    /// Expected distance along the ray; `t_far` or 0 for empty pixels.
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

pub fn render_image(fields: &FieldSet, camera: &Camera, settings: &RenderSettings, seed: u64) -> Result<RenderedImage> {
    let (w, h) = (camera.width as usize, camera.height as usize);
    let pixels: Vec<(f64, f64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x as f64 + 0.5, y as f64 + 0.5)))
        .collect();
    let rays = generate_rays(camera, &pixels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let results = render_rays(fields, &rays, settings, &mut rng)?;
    let (mut t_near, mut t_far) = (f64::INFINITY, 0.0f64);
    for r in rays.iter().flatten() {
        t_near = t_near.min(r.t_near);
        t_far = t_far.max(r.t_far);
    }
    if !t_near.is_finite() {
        t_near = 0.0;
    }
    let feature_dim = if settings.render_features { fields.config.feature_dim } else { 0 };
    let mut img = RenderedImage {
        width: w,
        height: h,
        color: Vec::with_capacity(w * h * 3),
        feature: Vec::with_capacity(w * h * feature_dim),
        feature_dim,
        depth: Vec::with_capacity(w * h),
        opacity: Vec::with_capacity(w * h),
        t_near,
        t_far,
    };
    for r in results {
        img.color.extend_from_slice(&r.color);
        img.feature.extend_from_slice(&r.feature);
        img.depth.push(r.depth);
        img.opacity.push(r.weights.iter().sum());
    }
    Ok(img)
}

#[cfg(test)]
mod tests;
