use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{cosine_lr, RunConfig};
use crate::dataio::SceneBundle;
use crate::diffcore::{checkpoint, AdamState, Graph, Tensor};
use crate::error::{Error, Result};
use crate::fields::{FieldConfig, FieldSet};
use crate::loss::{neff_loss_graph, LossLog, NeffTerms};
use crate::parallel::run_single_threaded;
use crate::render::{generate_rays, render_graph, sample_ray, Ray, RenderSettings};

pub struct NeffRun {
    pub fields: FieldSet,
    /// Loss components of every step, in order.
    pub history: Vec<NeffTerms>,
}

/// Fields built from `cfg` with the feature dimension of the scene.
fn field_config(bundle: &SceneBundle, cfg: &RunConfig) -> FieldConfig {
    let mut fc = cfg.fields.clone();
    let c = bundle.feature_dim();
    if fc.feature_dim != c {
        log::info!("feature_dim {} replaced by the scene's {c}", fc.feature_dim);
        fc.feature_dim = c;
    }
    fc
}

/// Loads a field checkpoint written by [`train_neff`].
pub fn load_fields(config: FieldConfig, path: &Path) -> Result<FieldSet> {
    let mut fields = FieldSet::new(config, 0)?;
    checkpoint::load_into(&mut fields.params, path)?;
    Ok(fields)
}

/// Optimizes the three field networks on a scene bundle. With `out`, the
/// per-step CSV log and `NFBK` checkpoints are written there.
pub fn train_neff(bundle: &SceneBundle, cfg: &RunConfig, out: Option<&Path>) -> Result<NeffRun> {
    if cfg.deterministic {
        run_single_threaded(|| train_inner(bundle, cfg, out))
    } else {
        train_inner(bundle, cfg, out)
    }
}

struct PixelPool {
    offsets: Vec<usize>,
    total: usize,
}

impl PixelPool {
    fn new(bundle: &SceneBundle) -> Self {
        let mut offsets = Vec::with_capacity(bundle.images.len());
        let mut total = 0;
        for img in &bundle.images {
            offsets.push(total);
            total += img.width * img.height;
        }
        PixelPool { offsets, total }
    }

    /// `(image, x, y)` of a global pixel index.
    fn locate(&self, bundle: &SceneBundle, p: usize) -> (usize, usize, usize) {
        let i = self.offsets.partition_point(|&o| o <= p) - 1;
        let local = p - self.offsets[i];
        let w = bundle.images[i].width;
        (i, local % w, local / w)
    }
}

fn train_inner(bundle: &SceneBundle, cfg: &RunConfig, out: Option<&Path>) -> Result<NeffRun> {
    cfg.validate()?;
    bundle.validate()?;
    let nc = &cfg.neff;
    let mut fields = FieldSet::new(field_config(bundle, cfg), cfg.seed)?;
    let mut adam = AdamState::new(nc.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e65_6666);
    let pool = PixelPool::new(bundle);
    if pool.total == 0 {
        return Err(Error::invalid("scene has no pixels"));
    }
    let settings = RenderSettings {
        samples_per_ray: nc.samples_per_ray,
        mode: nc.sample_mode,
        background: nc.background,
        prune_below: nc.prune_below,
        render_features: true,
    };
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            cfg.save(&dir.join("config.json"))?;
            Some(LossLog::create(
                &dir.join("neff_log.csv"),
                &["total", "color", "feature", "geometry", "eikonal", "density_scale", "lr"],
            )?)
        }
        None => None,
    };
    let c = fields.config.feature_dim;
    let mut history = Vec::with_capacity(nc.iterations);
    for step in 0..nc.iterations {
        adam.config.lr = cosine_lr(nc.optimizer.lr, nc.lr_final_ratio, step, nc.iterations);
        let mut picks: Vec<usize> = (0..nc.rays_per_step).map(|_| rng.random_range(0..pool.total)).collect();
        picks.sort_unstable();
        let mut rays: Vec<Ray> = Vec::with_capacity(picks.len());
        let mut gt_c = Vec::with_capacity(picks.len() * 3);
        let mut gt_f = Vec::with_capacity(picks.len() * c);
        for p in picks {
            let (i, x, y) = pool.locate(bundle, p);
            let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
            if let Some(ray) = generate_rays(&bundle.cameras[i], &[(u, v)])?[0] {
                rays.push(ray);
                gt_c.extend_from_slice(&bundle.images[i].pixel(x, y));
                let img = &bundle.images[i];
                bundle.feature_maps[i].sample_bilinear(u, v, img.width, img.height, &mut gt_f);
            }
        }
        if rays.is_empty() {
            log::warn!("step {step}: no sampled ray meets the scene cube");
            continue;
        }
        let samples = rays
            .iter()
            .map(|r| sample_ray(r, nc.samples_per_ray, nc.sample_mode, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let nodes = render_graph(&mut g, &fields, &rays, &samples, &settings)?;
        let sparse = if nc.loss.beta > 0.0 && !bundle.sparse_points.is_empty() && nc.sparse_subset > 0 {
            let k = nc.sparse_subset.min(bundle.sparse_points.len());
            let mut idx = sample_indices(&mut rng, bundle.sparse_points.len(), k).into_vec();
            idx.sort_unstable();
            let pts: Vec<f64> = idx.iter().flat_map(|&i| bundle.sparse_points[i]).collect();
            let x = g.constant(Tensor::new(k, 3, pts));
            Some(fields.geometry_at(&mut g, x)?.sdf)
        } else {
            None
        };
        let eik = if nc.loss.eikonal > 0.0 && nc.eikonal_points > 0 {
            let pts: Vec<f64> = (0..nc.eikonal_points * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            Some(fields.sdf_gradient_fd(&mut g, &Tensor::new(nc.eikonal_points, 3, pts), nc.fd_step)?)
        } else {
            None
        };
        let rows = rays.len();
        let gt_c = Tensor::new(rows, 3, gt_c);
        let gt_f = Tensor::new(rows, c, gt_f);
        let feature = nodes.feature.map(|f| (f, &gt_f));
        let loss = neff_loss_graph(&mut g, nodes.color, &gt_c, feature, sparse, eik, &nc.loss)?;
        let terms = loss.values(&g);
        for (name, v) in [
            ("color loss", terms.color),
            ("feature loss", terms.feature),
            ("geometry loss", terms.geometry),
            ("eikonal loss", terms.eikonal),
            ("total loss", terms.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NumericalFailure {
                    step,
                    component: name.into(),
                    value: v,
                });
            }
        }
        g.backward(loss.total)?;
        adam.step_graph(&mut fields.params, &g).map_err(|e| match e {
            Error::NonFiniteGradient { name, .. } => Error::NumericalFailure {
                step,
                component: format!("gradient of {name}"),
                value: f64::NAN,
            },
            e => e,
        })?;
        if let Some(log) = log.as_mut() {
            log.append(
                step,
                &[
                    terms.total,
                    terms.color,
                    terms.feature,
                    terms.geometry,
                    terms.eikonal,
                    fields.density_scale(),
                    adam.config.lr,
                ],
            )?;
        }
        if step % 100 == 0 {
            log::info!(
                "neff step {step}: total {:.5} color {:.5} feature {:.5} geometry {:.5}",
                terms.total,
                terms.color,
                terms.feature,
                terms.geometry
            );
        }
        history.push(terms);
        if let Some(dir) = out {
            if (step + 1) % nc.checkpoint_every == 0 && step + 1 < nc.iterations {
                checkpoint::save(&fields.params, &dir.join(format!("neff_step{:06}.nfbk", step + 1)))?;
            }
        }
    }
    if let Some(dir) = out {
        if let Some(log) = log.as_mut() {
            log.flush()?;
        }
        checkpoint::save(&fields.params, &dir.join("neff.nfbk"))?;
        let fc = serde_json::to_string_pretty(&fields.config).expect("config serializes");
        std::fs::write(dir.join("fields.json"), fc).map_err(|e| Error::io(dir, e))?;
    }
    Ok(NeffRun { fields, history })
}
