use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{cosine_lr, RunConfig};
use crate::bionet::{augment, voxelize, AugmentParams, BioNet, BioNetConfig, SparseVoxelGrid, SurfacePointCloud};
use crate::diffcore::{checkpoint, AdamState, Graph};
use crate::error::{Error, Result};
use crate::eval::{regression_metrics, MetricReport};
use crate::loss::{biomass_loss_graph, LossLog};
use crate::parallel::run_single_threaded;

/// A plot's surface cloud with its biomass label in grams.
#[derive(Clone, Debug)]
pub struct LabeledCloud {
    pub id: String,
    pub cloud: SurfacePointCloud,
    pub biomass: f64,
}

pub struct BioRun {
    pub net: BioNet,
    /// Batch loss of every step.
    pub history: Vec<f64>,
    /// Predictions on the training plots without augmentation.
    pub predictions: Vec<f64>,
    pub metrics: MetricReport,
}

pub fn load_bionet(config: BioNetConfig, path: &Path) -> Result<BioNet> {
    let mut net = BioNet::new(config, 0)?;
    checkpoint::load_into(&mut net.params, path)?;
    Ok(net)
}

/// Predictions and regression metrics of `net` on labeled plots.
pub fn evaluate_bionet(net: &BioNet, plots: &[LabeledCloud]) -> Result<(Vec<f64>, MetricReport)> {
    let preds = plots
        .iter()
        .map(|p| net.predict_cloud(&p.cloud))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<f64> = plots.iter().map(|p| p.biomass).collect();
    let m = regression_metrics(&preds, &gts)?;
    Ok((preds, m))
}

pub fn train_bionet(plots: &[LabeledCloud], cfg: &RunConfig, out: Option<&Path>) -> Result<BioRun> {
    if cfg.deterministic {
        run_single_threaded(|| train_inner(plots, cfg, out))
    } else {
        train_inner(plots, cfg, out)
    }
}

fn train_inner(plots: &[LabeledCloud], cfg: &RunConfig, out: Option<&Path>) -> Result<BioRun> {
    cfg.validate()?;
    let bc = &cfg.bionet;
    let first = plots.first().ok_or_else(|| Error::invalid("no training plots"))?;
    for p in plots {
        if !(p.biomass > 1.0) {
            return Err(Error::invalid(format!(
                "plot {} has biomass {} g; labels must exceed 1 gram",
                p.id, p.biomass
            )));
        }
        if p.cloud.channels != first.cloud.channels {
            return Err(Error::invalid(format!(
                "plot {} has {} feature channels, plot {} has {}",
                p.id, p.cloud.channels, first.id, first.cloud.channels
            )));
        }
    }
    let mut model = bc.model.clone();
    model.feature_dim = first.cloud.channels;
    let mut net = BioNet::new(model, cfg.seed)?;
    let labels: Vec<f64> = plots.iter().map(|p| p.biomass).collect();
    let scale = bc.output_scale.unwrap_or(labels.iter().sum::<f64>() / labels.len() as f64);
    net.set_output_scale(scale);
    let mut adam = AdamState::new(bc.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6269_6f6e);
    let fixed: Option<Vec<SparseVoxelGrid>> = if bc.augment {
        None
    } else {
        Some(
            plots
                .iter()
                .map(|p| voxelize(&p.cloud, &net.config.voxel))
                .collect::<Result<_>>()?,
        )
    };
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            cfg.save(&dir.join("config.json"))?;
            Some(LossLog::create(&dir.join("bionet_log.csv"), &["loss", "lr"])?)
        }
        None => None,
    };
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut history = Vec::with_capacity(bc.iterations);
    for step in 0..bc.iterations {
        adam.config.lr = cosine_lr(bc.optimizer.lr, bc.lr_final_ratio, step, bc.iterations);
        let mut batch = Vec::with_capacity(bc.batch_size);
        while batch.len() < bc.batch_size.min(plots.len()) {
            if cursor == order.len() {
                order = (0..plots.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        batch.sort_unstable();
        let mut g = Graph::new();
        let mut preds = Vec::with_capacity(batch.len());
        for &i in &batch {
            let owned;
            let grid = match &fixed {
                Some(grids) => &grids[i],
                None => {
                    let cloud = augment(&plots[i].cloud, &AugmentParams::sample(&mut rng))?;
                    owned = voxelize(&cloud, &net.config.voxel)?;
                    &owned
                }
            };
            let dropout = (net.config.dropout > 0.0).then_some(&mut rng);
            preds.push(net.forward_with(&mut g, &net.params, grid, dropout)?);
        }
        let m_hat = g.concat_rows(&preds)?;
        let targets: Vec<f64> = batch.iter().map(|&i| labels[i]).collect();
        let loss = biomass_loss_graph(&mut g, m_hat, &targets)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NumericalFailure {
                step,
                component: "biomass loss".into(),
                value,
            });
        }
        g.backward(loss)?;
        adam.step_graph(&mut net.params, &g).map_err(|e| match e {
            Error::NonFiniteGradient { name, .. } => Error::NumericalFailure {
                step,
                component: format!("gradient of {name}"),
                value: f64::NAN,
            },
            e => e,
        })?;
        if let Some(log) = log.as_mut() {
            log.append(step, &[value, adam.config.lr])?;
        }
        if step % 100 == 0 {
            log::info!("bionet step {step}: loss {value:.5}");
        }
        history.push(value);
        if let Some(dir) = out {
            if (step + 1) % bc.checkpoint_every == 0 && step + 1 < bc.iterations {
                checkpoint::save(&net.params, &dir.join(format!("bionet_step{:06}.nfbk", step + 1)))?;
            }
        }
    }
    let (predictions, metrics) = evaluate_bionet(&net, plots)?;
    if let Some(dir) = out {
        if let Some(log) = log.as_mut() {
            log.flush()?;
        }
        checkpoint::save(&net.params, &dir.join("bionet.nfbk"))?;
        let mc = serde_json::to_string_pretty(&net.config).expect("config serializes");
        std::fs::write(dir.join("bionet.json"), mc).map_err(|e| Error::io(dir, e))?;
        let report = serde_json::json!({ "train": metrics, "steps": bc.iterations });
        std::fs::write(dir.join("bionet_metrics.json"), report.to_string()).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BioRun {
        net,
        history,
        predictions,
        metrics,
    })
}
