//! Run configuration and the NeFF and BioNet training loops.

mod bio;
mod neff;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bionet::BioNetConfig;
use crate::diffcore::AdamConfig;
use crate::error::{Error, Result};
use crate::fields::FieldConfig;
use crate::loss::LossWeights;
use crate::render::SampleMode;

pub use bio::{evaluate_bionet, load_bionet, train_bionet, BioRun, LabeledCloud};
pub use neff::{load_fields, train_neff, NeffRun};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeffTrainConfig {
    pub iterations: usize,
    pub rays_per_step: usize,
    pub samples_per_ray: usize,
    pub sample_mode: SampleMode,
    pub loss: LossWeights,
    /// Sparse points drawn per step for the signed-distance term.
    pub sparse_subset: usize,
    /// Uniform points per step for the unit-gradient regularizer.
    pub eikonal_points: usize,
    pub fd_step: f64,
    pub optimizer: AdamConfig,
    /// Cosine decay of the learning rate to `lr·lr_final_ratio`.
    pub lr_final_ratio: f64,
    pub prune_below: f64,
    /// Color composited behind the scene.
    pub background: [f64; 3],
    pub checkpoint_every: usize,
}

impl Default for NeffTrainConfig {
    fn default() -> Self {
        NeffTrainConfig {
            iterations: 5000,
            rays_per_step: 512,
            samples_per_ray: 64,
            sample_mode: SampleMode::Stratified,
            loss: LossWeights::default(),
            sparse_subset: 1024,
            eikonal_points: 256,
            fd_step: 1e-3,
            optimizer: AdamConfig::default(),
            lr_final_ratio: 1.0,
            prune_below: -1.0,
            background: [0.5; 3],
            checkpoint_every: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BioTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub grid_res: usize,
    pub tau: f64,
    pub augment: bool,
    pub model: BioNetConfig,
    pub optimizer: AdamConfig,
    pub lr_final_ratio: f64,
    /// Multiplier of the softplus head; `null` uses the mean training label.
    pub output_scale: Option<f64>,
    pub checkpoint_every: usize,
}

impl Default for BioTrainConfig {
    fn default() -> Self {
        BioTrainConfig {
            iterations: 2000,
            batch_size: 4,
            grid_res: 128,
            tau: 0.01,
            augment: true,
            model: BioNetConfig::default(),
            optimizer: AdamConfig {
                lr: 1e-4,
                ..AdamConfig::default()
            },
            lr_final_ratio: 1.0,
            output_scale: None,
            checkpoint_every: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: Option<PathBuf>,
    pub output: PathBuf,
    pub seed: u64,
    pub deterministic: bool,
    pub fields: FieldConfig,
    pub neff: NeffTrainConfig,
    pub bionet: BioTrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: None,
            output: PathBuf::from("run"),
            seed: 0,
            deterministic: false,
            fields: FieldConfig::default(),
            neff: NeffTrainConfig::default(),
            bionet: BioTrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Applies `key=value` overrides; keys are dotted paths such as
    /// `neff.loss.beta`. Values parse as JSON, falling back to a string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut v, key, value)?;
        }
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.fields.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.bionet.model.validate()?;
        let n = &self.neff;
        let b = &self.bionet;
        let positive = [
            ("neff.rays_per_step", n.rays_per_step),
            ("neff.samples_per_ray", n.samples_per_ray),
            ("neff.checkpoint_every", n.checkpoint_every),
            ("bionet.batch_size", b.batch_size),
            ("bionet.checkpoint_every", b.checkpoint_every),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        n.loss.validate().map_err(|e| Error::Config(e.to_string()))?;
        if b.grid_res < 16 {
            return Err(Error::Config(format!("bionet.grid_res must be at least 16, got {}", b.grid_res)));
        }
        let floats = [
            ("neff.fd_step", n.fd_step),
            ("neff.optimizer.lr", n.optimizer.lr),
            ("neff.lr_final_ratio", n.lr_final_ratio),
            ("bionet.tau", b.tau),
            ("bionet.optimizer.lr", b.optimizer.lr),
            ("bionet.lr_final_ratio", b.lr_final_ratio),
        ];
        for (k, v) in floats {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if let Some(s) = b.output_scale {
            if !(s > 0.0) {
                return Err(Error::Config(format!("bionet.output_scale must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a section", parts[..i].join("."))))?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).expect("checked above");
    }
    Err(Error::Config("empty config key".into()))
}

/// Learning rate at `step` of `total` under cosine decay.
pub(crate) fn cosine_lr(base: f64, final_ratio: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let t = step as f64 / (total - 1) as f64;
    let f = final_ratio + (1.0 - final_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
    base * f
}
