//! Training objectives for the fields and for the biomass regressor.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffcore::{Axis, Graph, NodeId, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the color term.
    pub alpha: f64,
    /// Weight of the sparse-point signed-distance term.
    pub beta: f64,
    /// Weight of the unit-gradient regularizer; 0 turns it off.
    pub eikonal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.1,
            eikonal: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.eikonal].iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {self:?}")));
        }
        Ok(())
    }
}

/// Scalar loss nodes of one training step.
#[derive(Clone, Copy, Debug)]
pub struct NeffLossNodes {
    pub total: NodeId,
    pub color: NodeId,
    pub feature: Option<NodeId>,
    pub geometry: Option<NodeId>,
    pub eikonal: Option<NodeId>,
}

/// Loss values of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NeffTerms {
    pub color: f64,
    pub feature: f64,
    pub geometry: f64,
    pub eikonal: f64,
    pub total: f64,
}

impl NeffLossNodes {
    pub fn values(&self, g: &Graph) -> NeffTerms {
        let v = |n: Option<NodeId>| n.map(|n| g.value(n).item()).unwrap_or(0.0);
        NeffTerms {
            color: g.value(self.color).item(),
            feature: v(self.feature),
            geometry: v(self.geometry),
            eikonal: v(self.eikonal),
            total: g.value(self.total).item(),
        }
    }
}

fn mean_l1(g: &mut Graph, pred: NodeId, target: NodeId) -> Result<NodeId> {
    let d = g.sub(pred, target)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// `L_f + α·L_c + β·L_g + λ·mean((|∇F_g| − 1)²)`.
///
/// `color` is `R×3` and `gt_colors` must match it; `sparse_sdf` holds `F_g`
/// at supervision points (`k×1`), `sdf_gradient` holds `∇F_g` at random
/// points (`m×3`).
pub fn neff_loss_graph(
    g: &mut Graph,
    color: NodeId,
    gt_colors: &Tensor,
    feature: Option<(NodeId, &Tensor)>,
    sparse_sdf: Option<NodeId>,
    sdf_gradient: Option<NodeId>,
    weights: &LossWeights,
) -> Result<NeffLossNodes> {
    weights.validate()?;
    if g.shape(color).rows == 0 {
        return Err(Error::invalid("empty ray batch"));
    }
    let gt = g.constant(gt_colors.clone());
    let lc = mean_l1(g, color, gt)?;
    let mut total = g.scale(lc, weights.alpha);
    let mut out = NeffLossNodes {
        total,
        color: lc,
        feature: None,
        geometry: None,
        eikonal: None,
    };
    if let Some((f, gt_f)) = feature {
        let gt_f = g.constant(gt_f.clone());
        let lf = mean_l1(g, f, gt_f)?;
        total = g.add(total, lf)?;
        out.feature = Some(lf);
    }
    match sparse_sdf {
        Some(s) if g.shape(s).rows > 0 => {
            let a = g.abs(s);
            let lg = g.mean(a);
            let term = g.scale(lg, weights.beta);
            total = g.add(total, term)?;
            out.geometry = Some(lg);
        }
        Some(_) => log::warn!("sparse point set is empty; geometry loss is 0"),
        None => {}
    }
    if let Some(grad) = sdf_gradient.filter(|_| weights.eikonal > 0.0) {
        let sq = g.square(grad);
        let n2 = g.sum_axis(sq, Axis::Cols);
        let n2 = g.add_scalar(n2, 1e-12);
        let n = g.sqrt(n2);
        let d = g.add_scalar(n, -1.0);
        let d2 = g.square(d);
        let le = g.mean(d2);
        let term = g.scale(le, weights.eikonal);
        total = g.add(total, term)?;
        out.eikonal = Some(le);
    }
    out.total = total;
    Ok(out)
}

/// Value-level form of [`neff_loss_graph`] without the eikonal term.
pub fn neff_loss(
    colors: &[[f64; 3]],
    gt_colors: &[[f64; 3]],
    features: &[Vec<f64>],
    gt_features: &[Vec<f64>],
    sparse_sdf: &[f64],
    weights: &LossWeights,
) -> Result<NeffTerms> {
    if colors.is_empty() {
        return Err(Error::invalid("empty ray batch"));
    }
    if colors.len() != gt_colors.len() || features.len() != gt_features.len() {
        return Err(Error::invalid("rendered and ground-truth batch sizes differ"));
    }
    if gt_colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::invalid("ground-truth colors must lie in [0,1]"));
    }
    let mut g = Graph::new();
    let flat = |v: &[[f64; 3]]| Tensor::new(v.len(), 3, v.iter().flatten().copied().collect());
    let c = g.constant(flat(colors));
    let gtf;
    let feature = if features.is_empty() {
        None
    } else {
        let dim = features[0].len();
        if features.iter().chain(gt_features).any(|f| f.len() != dim) {
            return Err(Error::invalid("feature dimensions differ within the batch"));
        }
        let f = g.constant(Tensor::new(features.len(), dim, features.concat()));
        gtf = Tensor::new(gt_features.len(), dim, gt_features.concat());
        Some((f, &gtf))
    };
    let s = g.constant(Tensor::column(sparse_sdf));
    let nodes = neff_loss_graph(&mut g, c, &flat(gt_colors), feature, Some(s), None, weights)?;
    Ok(nodes.values(&g))
}

/// `0.5·x²/th` inside the threshold, `|x| − 0.5·th` outside.
pub fn smooth_l1(x: f64, threshold: f64) -> f64 {
    let a = x.abs();
    if a < threshold {
        0.5 * x * x / threshold
    } else {
        a - 0.5 * threshold
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiomassSample {
    /// Ground truth in grams.
    pub m: f64,
    pub m_hat: f64,
}

fn check_mass(m: f64) -> Result<()> {
    if !(m > 1.0 && m.is_finite()) {
        return Err(Error::invalid(format!(
            "ground-truth biomass must exceed 1 (grams expected), got {m}"
        )));
    }
    Ok(())
}

/// `mean smooth_l1((m̂ − m) / ln m)`.
pub fn biomass_loss(batch: &[BiomassSample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty biomass batch"));
    }
    let mut acc = 0.0;
    for s in batch {
        check_mass(s.m)?;
        acc += smooth_l1((s.m_hat - s.m) / s.m.ln(), 1.0);
    }
    Ok(acc / batch.len() as f64)
}

/// Graph form of [`biomass_loss`] for predictions `B×1`.
pub fn biomass_loss_graph(g: &mut Graph, m_hat: NodeId, m: &[f64]) -> Result<NodeId> {
    if m.is_empty() {
        return Err(Error::invalid("empty biomass batch"));
    }
    for &v in m {
        check_mass(v)?;
    }
    let target = g.constant(Tensor::column(m));
    let inv_log = g.constant(Tensor::column(&m.iter().map(|v| 1.0 / v.ln()).collect::<Vec<_>>()));
    let d = g.sub(m_hat, target)?;
    let x = g.mul(d, inv_log)?;
    let l = g.smooth_l1(x, 1.0);
    Ok(g.mean(l))
}

/// Per-step CSV log of loss components.
pub struct LossLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LossLog {
    pub fn create(path: &Path, columns: &[&str]) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "step,{}", columns.join(",")).map_err(|e| Error::io(path, e))?;
        Ok(LossLog {
            path: path.to_path_buf(),
            out,
        })
    }

    pub fn append(&mut self, step: usize, values: &[f64]) -> Result<()> {
        let row: Vec<String> = values.iter().map(|v| format!("{v:.9e}")).collect();
        writeln!(self.out, "{step},{}", row.join(",")).map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}
