use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{cross, dot, norm, sub, Camera, Vec3};

/// A crop row segment and the camera-selection windows around it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotSpec {
    pub endpoints: [Vec3; 2],
    /// Limit on `|d·v̂|`, the offset along the row (meters).
    #[serde(default = "default_along")]
    pub along_threshold: f64,
    /// Limit on `|d×v̂|`, the distance from the row line (meters).
    #[serde(default = "default_lateral")]
    pub lateral_threshold: f64,
}

fn default_along() -> f64 {
    1.5
}

fn default_lateral() -> f64 {
    7.5
}

impl PlotSpec {
    pub fn new(e1: Vec3, e2: Vec3) -> Self {
        PlotSpec {
            endpoints: [e1, e2],
            along_threshold: default_along(),
            lateral_threshold: default_lateral(),
        }
    }

    /// Row direction and center.
    pub fn axis(&self) -> Result<(Vec3, Vec3)> {
        let [a, b] = self.endpoints;
        let d = sub(b, a);
        let len = norm(d);
        if !(len > 1e-12) {
            return Err(Error::invalid("plot endpoints coincide"));
        }
        if !(self.along_threshold > 0.0 && self.lateral_threshold > 0.0) {
            return Err(Error::invalid("plot thresholds must be positive"));
        }
        let v = d.map(|c| c / len);
        let center = [0, 1, 2].map(|k| 0.5 * (a[k] + b[k]));
        Ok((v, center))
    }

    /// Along-row offset and distance from the row line of `p`.
    pub fn offsets(&self, p: Vec3) -> Result<(f64, f64)> {
        let (v, c) = self.axis()?;
        let d = sub(p, c);
        Ok((dot(d, v).abs(), norm(cross(d, v))))
    }
}

/// Indices of positions within both windows of the plot.
pub fn select_positions(positions: &[Vec3], plot: &PlotSpec) -> Result<Vec<usize>> {
    plot.axis()?;
    let mut out = Vec::new();
    for (i, p) in positions.iter().enumerate() {
        let (along, lateral) = plot.offsets(*p)?;
        if along <= plot.along_threshold && lateral <= plot.lateral_threshold {
            out.push(i);
        }
    }
    Ok(out)
}

pub fn extract_plot_views(cameras: &[Camera], plot: &PlotSpec) -> Result<Vec<usize>> {
    let pos: Vec<Vec3> = cameras.iter().map(Camera::position).collect();
    select_positions(&pos, plot)
}

/// Points within `half_length` along the row and `half_width` of the row line.
pub fn crop_plot_points(points: &[Vec3], plot: &PlotSpec, half_length: f64, half_width: f64) -> Result<Vec<Vec3>> {
    plot.axis()?;
    let mut out = Vec::new();
    for p in points {
        let (along, lateral) = plot.offsets(*p)?;
        if along <= half_length && lateral <= half_width {
            out.push(*p);
        }
    }
    if out.is_empty() {
        log::warn!("plot crop kept no points");
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotRecord {
    pub id: String,
    #[serde(flatten)]
    pub spec: PlotSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub biomass_grams: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_length: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_width: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct PlotsFile {
    plots: Vec<PlotRecord>,
}

pub fn save_plots(path: &Path, plots: &[PlotRecord]) -> Result<()> {
    let json = serde_json::to_string_pretty(&PlotsFile { plots: plots.to_vec() })
        .map_err(|e| Error::data(path, e.to_string()))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_plots(path: &Path) -> Result<Vec<PlotRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let f: PlotsFile = serde_json::from_str(&text).map_err(|e| Error::data(path, e.to_string()))?;
    for p in &f.plots {
        p.spec.axis().map_err(|e| Error::data(path, format!("plot {}: {e}", p.id)))?;
    }
    Ok(f.plots)
}
