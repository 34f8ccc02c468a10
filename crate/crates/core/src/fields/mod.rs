//! Geometry, radiance and semantic-feature neural fields.
//!
//! The geometry network maps an encoded point to a signed distance and a
//! geometry feature vector. The feature network reads only that geometry
//! feature (so semantic features are view independent), while the radiance
//! network reads the encoded point, the encoded viewing direction and the
//! geometry feature.

mod encoding;
mod mlp;

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use encoding::{encode_node, encode_rows, positional_encode, EncodingKind, EncodingSpec};
pub use mlp::{Activation, Linear, Mlp};

use crate::diffcore::{glorot_uniform, he_normal, normal_tensor, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// `density_scale = exp(DENSITY_LOG_GAIN · θ)` for the stored parameter θ.
pub const DENSITY_LOG_GAIN: f64 = 10.0;

/// How points outside the normalized scene cube are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundsMode {
    Strict,
    Clamp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub encoding: EncodingSpec,
    pub geometry_layers: usize,
    pub geometry_width: usize,
    pub geometry_feature_dim: usize,
    pub feature_layers: usize,
    pub feature_width: usize,
    /// Semantic feature dimension `c`.
    pub feature_dim: usize,
    pub radiance_layers: usize,
    pub radiance_width: usize,
    /// Radius of the sphere the geometry network starts as.
    pub init_radius: f64,
    /// Standard deviation (scene units) of the logistic density at init.
    pub init_density_std: f64,
    pub softplus_beta: f64,
    pub bounds: BoundsMode,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            encoding: EncodingSpec::default(),
            geometry_layers: 8,
            geometry_width: 256,
            geometry_feature_dim: 256,
            feature_layers: 2,
            feature_width: 256,
            feature_dim: 64,
            radiance_layers: 4,
            radiance_width: 256,
            init_radius: 0.5,
            init_density_std: 0.3,
            softplus_beta: 100.0,
            bounds: BoundsMode::Clamp,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("geometry_layers", self.geometry_layers),
            ("geometry_width", self.geometry_width),
            ("geometry_feature_dim", self.geometry_feature_dim),
            ("feature_layers", self.feature_layers),
            ("feature_width", self.feature_width),
            ("feature_dim", self.feature_dim),
            ("radiance_layers", self.radiance_layers),
            ("radiance_width", self.radiance_width),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("fields.{name} must be positive")));
        }
        if !(self.init_density_std > 0.0 && self.softplus_beta > 0.0 && self.init_radius > 0.0) {
            return Err(Error::Config(
                "fields.init_density_std, softplus_beta and init_radius must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Something that yields signed distances and semantic features at points.
pub trait ImplicitField: Sync {
    fn feature_dim(&self) -> usize;

    /// Signed distances and `n×c` features at the rows of an `n×3` tensor.
    fn evaluate(&self, points: &Tensor) -> Result<(Vec<f64>, Tensor)>;

    /// Signed distances only.
    fn sdf(&self, points: &Tensor) -> Result<Vec<f64>> {
        Ok(self.evaluate(points)?.0)
    }
}

/// Geometry `F_g`, semantic feature `F_f` and radiance `F_c` networks plus
/// the density sharpness, with their parameters.
#[derive(Clone, Debug)]
pub struct FieldSet {
    pub config: FieldConfig,
    pub params: ParamStore,
    pub geometry: Mlp,
    pub feature: Mlp,
    pub radiance: Mlp,
    pub density_param: ParamId,
}

/// Graph nodes produced by the geometry network.
#[derive(Clone, Copy, Debug)]
pub struct GeometryNodes {
    /// `n×1`
    pub sdf: NodeId,
    /// `n×geometry_feature_dim`
    pub feature: NodeId,
}

fn build_mlp(
    store: &mut ParamStore,
    prefix: &str,
    dims: &[usize],
    activation: Activation,
    rng: &mut ChaCha8Rng,
) -> Mlp {
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let last = i + 2 == dims.len();
            let weight = if last {
                glorot_uniform(rng, w[0], w[1])
            } else {
                he_normal(rng, w[0], w[1])
            };
            Linear::new(store, &format!("{prefix}.{i}"), weight, Tensor::zeros(1, w[1]))
        })
        .collect();
    Mlp { layers, activation }
}

impl FieldSet {
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let enc = config.encoding;
        let pos_dim = enc.encoded_dim(3, EncodingKind::Position);
        let dir_dim = enc.encoded_dim(3, EncodingKind::Direction);
        let geometry = geometric_init_mlp(&mut params, &config, pos_dim, &mut rng);
        calibrate_sphere_readout(&mut params, &geometry, &config, &mut rng)?;

        let mut fdims = vec![config.geometry_feature_dim];
        fdims.extend(std::iter::repeat_n(config.feature_width, config.feature_layers));
        fdims.push(config.feature_dim);
        let feature = build_mlp(&mut params, "ff", &fdims, Activation::Relu, &mut rng);

        let mut cdims = vec![pos_dim + dir_dim + config.geometry_feature_dim];
        cdims.extend(std::iter::repeat_n(config.radiance_width, config.radiance_layers));
        cdims.push(3);
        let radiance = build_mlp(&mut params, "fc", &cdims, Activation::Relu, &mut rng);

        // logistic std = π / (√3 · scale)
        let scale0 = PI / (3f64.sqrt() * config.init_density_std);
        let density_param = params.add("density_scale", Tensor::scalar(scale0.ln() / DENSITY_LOG_GAIN));
        Ok(FieldSet {
            config,
            params,
            geometry,
            feature,
            radiance,
            density_param,
        })
    }

    /// Current sharpness of the sigmoid `Φ(scale·s)`; always positive.
    pub fn density_scale(&self) -> f64 {
        (DENSITY_LOG_GAIN * self.params.value(self.density_param).item()).exp()
    }

    pub fn density_scale_node(&self, g: &mut Graph) -> NodeId {
        let p = g.param(&self.params, self.density_param);
        let z = g.scale(p, DENSITY_LOG_GAIN);
        g.exp(z)
    }

    pub fn geometry_nodes(&self, g: &mut Graph, encoded_x: NodeId) -> Result<GeometryNodes> {
        let out = self.geometry.forward(g, &self.params, encoded_x)?;
        let sdf = g.slice_cols(out, 0, 1)?;
        let feature = g.slice_cols(out, 1, self.config.geometry_feature_dim)?;
        Ok(GeometryNodes { sdf, feature })
    }

    /// Geometry of raw `n×3` points (encoded inside the graph, so gradients
    /// reach the points when they are differentiable).
    pub fn geometry_at(&self, g: &mut Graph, x: NodeId) -> Result<GeometryNodes> {
        let enc = encode_node(g, x, &self.config.encoding, EncodingKind::Position)?;
        self.geometry_nodes(g, enc)
    }

    pub fn feature_nodes(&self, g: &mut Graph, geometry_feature: NodeId) -> Result<NodeId> {
        self.feature.forward(g, &self.params, geometry_feature)
    }

    /// Colors in `[0,1]³` for encoded points, encoded directions and
    /// geometry features (all with the same row count).
    pub fn radiance_nodes(
        &self,
        g: &mut Graph,
        encoded_x: NodeId,
        encoded_v: NodeId,
        geometry_feature: NodeId,
    ) -> Result<NodeId> {
        let input = g.concat_cols(&[encoded_x, encoded_v, geometry_feature])?;
        let raw = self.radiance.forward(g, &self.params, input)?;
        Ok(g.sigmoid(raw))
    }

    fn check_point(&self, x: [f64; 3]) -> Result<[f64; 3]> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite point {x:?}")));
        }
        let inside = x.iter().all(|v| (-1.0..=1.0).contains(v));
        match (inside, self.config.bounds) {
            (true, _) => Ok(x),
            (false, BoundsMode::Clamp) => Ok(x.map(|v| v.clamp(-1.0, 1.0))),
            (false, BoundsMode::Strict) => Err(Error::invalid(format!(
                "point {x:?} lies outside the scene cube [-1,1]^3"
            ))),
        }
    }

    /// Signed distance and geometry feature at one point.
    pub fn eval_geometry(&self, x: [f64; 3]) -> Result<(f64, Vec<f64>)> {
        let x = self.check_point(x)?;
        let mut g = Graph::new();
        let xn = g.constant(Tensor::row(&x));
        let geo = self.geometry_at(&mut g, xn)?;
        Ok((g.value(geo.sdf).item(), g.value(geo.feature).data().to_vec()))
    }

    pub fn eval_feature(&self, geometry_feature: &[f64]) -> Result<Vec<f64>> {
        if geometry_feature.len() != self.config.geometry_feature_dim {
            return Err(Error::invalid(format!(
                "geometry feature has {} entries, expected {}",
                geometry_feature.len(),
                self.config.geometry_feature_dim
            )));
        }
        let mut g = Graph::new();
        let gf = g.constant(Tensor::row(geometry_feature));
        let f = self.feature_nodes(&mut g, gf)?;
        Ok(g.value(f).data().to_vec())
    }

    pub fn eval_radiance(&self, x: [f64; 3], v: [f64; 3], geometry_feature: &[f64]) -> Result<[f64; 3]> {
        let x = self.check_point(x)?;
        let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "viewing direction must be unit length, |v| = {norm}"
            )));
        }
        if geometry_feature.len() != self.config.geometry_feature_dim {
            return Err(Error::invalid("geometry feature dimension mismatch"));
        }
        let enc = self.config.encoding;
        let mut g = Graph::new();
        let ex = g.constant(Tensor::row(&positional_encode(&x, &enc, EncodingKind::Position)));
        let ev = g.constant(Tensor::row(&positional_encode(&v, &enc, EncodingKind::Direction)));
        let gf = g.constant(Tensor::row(geometry_feature));
        let c = self.radiance_nodes(&mut g, ex, ev, gf)?;
        let d = g.value(c).data();
        Ok([d[0], d[1], d[2]])
    }

    /// Signed distances of many points, evaluated in chunks.
    pub fn query_sdf(&self, points: &Tensor) -> Result<Vec<f64>> {
        let (s, _) = self.query_chunks(points, false)?;
        Ok(s)
    }

    fn query_chunks(&self, points: &Tensor, with_features: bool) -> Result<(Vec<f64>, Tensor)> {
        const CHUNK: usize = 8192;
        let n = points.rows();
        let c = self.config.feature_dim;
        let mut sdf = Vec::with_capacity(n);
        let mut feats = Vec::with_capacity(if with_features { n * c } else { 0 });
        for lo in (0..n).step_by(CHUNK) {
            let hi = (lo + CHUNK).min(n);
            let chunk = Tensor::new(hi - lo, 3, points.data()[lo * 3..hi * 3].to_vec());
            let enc = encode_rows(&chunk, &self.config.encoding, EncodingKind::Position);
            let mut g = Graph::new();
            let e = g.constant(enc);
            let geo = self.geometry_nodes(&mut g, e)?;
            sdf.extend_from_slice(g.value(geo.sdf).data());
            if with_features {
                let f = self.feature_nodes(&mut g, geo.feature)?;
                feats.extend_from_slice(g.value(f).data());
            }
        }
        let ft = if with_features {
            Tensor::new(n, c, feats)
        } else {
            Tensor::zeros(0, c)
        };
        Ok((sdf, ft))
    }

    /// Central-difference estimate of `∇F_g` at the rows of `points` (`m×3`),
    /// built from ordinary graph ops so it is differentiable in the
    /// parameters.
    pub fn sdf_gradient_fd(&self, g: &mut Graph, points: &Tensor, h: f64) -> Result<NodeId> {
        let m = points.rows();
        let mut shifted = Vec::with_capacity(6 * m * 3);
        for axis in 0..3 {
            for sign in [1.0, -1.0] {
                for r in 0..m {
                    let mut p = [points.get(r, 0), points.get(r, 1), points.get(r, 2)];
                    p[axis] += sign * h;
                    shifted.extend_from_slice(&p);
                }
            }
        }
        let enc = encode_rows(
            &Tensor::new(6 * m, 3, shifted),
            &self.config.encoding,
            EncodingKind::Position,
        );
        let e = g.constant(enc);
        let geo = self.geometry_nodes(g, e)?;
        let mut cols = Vec::with_capacity(3);
        for axis in 0..3 {
            let plus = g.slice_rows(geo.sdf, 2 * axis * m, m)?;
            let minus = g.slice_rows(geo.sdf, (2 * axis + 1) * m, m)?;
            let d = g.sub(plus, minus)?;
            cols.push(g.scale(d, 0.5 / h));
        }
        g.concat_cols(&cols)
    }
}

impl ImplicitField for FieldSet {
    fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn evaluate(&self, points: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        self.query_chunks(points, true)
    }

    fn sdf(&self, points: &Tensor) -> Result<Vec<f64>> {
        self.query_sdf(points)
    }
}

/// Geometry MLP initialized so that `F_g(x) ≈ |x| − r`.
///
/// Hidden weights are `N(0, 2/out)`, the first layer only sees the raw
/// coordinates, and the signed-distance column of the head has mean
/// `√π/√width` with bias `−r`.
fn geometric_init_mlp(store: &mut ParamStore, cfg: &FieldConfig, pos_dim: usize, rng: &mut ChaCha8Rng) -> Mlp {
    let width = cfg.geometry_width;
    let out_dim = 1 + cfg.geometry_feature_dim;
    let mut dims = vec![pos_dim];
    dims.extend(std::iter::repeat_n(width, cfg.geometry_layers));
    dims.push(out_dim);
    let raw_rows = if cfg.encoding.include_raw { 3 } else { 0 };
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for (i, w) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let name = format!("fg.{i}");
        let last = i + 2 == dims.len();
        let (weight, bias) = if last {
            let mut wt = Tensor::zeros(fan_in, fan_out);
            let sdf_col = normal_tensor(rng, fan_in, 1, PI.sqrt() / (fan_in as f64).sqrt(), 1e-4);
            let feat = he_normal(rng, fan_in, fan_out - 1);
            for r in 0..fan_in {
                wt.set(r, 0, sdf_col.get(r, 0));
                for c in 1..fan_out {
                    wt.set(r, c, feat.get(r, c - 1));
                }
            }
            let mut b = Tensor::zeros(1, fan_out);
            b.set(0, 0, -cfg.init_radius);
            (wt, b)
        } else if i == 0 {
            let std = 2f64.sqrt() / (fan_out as f64).sqrt();
            let mut wt = Tensor::zeros(fan_in, fan_out);
            let raw = normal_tensor(rng, raw_rows.max(1), fan_out, 0.0, std);
            for r in 0..raw_rows {
                for c in 0..fan_out {
                    wt.set(r, c, raw.get(r, c));
                }
            }
            (wt, Tensor::zeros(1, fan_out))
        } else {
            let std = 2f64.sqrt() / (fan_out as f64).sqrt();
            (normal_tensor(rng, fan_in, fan_out, 0.0, std), Tensor::zeros(1, fan_out))
        };
        layers.push(Linear::new(store, &name, weight, bias));
    }
    Mlp {
        layers,
        activation: Activation::Softplus(cfg.softplus_beta),
    }
}

/// Refit the signed-distance column of the geometry head to `|x| − r` by
/// ridge regression on the penultimate activations, shrinking towards the
/// random initial column.
///
/// Without this a deep, skip-free network only matches the sphere in
/// expectation over initializations; single draws are off by up to 0.5.
fn calibrate_sphere_readout(
    store: &mut ParamStore,
    geometry: &Mlp,
    cfg: &FieldConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;

    let head = geometry.layers.last().expect("geometry net has layers");
    let width = head.in_dim;
    let n = (16 * (width + 1)).max(2048);
    let pts: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let pts = Tensor::new(n, 3, pts);
    let trunk = Mlp {
        layers: geometry.layers[..geometry.layers.len() - 1].to_vec(),
        activation: geometry.activation,
    };
    let mut g = Graph::new();
    let e = g.constant(encode_rows(&pts, &cfg.encoding, EncodingKind::Position));
    let h = trunk.forward(&mut g, store, e)?;
    let h = match trunk.activation {
        Activation::Relu => g.relu(h),
        Activation::Softplus(beta) => g.softplus(h, beta),
    };
    let hv = g.value(h);

    let k = width + 1;
    let design = DMatrix::from_fn(n, k, |r, c| if c < width { hv.get(r, c) } else { 1.0 });
    let target = DVector::from_fn(n, |r, _| {
        let p = pts.row_slice(r);
        (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - cfg.init_radius
    });
    let w0 = store.value(head.weight);
    let prior = DVector::from_fn(k, |r, _| if r < width { w0.get(r, 0) } else { -cfg.init_radius });
    let mut normal = design.tr_mul(&design);
    let lambda = 1e-6 * normal.trace() / k as f64;
    for i in 0..k {
        normal[(i, i)] += lambda;
    }
    let rhs = design.tr_mul(&target) + prior * lambda;
    let sol = normal
        .cholesky()
        .ok_or_else(|| Error::NumericalFailure {
            step: 0,
            component: "geometry init".into(),
            value: f64::NAN,
        })?
        .solve(&rhs);
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("sphere calibration produced non-finite weights"));
    }
    let weight = store.value_mut(head.weight);
    for r in 0..width {
        weight.set(r, 0, sol[r]);
    }
    store.value_mut(head.bias).set(0, 0, sol[width]);
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests;
