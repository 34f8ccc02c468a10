use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sparse::{conv_nodes, out_dims, ConvMode, Rulebook, TAPS};
use super::surface::SurfacePointCloud;
use super::voxel::{voxelize, SparseVoxelGrid, VoxelizeOptions};
use crate::diffcore::{glorot_uniform, he_normal, normal_tensor, Axis, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::fields::{Activation, Linear, Mlp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BioNetConfig {
    pub feature_dim: usize,
    pub voxel: VoxelizeOptions,
    pub base_channels: usize,
    pub levels: usize,
    pub blocks_per_level: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub head_hidden: Vec<usize>,
    pub dropout: f64,
    pub norm_eps: f64,
}

impl Default for BioNetConfig {
    fn default() -> Self {
        BioNetConfig {
            feature_dim: 64,
            voxel: VoxelizeOptions::default(),
            base_channels: 32,
            levels: 4,
            blocks_per_level: 2,
            d_model: 512,
            heads: 8,
            ffn_dim: 2048,
            encoder_layers: 5,
            head_hidden: vec![512, 256],
            dropout: 0.1,
            norm_eps: 1e-5,
        }
    }
}

impl BioNetConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_channels", self.base_channels),
            ("levels", self.levels),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("bionet.{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.voxel.dims.contains(&0) {
            return Err(Error::Config("voxel dims must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.head_hidden.contains(&0) {
            return Err(Error::Config("head hidden sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.voxel.channels(self.feature_dim)
    }

    /// Lattice after all strided convolutions.
    pub fn token_dims(&self) -> [usize; 3] {
        (0..self.levels).fold(self.voxel.dims, |d, _| out_dims(d, ConvMode::Strided))
    }

    pub fn token_count(&self) -> usize {
        self.token_dims().iter().product()
    }

    /// Channel count of level `l`; the strided convolution closing level
    /// `l` doubles it.
    pub fn level_channels(&self, l: usize) -> usize {
        self.base_channels << l
    }
}

#[derive(Clone, Debug)]
struct Conv {
    kernel: ParamId,
    bias: ParamId,
}

impl Conv {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        let std = (2.0 / (TAPS * cin) as f64).sqrt();
        Conv {
            kernel: store.add(format!("{name}.kernel"), normal_tensor(rng, TAPS * cin, cout, 0.0, std)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, cout)),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId, rb: &Rulebook) -> Result<NodeId> {
        let k = g.param(store, self.kernel);
        let b = g.param(store, self.bias);
        conv_nodes(g, x, rb, k, b)
    }
}

/// Normalization with a learnable per-channel affine map.
#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    axis: Axis,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, dim: usize, axis: Axis) -> Self {
        Norm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, dim)),
            axis,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId, eps: f64) -> Result<NodeId> {
        let n = g.layer_norm(x, self.axis, eps);
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.mul(n, gamma)?;
        g.add(y, beta)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
}

#[derive(Clone, Debug)]
struct Level {
    blocks: Vec<ResBlock>,
    down: Conv,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm1: Norm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    norm2: Norm,
    ff1: Linear,
    ff2: Linear,
}

/// Backbone output before the transformer: Biomass token first, then one
/// token per site of the final lattice. Position embeddings are separate.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub pos_embed: Tensor,
}

/// Sparse 3D CNN backbone, transformer encoder and regression head.
#[derive(Clone, Debug)]
pub struct BioNet {
    pub config: BioNetConfig,
    pub params: ParamStore,
    stem: Conv,
    stem_norm: Norm,
    levels: Vec<Level>,
    proj: Linear,
    bio_token: ParamId,
    pos_embed: ParamId,
    layers: Vec<EncoderLayer>,
    final_norm: Norm,
    head: Mlp,
    output_scale: ParamId,
}

fn linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize, relu: bool) -> Linear {
    let w = if relu { he_normal(rng, i, o) } else { glorot_uniform(rng, i, o) };
    Linear::new(store, name, w, Tensor::zeros(1, o))
}

impl BioNet {
    pub fn new(config: BioNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let base = config.base_channels;
        let stem = Conv::new(&mut store, &mut rng, "bb.stem", config.in_channels(), base);
        let stem_norm = Norm::new(&mut store, "bb.stem.norm", base, Axis::Rows);
        let mut levels = Vec::with_capacity(config.levels);
        for l in 0..config.levels {
            let c = config.level_channels(l);
            let blocks = (0..config.blocks_per_level)
                .map(|b| {
                    let name = format!("bb.l{l}.b{b}");
                    ResBlock {
                        conv1: Conv::new(&mut store, &mut rng, &format!("{name}.conv1"), c, c),
                        norm1: Norm::new(&mut store, &format!("{name}.norm1"), c, Axis::Rows),
                        conv2: Conv::new(&mut store, &mut rng, &format!("{name}.conv2"), c, c),
                        norm2: Norm::new(&mut store, &format!("{name}.norm2"), c, Axis::Rows),
                    }
                })
                .collect();
            let down = Conv::new(&mut store, &mut rng, &format!("bb.l{l}.down"), c, 2 * c);
            levels.push(Level { blocks, down });
        }
        let d = config.d_model;
        let ct = config.level_channels(config.levels);
        let proj = linear(&mut store, &mut rng, "tok.proj", ct, d, false);
        let bio_token = store.add("tok.biomass", normal_tensor(&mut rng, 1, d, 0.0, 0.02));
        let pos_embed = store.add("tok.pos_embed", normal_tensor(&mut rng, 1 + config.token_count(), d, 0.0, 0.02));
        let layers = (0..config.encoder_layers)
            .map(|i| {
                let n = format!("tf.{i}");
                EncoderLayer {
                    norm1: Norm::new(&mut store, &format!("{n}.norm1"), d, Axis::Cols),
                    wq: linear(&mut store, &mut rng, &format!("{n}.wq"), d, d, false),
                    wk: linear(&mut store, &mut rng, &format!("{n}.wk"), d, d, false),
                    wv: linear(&mut store, &mut rng, &format!("{n}.wv"), d, d, false),
                    wo: linear(&mut store, &mut rng, &format!("{n}.wo"), d, d, false),
                    norm2: Norm::new(&mut store, &format!("{n}.norm2"), d, Axis::Cols),
                    ff1: linear(&mut store, &mut rng, &format!("{n}.ff1"), d, config.ffn_dim, true),
                    ff2: linear(&mut store, &mut rng, &format!("{n}.ff2"), config.ffn_dim, d, false),
                }
            })
            .collect();
        let final_norm = Norm::new(&mut store, "tf.norm", d, Axis::Cols);
        let mut dims = vec![d];
        dims.extend(&config.head_hidden);
        dims.push(1);
        let head_layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| linear(&mut store, &mut rng, &format!("head.{i}"), w[0], w[1], i + 2 < dims.len()))
            .collect();
        let head = Mlp {
            layers: head_layers,
            activation: Activation::Relu,
        };
        let output_scale = store.add_buffer("head.output_scale", Tensor::scalar(1.0));
        Ok(BioNet {
            config,
            params: store,
            stem,
            stem_norm,
            levels,
            proj,
            bio_token,
            pos_embed,
            layers,
            final_norm,
            head,
            output_scale,
        })
    }

    pub fn output_scale(&self) -> f64 {
        self.params.value(self.output_scale).item()
    }

    pub fn set_output_scale(&mut self, scale: f64) {
        self.params.set(self.output_scale, Tensor::scalar(scale));
    }

    /// Parameter ids of the transformer encoder layers.
    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.params.ids().filter(|id| self.params.name(*id).starts_with("tf.")).collect()
    }

    fn check_grid(&self, grid: &SparseVoxelGrid) -> Result<()> {
        if grid.dims != self.config.voxel.dims || grid.channels != self.config.in_channels() {
            return Err(Error::invalid(format!(
                "grid {:?} with {} channels does not match the network ({:?}, {} channels)",
                grid.dims,
                grid.channels,
                self.config.voxel.dims,
                self.config.in_channels()
            )));
        }
        if grid.is_empty() {
            return Err(Error::invalid("empty voxel grid"));
        }
        Ok(())
    }

    /// `(1+T)×d_model` tokens without position embeddings.
    pub fn backbone_nodes(&self, g: &mut Graph, store: &ParamStore, grid: &SparseVoxelGrid) -> Result<NodeId> {
        self.check_grid(grid)?;
        let eps = self.config.norm_eps;
        let mut dims = grid.dims;
        let mut sites = grid.active.clone();
        let x = g.constant(Tensor::new(grid.len(), grid.channels, grid.values.clone()));
        let mut rb = Rulebook::build(dims, &sites, ConvMode::Submanifold);
        let y = self.stem.forward(g, store, x, &rb)?;
        let y = self.stem_norm.forward(g, store, y, eps)?;
        let mut x = g.relu(y);
        for level in &self.levels {
            for block in &level.blocks {
                let y = block.conv1.forward(g, store, x, &rb)?;
                let y = block.norm1.forward(g, store, y, eps)?;
                let y = g.relu(y);
                let y = block.conv2.forward(g, store, y, &rb)?;
                let y = block.norm2.forward(g, store, y, eps)?;
                let s = g.add(x, y)?;
                x = g.relu(s);
            }
            let down = Rulebook::build(dims, &sites, ConvMode::Strided);
            x = level.down.forward(g, store, x, &down)?;
            dims = down.out_dims;
            sites = down.out_sites;
            rb = Rulebook::build(dims, &sites, ConvMode::Submanifold);
        }
        if dims[2] > 1 {
            log::warn!("height {} remains after {} halvings; every site becomes a token", dims[2], self.config.levels);
        }
        let mut index = vec![None; dims.iter().product()];
        for (i, s) in sites.iter().enumerate() {
            index[(s[0] as usize * dims[1] + s[1] as usize) * dims[2] + s[2] as usize] = Some(i as u32);
        }
        let dense = g.gather_rows(x, Arc::from(index))?;
        let tokens = self.proj.forward(g, store, dense)?;
        let bio = g.param(store, self.bio_token);
        g.concat_rows(&[bio, tokens])
    }

    /// Adds `pos`, runs the encoder and reads out `m̂` (1×1) from token 0.
    pub fn transformer_nodes(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: NodeId,
        pos: NodeId,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let eps = self.config.norm_eps;
        let (d, heads) = (self.config.d_model, self.config.heads);
        let dh = d / heads;
        let mut h = g.add(tokens, pos)?;
        for layer in &self.layers {
            let a = layer.norm1.forward(g, store, h, eps)?;
            let q = layer.wq.forward(g, store, a)?;
            let k = layer.wk.forward(g, store, a)?;
            let v = layer.wv.forward(g, store, a)?;
            let mut outs = Vec::with_capacity(heads);
            for i in 0..heads {
                let qh = g.slice_cols(q, i * dh, dh)?;
                let kh = g.slice_cols(k, i * dh, dh)?;
                let vh = g.slice_cols(v, i * dh, dh)?;
                let kt = g.transpose(kh);
                let s = g.matmul(qh, kt)?;
                let s = g.scale(s, 1.0 / (dh as f64).sqrt());
                let p = g.softmax(s);
                outs.push(g.matmul(p, vh)?);
            }
            let o = g.concat_cols(&outs)?;
            let o = layer.wo.forward(g, store, o)?;
            let o = self.dropout(g, o, dropout.as_deref_mut());
            h = g.add(h, o)?;
            let a = layer.norm2.forward(g, store, h, eps)?;
            let f = layer.ff1.forward(g, store, a)?;
            let f = g.relu(f);
            let f = layer.ff2.forward(g, store, f)?;
            let f = self.dropout(g, f, dropout.as_deref_mut());
            h = g.add(h, f)?;
        }
        let cls = g.slice_rows(h, 0, 1)?;
        let cls = self.final_norm.forward(g, store, cls, eps)?;
        let z = self.head.forward(g, store, cls)?;
        let m = g.softplus(z, 1.0);
        let scale = g.param(store, self.output_scale);
        g.mul(m, scale)
    }

    fn dropout(&self, g: &mut Graph, x: NodeId, rng: Option<&mut ChaCha8Rng>) -> NodeId {
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let s = g.shape(x);
                let keep = 1.0 / (1.0 - p);
                let mask: Vec<f64> = (0..s.len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
                let m = g.constant(Tensor::new(s.rows, s.cols, mask));
                g.mul(x, m).expect("mask has the shape of its input")
            }
            _ => x,
        }
    }

    /// Full forward pass to `m̂` (1×1). Dropout is active only with an RNG.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        grid: &SparseVoxelGrid,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let tokens = self.backbone_nodes(g, store, grid)?;
        let pos = g.param(store, self.pos_embed);
        self.transformer_nodes(g, store, tokens, pos, dropout)
    }

    pub fn backbone_forward(&self, grid: &SparseVoxelGrid) -> Result<TokenSequence> {
        let mut g = Graph::new();
        let t = self.backbone_nodes(&mut g, &self.params, grid)?;
        Ok(TokenSequence {
            tokens: g.value(t).clone(),
            pos_embed: self.params.value(self.pos_embed).clone(),
        })
    }

    pub fn transformer_predict(&self, seq: &TokenSequence) -> Result<f64> {
        let want = 1 + self.config.token_count();
        if seq.tokens.shape() != seq.pos_embed.shape() || seq.tokens.rows() != want || seq.tokens.cols() != self.config.d_model {
            return Err(Error::invalid(format!(
                "token sequence {} with position embedding {} does not match {want}x{}",
                seq.tokens.shape(),
                seq.pos_embed.shape(),
                self.config.d_model
            )));
        }
        let mut g = Graph::new();
        let t = g.constant(seq.tokens.clone());
        let p = g.constant(seq.pos_embed.clone());
        let m = self.transformer_nodes(&mut g, &self.params, t, p, None)?;
        Ok(g.value(m).item())
    }

    pub fn predict(&self, grid: &SparseVoxelGrid) -> Result<f64> {
        let mut g = Graph::new();
        let m = self.forward_with(&mut g, &self.params, grid, None)?;
        Ok(g.value(m).item())
    }

    pub fn predict_cloud(&self, cloud: &SurfacePointCloud) -> Result<f64> {
        if cloud.channels != self.config.feature_dim {
            return Err(Error::invalid(format!(
                "cloud has {} feature channels, network expects {}",
                cloud.channels, self.config.feature_dim
            )));
        }
        self.predict(&voxelize(cloud, &self.config.voxel)?)
    }
}
