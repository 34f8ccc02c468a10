use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use super::voxel::SparseVoxelGrid;
use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Number of taps of a 3×3×3 kernel.
pub const TAPS: usize = 27;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    /// Output sites are exactly the input sites.
    Submanifold,
    /// Stride 2, padding 1: output `o` reads inputs `2o−1 ..= 2o+1`.
    Strided,
}

/// Row-block index of tap `(dx,dy,dz) ∈ {−1,0,1}³` inside a
/// `27·in × out` kernel.
pub fn tap_index(d: [i64; 3]) -> usize {
    ((d[0] + 1) * 9 + (d[1] + 1) * 3 + (d[2] + 1)) as usize
}

pub fn out_dims(dims: [usize; 3], mode: ConvMode) -> [usize; 3] {
    match mode {
        ConvMode::Submanifold => dims,
        ConvMode::Strided => dims.map(|d| d.div_ceil(2)),
    }
}

/// Input rows feeding each (output site, tap) pair.
#[derive(Clone, Debug)]
pub struct Rulebook {
    pub mode: ConvMode,
    pub out_dims: [usize; 3],
    pub out_sites: Vec<[u32; 3]>,
    /// `out_sites.len()·27` entries, output-major.
    pub gather: Arc<[Option<u32>]>,
}

impl Rulebook {
    pub fn build(dims: [usize; 3], sites: &[[u32; 3]], mode: ConvMode) -> Self {
        let lookup: HashMap<[u32; 3], u32> = sites.iter().enumerate().map(|(i, s)| (*s, i as u32)).collect();
        let od = out_dims(dims, mode);
        let out_sites: Vec<[u32; 3]> = match mode {
            ConvMode::Submanifold => sites.to_vec(),
            ConvMode::Strided => {
                let mut set = BTreeSet::new();
                for s in sites {
                    let cands = s.map(|p| if p % 2 == 0 { [p / 2, p / 2] } else { [(p - 1) / 2, p.div_ceil(2)] });
                    for a in cands[0] {
                        for b in cands[1] {
                            for c in cands[2] {
                                let o = [a, b, c];
                                if (0..3).all(|k| (o[k] as usize) < od[k]) {
                                    set.insert(o);
                                }
                            }
                        }
                    }
                }
                set.into_iter().collect()
            }
        };
        let stride: i64 = if mode == ConvMode::Strided { 2 } else { 1 };
        let mut gather = Vec::with_capacity(out_sites.len() * TAPS);
        for o in &out_sites {
            for dx in -1..=1i64 {
                for dy in -1..=1i64 {
                    for dz in -1..=1i64 {
                        let d = [dx, dy, dz];
                        let p: [i64; 3] = std::array::from_fn(|k| o[k] as i64 * stride + d[k]);
                        let inside = (0..3).all(|k| p[k] >= 0 && (p[k] as usize) < dims[k]);
                        gather.push(if inside {
                            lookup.get(&p.map(|v| v as u32)).copied()
                        } else {
                            None
                        });
                    }
                }
            }
        }
        Rulebook {
            mode,
            out_dims: od,
            out_sites,
            gather: gather.into(),
        }
    }
}

/// `x: n_in×in`, `kernel: 27·in × out`, `bias: 1×out` → `n_out×out`.
pub fn conv_nodes(g: &mut Graph, x: NodeId, rb: &Rulebook, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
    let cin = g.shape(x).cols;
    let ks = g.shape(kernel);
    if ks.rows != TAPS * cin {
        return Err(Error::invalid(format!(
            "channel mismatch: kernel expects {} input channels, grid has {cin}",
            ks.rows / TAPS
        )));
    }
    let n_out = rb.out_sites.len();
    let cols = g.gather_rows(x, rb.gather.clone())?;
    let cols = g.reshape(cols, n_out, TAPS * cin)?;
    let y = g.matmul(cols, kernel)?;
    g.add(y, bias)
}

/// Sparse 3×3×3 convolution on plain values.
pub fn sparse_conv3d(grid: &SparseVoxelGrid, kernel: &Tensor, bias: &Tensor, mode: ConvMode) -> Result<SparseVoxelGrid> {
    if kernel.rows() != TAPS * grid.channels || bias.rows() != 1 || bias.cols() != kernel.cols() {
        return Err(Error::invalid(format!(
            "channel mismatch: kernel {}x{} and bias {}x{} for a grid with {} channels",
            kernel.rows(),
            kernel.cols(),
            bias.rows(),
            bias.cols(),
            grid.channels
        )));
    }
    let rb = Rulebook::build(grid.dims, &grid.active, mode);
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(grid.len(), grid.channels, grid.values.clone()));
    let k = g.constant(kernel.clone());
    let b = g.constant(bias.clone());
    let y = conv_nodes(&mut g, x, &rb, k, b)?;
    Ok(SparseVoxelGrid {
        dims: rb.out_dims,
        active: rb.out_sites,
        values: g.value(y).data().to_vec(),
        channels: kernel.cols(),
    })
}
