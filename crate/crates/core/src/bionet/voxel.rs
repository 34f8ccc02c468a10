use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::surface::SurfacePointCloud;
use crate::error::{Error, Result};

/// Active voxel sites of an `dims[0]×dims[1]×dims[2]` lattice and their
/// channel vectors (`active.len()×channels`, row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseVoxelGrid {
    pub dims: [usize; 3],
    pub active: Vec<[u32; 3]>,
    pub values: Vec<f64>,
    pub channels: usize,
}

impl SparseVoxelGrid {
    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::invalid(format!("voxel dims must be positive, got {:?}", self.dims)));
        }
        if self.values.len() != self.active.len() * self.channels {
            return Err(Error::invalid("voxel values do not match active sites × channels"));
        }
        let mut seen = std::collections::HashSet::with_capacity(self.active.len());
        for s in &self.active {
            if (0..3).any(|a| s[a] as usize >= self.dims[a]) {
                return Err(Error::invalid(format!("voxel site {s:?} outside dims {:?}", self.dims)));
            }
            if !seen.insert(*s) {
                return Err(Error::invalid(format!("duplicate voxel site {s:?}")));
            }
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite voxel values"));
        }
        Ok(())
    }

    /// Linear index of a site in the dense lattice.
    pub fn linear(&self, s: [u32; 3]) -> usize {
        (s[0] as usize * self.dims[1] + s[1] as usize) * self.dims[2] + s[2] as usize
    }

    /// Dense `(dims product)×channels` array with zeros at inactive sites.
    pub fn densify(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dims.iter().product::<usize>() * self.channels];
        for (i, s) in self.active.iter().enumerate() {
            let l = self.linear(*s);
            out[l * self.channels..(l + 1) * self.channels].copy_from_slice(self.value(i));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VoxelizeOptions {
    pub dims: [usize; 3],
    /// Half size of the voxelized box, centered on the cloud's bounding box.
    pub half_extent: [f64; 3],
    /// Prepend the in-voxel offset of each point to its feature.
    pub include_offsets: bool,
}

impl Default for VoxelizeOptions {
    fn default() -> Self {
        VoxelizeOptions {
            dims: [64, 64, 16],
            half_extent: [1.0; 3],
            include_offsets: true,
        }
    }
}

impl VoxelizeOptions {
    pub fn channels(&self, feature_dim: usize) -> usize {
        feature_dim + if self.include_offsets { 3 } else { 0 }
    }
}

/// Averages points into voxels. Each point contributes its offset from the
/// voxel center (in voxel units, when enabled) followed by its feature.
pub fn voxelize(cloud: &SurfacePointCloud, opts: &VoxelizeOptions) -> Result<SparseVoxelGrid> {
    Ok(voxelize_with_counts(cloud, opts)?.0)
}

/// [`voxelize`] plus the number of points averaged into each site.
pub fn voxelize_with_counts(cloud: &SurfacePointCloud, opts: &VoxelizeOptions) -> Result<(SparseVoxelGrid, Vec<usize>)> {
    cloud.validate()?;
    if opts.dims.contains(&0) || opts.half_extent.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::invalid(format!(
            "voxel dims {:?} and half extent {:?} must be positive",
            opts.dims, opts.half_extent
        )));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &cloud.points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let origin: [f64; 3] = std::array::from_fn(|a| 0.5 * (lo[a] + hi[a]) - opts.half_extent[a]);
    let channels = opts.channels(cloud.channels);
    let mut acc: BTreeMap<[u32; 3], (usize, Vec<f64>)> = BTreeMap::new();
    let mut dropped = 0usize;
    let mut value = vec![0.0; channels];
    for (i, p) in cloud.points.iter().enumerate() {
        let mut site = [0u32; 3];
        let mut inside = true;
        for a in 0..3 {
            let n = opts.dims[a] as f64;
            let u = (p[a] - origin[a]) / (2.0 * opts.half_extent[a]) * n;
            if !(0.0..=n).contains(&u) {
                inside = false;
                break;
            }
            let idx = (u.floor() as usize).min(opts.dims[a] - 1);
            site[a] = idx as u32;
            if opts.include_offsets {
                value[a] = u - idx as f64 - 0.5;
            }
        }
        if !inside {
            dropped += 1;
            continue;
        }
        let off = channels - cloud.channels;
        value[off..].copy_from_slice(cloud.feature(i));
        let e = acc.entry(site).or_insert_with(|| (0, vec![0.0; channels]));
        e.0 += 1;
        for (s, v) in e.1.iter_mut().zip(&value) {
            *s += v;
        }
    }
    if dropped > 0 {
        log::debug!("voxelize dropped {dropped} points outside the voxel box");
    }
    if acc.is_empty() {
        return Err(Error::invalid("no point fell inside the voxel box"));
    }
    let mut active = Vec::with_capacity(acc.len());
    let mut values = Vec::with_capacity(acc.len() * channels);
    let mut counts = Vec::with_capacity(acc.len());
    for (site, (count, sum)) in acc {
        active.push(site);
        counts.push(count);
        values.extend(sum.iter().map(|s| s / count as f64));
    }
    let grid = SparseVoxelGrid {
        dims: opts.dims,
        active,
        values,
        channels,
    };
    Ok((grid, counts))
}

