//! Biomass regression from neural-field surfaces: surface extraction,
//! voxelization, a sparse 3D CNN backbone and a transformer with a
//! Biomass token.

mod model;
mod sparse;
mod surface;
mod voxel;

pub use model::{BioNet, BioNetConfig, TokenSequence};
pub use sparse::{conv_nodes, out_dims, sparse_conv3d, tap_index, ConvMode, Rulebook, TAPS};
pub use surface::{
    augment, extract_surface_features, lattice_coord, AugmentParams, SurfacePointCloud, MAX_ALPHA_ROT, MAX_PHI,
    MAX_THETA,
};
pub use voxel::{voxelize, voxelize_with_counts, SparseVoxelGrid, VoxelizeOptions};
