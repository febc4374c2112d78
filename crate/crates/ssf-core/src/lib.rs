//! Sparse scene flow pipeline.
//!
//! Pure-compute core: rigid-motion geometry, pillar voxelization, voxel
//! feature encoding with virtual-voxel fusion of two scans, a sparse
//! convolution U-Net with a per-point flow head, end-point-error metrics
//! and a minimal Adam training path. No IO lives here; file formats, the
//! synthetic scene generator and the CLI are in the `ssf` crate.
//!
//! The crate is `no_std` compatible (requires `alloc`); tests build with
//! std.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod cloud;
pub mod dense;
pub mod error;
pub mod fusion;
pub mod geom;
pub mod grid;
pub mod math;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod params;
pub mod rng;
pub mod spconv;
pub mod train;
pub mod voxel;

pub use cloud::{FlowField, FramePair, PointCloud};
pub use error::CoreError;
pub use geom::RigidTransform;
pub use grid::GridConfig;
pub use voxel::{SparseFeatureMap, VoxelAssignment};
