//! Pillar voxelization and voxel feature encoding.
//!
//! Points are rasterized into an ego-centered grid with half-open cells,
//! augmented to 9-dim per-point features (position, offset from voxel
//! center, cluster center) and encoded by a two-layer MLP with
//! normalization and ReLU, then pooled per voxel.

use alloc::vec::Vec;

use hashbrown::HashMap;

use crate::error::Result;
use crate::grid::GridConfig;
use crate::math;
use crate::nn::{check_finite, relu_backward, relu_forward, BatchNorm, BnCache, Linear, Mat, NormMode};
use crate::params::{GradStore, ParamStore};
use crate::rng::SplitMix64;
use crate::spconv::CoordKey;

/// Result of rasterizing a point cloud into the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelAssignment {
    /// Indices of the points that fell inside the grid, in input order.
    pub kept_point_rows: Vec<usize>,
    /// (ix, iy, iz) per kept point.
    pub voxel_coord_per_point: Vec<[i32; 3]>,
    /// Occupied voxels, sorted lexicographically by (iz, iy, ix).
    pub unique_voxels: Vec<[i32; 3]>,
    /// Row into `unique_voxels` per kept point.
    pub point_to_voxel: Vec<usize>,
    /// Kept-point indices per voxel, each list in ascending order.
    pub voxel_members: Vec<Vec<usize>>,
}

impl VoxelAssignment {
    pub fn voxel_count(&self) -> usize {
        self.unique_voxels.len()
    }
}

/// Coordinate list plus row-aligned feature matrix (the sparse map E^s).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFeatureMap {
    pub coords: Vec<[i32; 3]>,
    pub features: Mat,
}

impl SparseFeatureMap {
    pub fn channel_count(&self) -> usize {
        self.features.cols
    }

    pub fn row_count(&self) -> usize {
        self.coords.len()
    }
}

/// Canonical ordering key: (iz, iy, ix) lexicographic.
pub fn coord_sort_key(c: &[i32; 3]) -> (i32, i32, i32) {
    (c[2], c[1], c[0])
}

/// Rasterize `points` into `grid`. A point is kept iff
/// -R/2 <= x,y < R/2 and z_min <= z < z_max.
pub fn voxelize(points: &[[f64; 3]], grid: &GridConfig) -> VoxelAssignment {
    let half = grid.range_m / 2.0;
    let [vx, vy, vz] = grid.voxel_size;
    let d = grid.side_cells() as i32;
    let zc = grid.z_cells() as i32;

    let mut kept_point_rows = Vec::new();
    let mut voxel_coord_per_point = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let [x, y, z] = *p;
        if !(x >= -half && x < half && y >= -half && y < half && z >= grid.z_min && z < grid.z_max)
        {
            continue;
        }
        let ix = math::floor((x + half) / vx) as i32;
        let iy = math::floor((y + half) / vy) as i32;
        let iz = math::floor((z - grid.z_min) / vz) as i32;
        // Float rounding at the upper boundary can land exactly on D.
        if ix < 0 || ix >= d || iy < 0 || iy >= d || iz < 0 || iz >= zc {
            continue;
        }
        kept_point_rows.push(i);
        voxel_coord_per_point.push([ix, iy, iz]);
    }

    let mut unique_voxels: Vec<[i32; 3]> = voxel_coord_per_point.clone();
    unique_voxels.sort_unstable_by_key(coord_sort_key);
    unique_voxels.dedup();

    let mut lookup: HashMap<u64, usize, CoordKey> = HashMap::with_hasher(CoordKey::default());
    for (v, c) in unique_voxels.iter().enumerate() {
        lookup.insert(crate::spconv::pack_coord(*c), v);
    }
    let point_to_voxel: Vec<usize> = voxel_coord_per_point
        .iter()
        .map(|c| lookup[&crate::spconv::pack_coord(*c)])
        .collect();

    let mut voxel_members = alloc::vec![Vec::new(); unique_voxels.len()];
    for (k, &v) in point_to_voxel.iter().enumerate() {
        voxel_members[v].push(k);
    }

    VoxelAssignment {
        kept_point_rows,
        voxel_coord_per_point,
        unique_voxels,
        point_to_voxel,
        voxel_members,
    }
}

/// Center of voxel (ix, iy, iz) in metric coordinates.
pub fn voxel_center(coord: [i32; 3], grid: &GridConfig) -> [f64; 3] {
    let half = grid.range_m / 2.0;
    let [vx, vy, vz] = grid.voxel_size;
    [
        (coord[0] as f64 + 0.5) * vx - half,
        (coord[1] as f64 + 0.5) * vy - half,
        grid.z_min + (coord[2] as f64 + 0.5) * vz,
    ]
}

/// Per kept point: [x, y, z, dox, doy, doz, cx, cy, cz] where the offset
/// is from the voxel center and c is the mean of the points sharing the
/// voxel. Cluster sums run in position-sorted order so the result does
/// not depend on input point order.
pub fn augment_point_features(
    points: &[[f64; 3]],
    assignment: &VoxelAssignment,
    grid: &GridConfig,
) -> Mat {
    let kept = assignment.kept_point_rows.len();
    let mut cluster = alloc::vec![[0.0f64; 3]; assignment.voxel_count()];
    for (v, members) in assignment.voxel_members.iter().enumerate() {
        let mut pos: Vec<[f64; 3]> = members
            .iter()
            .map(|&k| points[assignment.kept_point_rows[k]])
            .collect();
        pos.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        let mut s = [0.0; 3];
        for p in &pos {
            for k in 0..3 {
                s[k] += p[k];
            }
        }
        let n = members.len() as f64;
        cluster[v] = [s[0] / n, s[1] / n, s[2] / n];
    }

    let mut out = Mat::zeros(kept, 9);
    for k in 0..kept {
        let p = points[assignment.kept_point_rows[k]];
        let center = voxel_center(assignment.voxel_coord_per_point[k], grid);
        let c = cluster[assignment.point_to_voxel[k]];
        let row = out.row_mut(k);
        row[0] = p[0];
        row[1] = p[1];
        row[2] = p[2];
        row[3] = p[0] - center[0];
        row[4] = p[1] - center[1];
        row[5] = p[2] - center[2];
        row[6] = c[0];
        row[7] = c[1];
        row[8] = c[2];
    }
    out
}

/// Within-voxel pooling of per-point features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Mean,
}

/// The two-layer point encoder (affine, norm, ReLU twice).
#[derive(Debug, Clone, Copy)]
pub struct VfeParams {
    pub lin0: Linear,
    pub bn0: BatchNorm,
    pub lin1: Linear,
    pub bn1: BatchNorm,
    pub hidden: usize,
    pub out: usize,
    pub pool: PoolKind,
}

impl VfeParams {
    pub fn register(
        ps: &mut ParamStore,
        hidden: usize,
        out: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        Ok(VfeParams {
            lin0: Linear::register(ps, "vfe.0", 9, hidden, rng)?,
            bn0: BatchNorm::register(ps, "vfe.0", hidden)?,
            lin1: Linear::register(ps, "vfe.1", hidden, out, rng)?,
            bn1: BatchNorm::register(ps, "vfe.1", out)?,
            hidden,
            out,
            pool: PoolKind::Max,
        })
    }
}

/// Saved intermediates for the VFE backward pass.
#[derive(Debug, Clone)]
pub struct VfeCache {
    pub input: Mat,
    pub bn0: BnCache,
    pub relu0: Vec<bool>,
    pub hidden_act: Mat,
    pub bn1: BnCache,
    pub relu1: Vec<bool>,
    /// Per-point encoded features (before pooling), kept_N x C.
    pub point_feats: Mat,
    /// For max pooling: kept-point row feeding each (voxel, channel).
    pub argmax: Vec<usize>,
}

/// Encode per-point features and pool them per voxel. `stat_mask`, when
/// present, marks point rows that may contribute to batch statistics.
/// `coords` and `members` define the pooling targets; `members[v]` lists
/// the feature rows belonging to voxel `v` in ascending order.
pub fn vfe_encode(
    feats: &Mat,
    coords: &[[i32; 3]],
    members: &[Vec<usize>],
    vfe: &VfeParams,
    ps: &mut ParamStore,
    mode: NormMode,
    stat_mask: Option<&[bool]>,
) -> Result<(SparseFeatureMap, VfeCache)> {
    let z0 = vfe.lin0.forward(ps, feats);
    check_finite(&z0, "vfe.0")?;
    let (n0, bn0) = vfe.bn0.forward(ps, &z0, mode, stat_mask);
    let (a0, relu0) = relu_forward(&n0);
    let z1 = vfe.lin1.forward(ps, &a0);
    check_finite(&z1, "vfe.1")?;
    let (n1, bn1) = vfe.bn1.forward(ps, &z1, mode, stat_mask);
    let (point_feats, relu1) = relu_forward(&n1);

    let s = coords.len();
    let c = vfe.out;
    let mut pooled = Mat::zeros(s, c);
    let mut argmax = alloc::vec![0usize; s * c];
    for (v, members) in members.iter().enumerate() {
        debug_assert!(!members.is_empty());
        match vfe.pool {
            PoolKind::Max => {
                for j in 0..c {
                    // Ties break to the lowest member row.
                    let mut best = members[0];
                    let mut best_val = point_feats.at(members[0], j);
                    for &k in &members[1..] {
                        let val = point_feats.at(k, j);
                        if val > best_val {
                            best_val = val;
                            best = k;
                        }
                    }
                    pooled.row_mut(v)[j] = best_val;
                    argmax[v * c + j] = best;
                }
            }
            PoolKind::Mean => {
                let inv = 1.0 / members.len() as f64;
                for &k in members {
                    for (o, &f) in pooled.row_mut(v).iter_mut().zip(point_feats.row(k).iter()) {
                        *o += f * inv;
                    }
                }
            }
        }
    }

    let map = SparseFeatureMap { coords: coords.to_vec(), features: pooled };
    let cache = VfeCache {
        input: feats.clone(),
        bn0,
        relu0,
        hidden_act: a0,
        bn1,
        relu1,
        point_feats,
        argmax,
    };
    Ok((map, cache))
}

/// Single-scan forward: pooled sparse feature map over the assignment's
/// own voxels.
pub fn vfe_forward(
    feats: &Mat,
    assignment: &VoxelAssignment,
    vfe: &VfeParams,
    ps: &mut ParamStore,
    mode: NormMode,
) -> Result<SparseFeatureMap> {
    vfe_encode(
        feats,
        &assignment.unique_voxels,
        &assignment.voxel_members,
        vfe,
        ps,
        mode,
        None,
    )
    .map(|(m, _)| m)
}

/// Backward through pooling and both encoder layers.
///
/// `g_pooled` is the gradient on the pooled voxel features, `g_point` an
/// optional extra gradient on the per-point features (the flow head also
/// consumes them). Returns the gradient on the 9-dim inputs.
pub fn vfe_backward(
    vfe: &VfeParams,
    ps: &ParamStore,
    grads: &mut GradStore,
    members: &[Vec<usize>],
    cache: &VfeCache,
    g_pooled: &Mat,
    g_point: Option<&Mat>,
) -> Mat {
    let c = vfe.out;
    let mut g_pf = match g_point {
        Some(g) => g.clone(),
        None => Mat::zeros(cache.point_feats.rows, c),
    };
    for (v, members) in members.iter().enumerate() {
        match vfe.pool {
            PoolKind::Max => {
                for j in 0..c {
                    let k = cache.argmax[v * c + j];
                    g_pf.row_mut(k)[j] += g_pooled.at(v, j);
                }
            }
            PoolKind::Mean => {
                let inv = 1.0 / members.len() as f64;
                for &k in members {
                    for (o, &g) in g_pf.row_mut(k).iter_mut().zip(g_pooled.row(v).iter()) {
                        *o += g * inv;
                    }
                }
            }
        }
    }

    let g_n1 = relu_backward(&g_pf, &cache.relu1);
    let g_z1 = vfe.bn1.backward(ps, grads, &cache.bn1, &g_n1);
    let g_a0 = vfe.lin1.backward(ps, grads, &cache.hidden_act, &g_z1);
    let g_n0 = relu_backward(&g_a0, &cache.relu0);
    let g_z0 = vfe.bn0.backward(ps, grads, &cache.bn0, &g_n0);
    vfe.lin0.backward(ps, grads, &cache.input, &g_z0)
}
