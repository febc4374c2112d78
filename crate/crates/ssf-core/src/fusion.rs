//! Sparse feature fusion of two scans.
//!
//! Both scans are voxelized jointly: the union voxel set V with indicator
//! masks M_t and M_{t+1} fixes a shared row ordering. Voxels occupied by
//! only one scan are filled with a single virtual point for the other
//! scan before encoding; after the VFE the masks zero the virtual rows,
//! so both per-scan maps have U rows and concatenate channel-wise.

use alloc::vec::Vec;

use hashbrown::HashMap;

use crate::error::{CoreError, Result};
use crate::grid::GridConfig;
use crate::nn::{Mat, NormMode};
use crate::params::{GradStore, ParamStore};
use crate::spconv::{pack_coord, CoordKey};
use crate::voxel::{
    coord_sort_key, vfe_backward, vfe_encode, voxel_center, voxelize, SparseFeatureMap,
    VfeCache, VfeParams, VoxelAssignment,
};

/// Joint voxelization of two scans over the union voxel set.
#[derive(Debug, Clone)]
pub struct JointVoxelization {
    /// Union voxel set V in canonical order.
    pub union_coords: Vec<[i32; 3]>,
    /// True where scan t occupies the union voxel (M_t).
    pub mask_t: Vec<bool>,
    /// True where scan t+1 occupies the union voxel (M_{t+1}).
    pub mask_t1: Vec<bool>,
    /// Per-scan rasterization (own voxel lists, used for augmentation).
    pub assignment_t: VoxelAssignment,
    pub assignment_t1: VoxelAssignment,
    /// Union row per kept point of each scan.
    pub point_to_union_t: Vec<usize>,
    pub point_to_union_t1: Vec<usize>,
}

/// Voxelize both scans and build the union with indicator masks.
pub fn joint_voxelize(
    points_t: &[[f64; 3]],
    points_t1: &[[f64; 3]],
    grid: &GridConfig,
) -> JointVoxelization {
    let assignment_t = voxelize(points_t, grid);
    let assignment_t1 = voxelize(points_t1, grid);

    let mut union_coords: Vec<[i32; 3]> = assignment_t
        .unique_voxels
        .iter()
        .chain(assignment_t1.unique_voxels.iter())
        .copied()
        .collect();
    union_coords.sort_unstable_by_key(coord_sort_key);
    union_coords.dedup();

    let mut lookup: HashMap<u64, usize, CoordKey> =
        HashMap::with_capacity_and_hasher(union_coords.len(), CoordKey::default());
    for (u, &c) in union_coords.iter().enumerate() {
        lookup.insert(pack_coord(c), u);
    }

    let mut mask_t = alloc::vec![false; union_coords.len()];
    for c in &assignment_t.unique_voxels {
        mask_t[lookup[&pack_coord(*c)]] = true;
    }
    let mut mask_t1 = alloc::vec![false; union_coords.len()];
    for c in &assignment_t1.unique_voxels {
        mask_t1[lookup[&pack_coord(*c)]] = true;
    }

    let point_to_union_t = assignment_t
        .point_to_voxel
        .iter()
        .map(|&v| lookup[&pack_coord(assignment_t.unique_voxels[v])])
        .collect();
    let point_to_union_t1 = assignment_t1
        .point_to_voxel
        .iter()
        .map(|&v| lookup[&pack_coord(assignment_t1.unique_voxels[v])])
        .collect();

    JointVoxelization {
        union_coords,
        mask_t,
        mask_t1,
        assignment_t,
        assignment_t1,
        point_to_union_t,
        point_to_union_t1,
    }
}

/// One scan's VFE output padded to the union rows.
#[derive(Debug, Clone)]
pub struct VirtualVfeOutput {
    /// U x C features, exactly zero on rows this scan does not occupy.
    pub map: SparseFeatureMap,
    /// Per-point encoded features of the real kept points, scan order.
    pub point_feats: Mat,
    pub cache: VirtualVfeCache,
}

/// Saved state to run the fused backward.
#[derive(Debug, Clone)]
pub struct VirtualVfeCache {
    pub members: Vec<Vec<usize>>,
    pub vfe_cache: VfeCache,
    pub n_real: usize,
    pub mask: Vec<bool>,
}

fn encode_with_virtual(
    jv: &JointVoxelization,
    feats: &Mat,
    point_to_union: &[usize],
    mask: &[bool],
    grid: &GridConfig,
    vfe: &VfeParams,
    ps: &mut ParamStore,
    mode: NormMode,
) -> Result<VirtualVfeOutput> {
    let u = jv.union_coords.len();
    let n_real = feats.rows;
    // Real point rows first, then one virtual point per missing voxel in
    // union-row order.
    let mut members: Vec<Vec<usize>> = alloc::vec![Vec::new(); u];
    for (k, &urow) in point_to_union.iter().enumerate() {
        members[urow].push(k);
    }
    let mut ext = Mat::zeros(n_real + mask.iter().filter(|&&m| !m).count(), 9);
    ext.data[..n_real * 9].copy_from_slice(&feats.data);
    let mut stat_mask = alloc::vec![true; ext.rows];
    let mut next = n_real;
    for (urow, &occupied) in mask.iter().enumerate() {
        if !occupied {
            // Virtual point at the voxel center: zero offsets, cluster
            // center equal to the voxel center.
            let vc = voxel_center(jv.union_coords[urow], grid);
            let row = ext.row_mut(next);
            row[0] = vc[0];
            row[1] = vc[1];
            row[2] = vc[2];
            row[6] = vc[0];
            row[7] = vc[1];
            row[8] = vc[2];
            stat_mask[next] = false;
            members[urow].push(next);
            next += 1;
        }
    }

    let (mut map, vfe_cache) =
        vfe_encode(&ext, &jv.union_coords, &members, vfe, ps, mode, Some(&stat_mask))?;
    // Indicator mask zeroes the virtual rows after encoding.
    for (urow, &occupied) in mask.iter().enumerate() {
        if !occupied {
            map.features.row_mut(urow).fill(0.0);
        }
    }
    let c = vfe.out;
    let mut point_feats = Mat::zeros(n_real, c);
    point_feats
        .data
        .copy_from_slice(&vfe_cache.point_feats.data[..n_real * c]);
    Ok(VirtualVfeOutput {
        map,
        point_feats,
        cache: VirtualVfeCache { members, vfe_cache, n_real, mask: mask.to_vec() },
    })
}

/// Encode both scans over the union rows with virtual-voxel padding.
/// `feats_t` / `feats_t1` are the 9-dim augmented features of the kept
/// points of each scan.
pub fn vfe_with_virtual(
    jv: &JointVoxelization,
    feats_t: &Mat,
    feats_t1: &Mat,
    grid: &GridConfig,
    vfe: &VfeParams,
    ps: &mut ParamStore,
    mode: NormMode,
) -> Result<(VirtualVfeOutput, VirtualVfeOutput)> {
    let out_t = encode_with_virtual(
        jv,
        feats_t,
        &jv.point_to_union_t,
        &jv.mask_t,
        grid,
        vfe,
        ps,
        mode,
    )?;
    let out_t1 = encode_with_virtual(
        jv,
        feats_t1,
        &jv.point_to_union_t1,
        &jv.mask_t1,
        grid,
        vfe,
        ps,
        mode,
    )?;
    Ok((out_t, out_t1))
}

/// Backward through mask-zeroing, pooling and the VFE layers for one
/// scan. Returns the gradient on the real points' 9-dim features.
pub fn virtual_vfe_backward(
    vfe: &VfeParams,
    ps: &ParamStore,
    grads: &mut GradStore,
    cache: &VirtualVfeCache,
    g_map: &Mat,
    g_point_real: Option<&Mat>,
) -> Mat {
    // Mask-zeroing: virtual rows contribute no gradient.
    let mut g = g_map.clone();
    for (urow, &occupied) in cache.mask.iter().enumerate() {
        if !occupied {
            g.row_mut(urow).fill(0.0);
        }
    }
    let g_point_ext = g_point_real.map(|gp| {
        let mut ext = Mat::zeros(cache.vfe_cache.point_feats.rows, gp.cols);
        ext.data[..cache.n_real * gp.cols].copy_from_slice(&gp.data);
        ext
    });
    let g_ext =
        vfe_backward(vfe, ps, grads, &cache.members, &cache.vfe_cache, &g, g_point_ext.as_ref());
    let mut g_real = Mat::zeros(cache.n_real, 9);
    g_real.data.copy_from_slice(&g_ext.data[..cache.n_real * 9]);
    g_real
}

/// Channel concatenation of the two padded maps.
pub fn concat_fused(
    e_t: &SparseFeatureMap,
    e_t1: &SparseFeatureMap,
) -> Result<SparseFeatureMap> {
    if e_t.coords != e_t1.coords {
        return Err(CoreError::Contract(
            "concat_fused: the sparse feature maps differ in size or ordering".into(),
        ));
    }
    let (u, c0, c1) = (e_t.row_count(), e_t.channel_count(), e_t1.channel_count());
    let mut features = Mat::zeros(u, c0 + c1);
    for r in 0..u {
        features.row_mut(r)[..c0].copy_from_slice(e_t.features.row(r));
        features.row_mut(r)[c0..].copy_from_slice(e_t1.features.row(r));
    }
    Ok(SparseFeatureMap { coords: e_t.coords.clone(), features })
}
