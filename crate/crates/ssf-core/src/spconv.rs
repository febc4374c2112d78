//! Sparse convolution engine.
//!
//! Coordinates are indexed through a hash map keyed on a packed
//! (iz, iy, ix) 64-bit value. A rulebook lists, per kernel offset, the
//! (input_row, output_row) pairs; forward and backward are
//! gather-GEMM-scatter over those lists. Pairs are enumerated
//! output-major in canonical coordinate order so float accumulation is
//! run-to-run identical.

use alloc::vec::Vec;
use core::hash::{BuildHasherDefault, Hasher};

use hashbrown::HashMap;

use crate::error::{CoreError, Result};
use crate::math;
use crate::nn::Mat;
use crate::params::{GradStore, ParamId, ParamStore, Tensor};
use crate::rng::SplitMix64;
use crate::voxel::{coord_sort_key, SparseFeatureMap};

/// 21 bits per axis with a bias so moderately negative coordinates pack.
const AXIS_BITS: u32 = 21;
const AXIS_BIAS: i64 = 1 << 20;

pub fn pack_coord(c: [i32; 3]) -> u64 {
    let mask = (1u64 << AXIS_BITS) - 1;
    let x = (c[0] as i64 + AXIS_BIAS) as u64 & mask;
    let y = (c[1] as i64 + AXIS_BIAS) as u64 & mask;
    let z = (c[2] as i64 + AXIS_BIAS) as u64 & mask;
    (z << (2 * AXIS_BITS)) | (y << AXIS_BITS) | x
}

/// Deterministic multiply-shift hasher for packed coordinates.
#[derive(Debug, Clone, Copy, Default)]
pub struct FxCoordHasher {
    state: u64,
}

impl Hasher for FxCoordHasher {
    fn finish(&self) -> u64 {
        self.state
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.state = (self.state ^ b as u64).wrapping_mul(0x517C_C1B7_2722_0A95);
        }
    }

    fn write_u64(&mut self, v: u64) {
        self.state = (self.state ^ v).wrapping_mul(0x517C_C1B7_2722_0A95);
        self.state ^= self.state >> 32;
    }
}

pub type CoordKey = BuildHasherDefault<FxCoordHasher>;

pub type CoordMap = HashMap<u64, usize, CoordKey>;

pub fn coord_index(coords: &[[i32; 3]]) -> CoordMap {
    let mut map = CoordMap::with_capacity_and_hasher(coords.len(), CoordKey::default());
    for (i, &c) in coords.iter().enumerate() {
        map.insert(pack_coord(c), i);
    }
    map
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RulebookKind {
    Submanifold,
    Strided,
}

/// Per-offset (input_row, output_row) pair lists.
#[derive(Debug, Clone)]
pub struct Rulebook {
    pub kind: RulebookKind,
    pub kernel: [usize; 3],
    pub stride: i32,
    pub offsets: Vec<[i32; 3]>,
    pub pairs: Vec<Vec<(u32, u32)>>,
    pub input_coords: Vec<[i32; 3]>,
    pub output_coords: Vec<[i32; 3]>,
}

impl Rulebook {
    pub fn pair_count(&self) -> u64 {
        self.pairs.iter().map(|p| p.len() as u64).sum()
    }
}

/// Centered kernel offsets in canonical (dz, dy, dx) order.
pub fn kernel_offsets(kernel: [usize; 3]) -> Vec<[i32; 3]> {
    let half = |k: usize| (k as i32) / 2;
    let (hx, hy, hz) = (half(kernel[0]), half(kernel[1]), half(kernel[2]));
    let mut out = Vec::with_capacity(kernel[0] * kernel[1] * kernel[2]);
    for dz in -hz..=hz {
        for dy in -hy..=hy {
            for dx in -hx..=hx {
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

fn ensure_odd(kernel: [usize; 3]) -> Result<()> {
    if kernel.iter().any(|&k| k == 0 || k % 2 == 0) {
        return Err(CoreError::Contract(alloc::format!(
            "kernel sizes must be odd and positive, got {kernel:?}"
        )));
    }
    Ok(())
}

/// Submanifold rulebook: output sites equal input sites; pair (i, j)
/// appears under offset k iff coord(j) + k is occupied at row i... more
/// precisely input row i satisfies coord(i) = coord(j) + k.
pub fn build_rulebook_submanifold(coords: &[[i32; 3]], kernel: [usize; 3]) -> Result<Rulebook> {
    ensure_odd(kernel)?;
    let index = coord_index(coords);
    let offsets = kernel_offsets(kernel);
    let mut pairs = alloc::vec![Vec::new(); offsets.len()];
    for (oi, off) in offsets.iter().enumerate() {
        let list = &mut pairs[oi];
        for (j, &c) in coords.iter().enumerate() {
            let probe = [c[0] + off[0], c[1] + off[1], c[2] + off[2]];
            if let Some(&i) = index.get(&pack_coord(probe)) {
                list.push((i as u32, j as u32));
            }
        }
    }
    Ok(Rulebook {
        kind: RulebookKind::Submanifold,
        kernel,
        stride: 1,
        offsets,
        pairs,
        input_coords: coords.to_vec(),
        output_coords: coords.to_vec(),
    })
}

/// Strided rulebook: out[o] = sum_k w[k] in[o*s + k]. Output sites are
/// every in-range o covered by the kernel footprint from some input.
pub fn build_rulebook_strided(
    coords: &[[i32; 3]],
    kernel: [usize; 3],
    stride: i32,
    in_dims: [i32; 3],
) -> Result<Rulebook> {
    ensure_odd(kernel)?;
    if stride < 1 {
        return Err(CoreError::Contract("stride must be >= 1".into()));
    }
    let out_dims = [
        (in_dims[0] + stride - 1) / stride,
        (in_dims[1] + stride - 1) / stride,
        (in_dims[2] + stride - 1) / stride,
    ];
    let half = [
        (kernel[0] as i32) / 2,
        (kernel[1] as i32) / 2,
        (kernel[2] as i32) / 2,
    ];

    // Discover output sites from inputs.
    let mut out_set: HashMap<u64, [i32; 3], CoordKey> =
        HashMap::with_hasher(CoordKey::default());
    let div_floor = |a: i32, b: i32| -> i32 {
        let q = a / b;
        if a % b != 0 && (a < 0) != (b < 0) {
            q - 1
        } else {
            q
        }
    };
    let div_ceil = |a: i32, b: i32| -> i32 { -div_floor(-a, b) };
    for &c in coords {
        let lo = [
            div_ceil(c[0] - half[0], stride).max(0),
            div_ceil(c[1] - half[1], stride).max(0),
            div_ceil(c[2] - half[2], stride).max(0),
        ];
        let hi = [
            div_floor(c[0] + half[0], stride).min(out_dims[0] - 1),
            div_floor(c[1] + half[1], stride).min(out_dims[1] - 1),
            div_floor(c[2] + half[2], stride).min(out_dims[2] - 1),
        ];
        for oz in lo[2]..=hi[2] {
            for oy in lo[1]..=hi[1] {
                for ox in lo[0]..=hi[0] {
                    out_set.insert(pack_coord([ox, oy, oz]), [ox, oy, oz]);
                }
            }
        }
    }
    let mut output_coords: Vec<[i32; 3]> = out_set.values().copied().collect();
    output_coords.sort_unstable_by_key(coord_sort_key);

    let in_index = coord_index(coords);
    let offsets = kernel_offsets(kernel);
    let mut pairs = alloc::vec![Vec::new(); offsets.len()];
    for (oi, off) in offsets.iter().enumerate() {
        let list = &mut pairs[oi];
        for (j, &o) in output_coords.iter().enumerate() {
            let probe = [
                o[0] * stride + off[0],
                o[1] * stride + off[1],
                o[2] * stride + off[2],
            ];
            if let Some(&i) = in_index.get(&pack_coord(probe)) {
                list.push((i as u32, j as u32));
            }
        }
    }
    Ok(Rulebook {
        kind: RulebookKind::Strided,
        kernel,
        stride,
        offsets,
        pairs,
        input_coords: coords.to_vec(),
        output_coords,
    })
}

/// One convolution's weights: [n_offsets, c_in, c_out] plus bias.
#[derive(Debug, Clone, Copy)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: [usize; 3],
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvLayer {
    pub fn register(
        ps: &mut ParamStore,
        prefix: &str,
        kernel: [usize; 3],
        c_in: usize,
        c_out: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let n_off = kernel[0] * kernel[1] * kernel[2];
        let fan_in = n_off * c_in;
        let limit = math::sqrt(1.0 / fan_in as f64);
        let wdata = (0..n_off * c_in * c_out).map(|_| rng.uniform(-limit, limit)).collect();
        let w = ps.add(
            &alloc::format!("{prefix}.w"),
            Tensor { shape: alloc::vec![n_off, c_in, c_out], data: wdata },
            true,
        )?;
        let bdata = (0..c_out).map(|_| rng.uniform(-limit, limit)).collect();
        let b = ps.add(
            &alloc::format!("{prefix}.b"),
            Tensor { shape: alloc::vec![c_out], data: bdata },
            true,
        )?;
        Ok(ConvLayer { w, b, kernel, c_in, c_out })
    }

    fn weight_slice(&self, ps: &ParamStore, offset_idx: usize) -> Mat {
        let w = ps.get(self.w);
        let n = self.c_in * self.c_out;
        Mat {
            rows: self.c_in,
            cols: self.c_out,
            data: w.data[offset_idx * n..(offset_idx + 1) * n].to_vec(),
        }
    }
}

/// Instrumented logical cost counters for the scaling claim.
#[derive(Debug, Clone, Copy, Default)]
pub struct Counters {
    /// Max feature rows simultaneously alive across any single layer
    /// (input rows + output rows of that layer).
    pub peak_rows: usize,
    /// Total rulebook pairs applied (one gather-GEMM-scatter row each).
    pub rulebook_pairs: u64,
}

impl Counters {
    pub fn note_layer(&mut self, rows_in: usize, rows_out: usize) {
        self.peak_rows = self.peak_rows.max(rows_in + rows_out);
    }

    pub fn note_pairs(&mut self, n: u64) {
        self.rulebook_pairs += n;
    }
}

/// Gather-GEMM-scatter forward.
pub fn conv_forward(
    x: &SparseFeatureMap,
    rb: &Rulebook,
    layer: &ConvLayer,
    ps: &ParamStore,
    counters: Option<&mut Counters>,
) -> Result<SparseFeatureMap> {
    if x.coords != rb.input_coords {
        return Err(CoreError::Contract(
            "conv_forward: feature map coords differ from rulebook input coords".into(),
        ));
    }
    if x.channel_count() != layer.c_in {
        return Err(CoreError::Contract(alloc::format!(
            "conv_forward: input has {} channels, layer expects {}",
            x.channel_count(),
            layer.c_in
        )));
    }
    let m = rb.output_coords.len();
    let mut out = Mat::zeros(m, layer.c_out);
    for (oi, list) in rb.pairs.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let wk = layer.weight_slice(ps, oi);
        let mut gathered = Mat::zeros(list.len(), layer.c_in);
        for (r, &(i, _)) in list.iter().enumerate() {
            gathered.row_mut(r).copy_from_slice(x.features.row(i as usize));
        }
        let prod = gathered.matmul(&wk);
        for (r, &(_, j)) in list.iter().enumerate() {
            for (o, &v) in out.row_mut(j as usize).iter_mut().zip(prod.row(r).iter()) {
                *o += v;
            }
        }
    }
    let b = &ps.get(layer.b).data;
    for r in 0..m {
        for (o, &bb) in out.row_mut(r).iter_mut().zip(b.iter()) {
            *o += bb;
        }
    }
    if let Some(c) = counters {
        c.note_layer(x.row_count(), m);
        c.note_pairs(rb.pair_count());
    }
    if !out.is_finite() {
        return Err(CoreError::Numeric("non-finite output in sparse convolution".into()));
    }
    Ok(SparseFeatureMap { coords: rb.output_coords.clone(), features: out })
}

/// Exact reverse of the forward: accumulates dW, db, returns dX.
pub fn conv_backward(
    grad_out: &Mat,
    x: &SparseFeatureMap,
    rb: &Rulebook,
    layer: &ConvLayer,
    ps: &ParamStore,
    grads: &mut GradStore,
) -> Result<Mat> {
    if grad_out.rows != rb.output_coords.len() || grad_out.cols != layer.c_out {
        return Err(CoreError::Contract("conv_backward: gradient shape mismatch".into()));
    }
    let mut gx = Mat::zeros(x.row_count(), layer.c_in);
    let n = layer.c_in * layer.c_out;
    for (oi, list) in rb.pairs.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let wk = layer.weight_slice(ps, oi);
        let mut g_gathered = Mat::zeros(list.len(), layer.c_out);
        let mut x_gathered = Mat::zeros(list.len(), layer.c_in);
        for (r, &(i, j)) in list.iter().enumerate() {
            g_gathered.row_mut(r).copy_from_slice(grad_out.row(j as usize));
            x_gathered.row_mut(r).copy_from_slice(x.features.row(i as usize));
        }
        // dX rows: g . W^T, accumulated at input rows in list order.
        let gxg = g_gathered.matmul_transpose_other(&wk);
        for (r, &(i, _)) in list.iter().enumerate() {
            for (o, &v) in gx.row_mut(i as usize).iter_mut().zip(gxg.row(r).iter()) {
                *o += v;
            }
        }
        // dW_k = X_gathered^T . G_gathered.
        let gw = x_gathered.matmul_transpose_self(&g_gathered);
        let acc = &mut grads.get_mut(layer.w)[oi * n..(oi + 1) * n];
        for (a, &v) in acc.iter_mut().zip(gw.data.iter()) {
            *a += v;
        }
    }
    let gb = grads.get_mut(layer.b);
    for r in 0..grad_out.rows {
        for (a, &g) in gb.iter_mut().zip(grad_out.row(r).iter()) {
            *a += g;
        }
    }
    Ok(gx)
}

/// Transposed application of a strided rulebook: routes features from the
/// parent's output sites back to its input sites.
pub fn inverse_conv_forward(
    x: &SparseFeatureMap,
    parent_rb: &Rulebook,
    layer: &ConvLayer,
    ps: &ParamStore,
    counters: Option<&mut Counters>,
) -> Result<SparseFeatureMap> {
    if x.coords != parent_rb.output_coords {
        return Err(CoreError::Contract(
            "inverse_conv_forward: input coords differ from parent rulebook output coords".into(),
        ));
    }
    if x.channel_count() != layer.c_in {
        return Err(CoreError::Contract(alloc::format!(
            "inverse_conv_forward: input has {} channels, layer expects {}",
            x.channel_count(),
            layer.c_in
        )));
    }
    let m = parent_rb.input_coords.len();
    let mut out = Mat::zeros(m, layer.c_out);
    for (oi, list) in parent_rb.pairs.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let wk = layer.weight_slice(ps, oi);
        // Deterministic scatter: sort by destination (parent input row).
        let mut sorted = list.clone();
        sorted.sort_unstable();
        let mut gathered = Mat::zeros(sorted.len(), layer.c_in);
        for (r, &(_, j)) in sorted.iter().enumerate() {
            gathered.row_mut(r).copy_from_slice(x.features.row(j as usize));
        }
        let prod = gathered.matmul(&wk);
        for (r, &(i, _)) in sorted.iter().enumerate() {
            for (o, &v) in out.row_mut(i as usize).iter_mut().zip(prod.row(r).iter()) {
                *o += v;
            }
        }
    }
    let b = &ps.get(layer.b).data;
    for r in 0..m {
        for (o, &bb) in out.row_mut(r).iter_mut().zip(b.iter()) {
            *o += bb;
        }
    }
    if let Some(c) = counters {
        c.note_layer(x.row_count(), m);
        c.note_pairs(parent_rb.pair_count());
    }
    if !out.is_finite() {
        return Err(CoreError::Numeric("non-finite output in sparse inverse convolution".into()));
    }
    Ok(SparseFeatureMap { coords: parent_rb.input_coords.clone(), features: out })
}

/// Backward for the inverse convolution.
pub fn inverse_conv_backward(
    grad_out: &Mat,
    x: &SparseFeatureMap,
    parent_rb: &Rulebook,
    layer: &ConvLayer,
    ps: &ParamStore,
    grads: &mut GradStore,
) -> Result<Mat> {
    if grad_out.rows != parent_rb.input_coords.len() || grad_out.cols != layer.c_out {
        return Err(CoreError::Contract("inverse_conv_backward: gradient shape mismatch".into()));
    }
    let mut gx = Mat::zeros(x.row_count(), layer.c_in);
    let n = layer.c_in * layer.c_out;
    for (oi, list) in parent_rb.pairs.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let wk = layer.weight_slice(ps, oi);
        for &(i, j) in list {
            let g = grad_out.row(i as usize);
            // dX[j] += g . W^T
            for ci in 0..layer.c_in {
                let mut acc = 0.0;
                for co in 0..layer.c_out {
                    acc += g[co] * wk.at(ci, co);
                }
                gx.row_mut(j as usize)[ci] += acc;
            }
            // dW_k += x[j]^T g
            let xr = x.features.row(j as usize);
            let acc = &mut grads.get_mut(layer.w)[oi * n..(oi + 1) * n];
            for ci in 0..layer.c_in {
                for co in 0..layer.c_out {
                    acc[ci * layer.c_out + co] += xr[ci] * g[co];
                }
            }
        }
    }
    let gb = grads.get_mut(layer.b);
    for r in 0..grad_out.rows {
        for (a, &g) in gb.iter_mut().zip(grad_out.row(r).iter()) {
            *a += g;
        }
    }
    Ok(gx)
}
