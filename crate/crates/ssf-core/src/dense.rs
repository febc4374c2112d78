//! Dense nested-loop convolution reference.
//!
//! Straightforward dense grids and loops, used as the independent ground
//! truth for the sparse engine and as the dense-path cost reference in
//! the benchmark. Small grids only.

use alloc::vec::Vec;

/// Dense D_x x D_y x D_z x C feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrid {
    pub dims: [usize; 3],
    pub channels: usize,
    pub data: Vec<f64>,
}

impl DenseGrid {
    pub fn zeros(dims: [usize; 3], channels: usize) -> Self {
        DenseGrid {
            dims,
            channels,
            data: alloc::vec![0.0; dims[0] * dims[1] * dims[2] * channels],
        }
    }

    #[inline]
    fn idx(&self, x: usize, y: usize, z: usize, c: usize) -> usize {
        ((z * self.dims[1] + y) * self.dims[0] + x) * self.channels + c
    }

    pub fn at(&self, x: usize, y: usize, z: usize, c: usize) -> f64 {
        self.data[self.idx(x, y, z, c)]
    }

    pub fn at_mut(&mut self, x: usize, y: usize, z: usize, c: usize) -> &mut f64 {
        let i = self.idx(x, y, z, c);
        &mut self.data[i]
    }

    pub fn cell_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }
}

/// Centered strided convolution: out[o, co] = sum_k sum_ci
/// w[k, ci, co] * in[o*s + k, ci], out-of-range inputs read as zero.
/// Weights are laid out [n_offsets, c_in, c_out] with offsets enumerated
/// (dz, dy, dx) lexicographic, matching the sparse engine.
pub fn dense_conv(
    input: &DenseGrid,
    weights: &[f64],
    kernel: [usize; 3],
    c_in: usize,
    c_out: usize,
    stride: usize,
) -> DenseGrid {
    assert_eq!(input.channels, c_in);
    let out_dims = [
        input.dims[0].div_ceil(stride),
        input.dims[1].div_ceil(stride),
        input.dims[2].div_ceil(stride),
    ];
    let half = [kernel[0] as i64 / 2, kernel[1] as i64 / 2, kernel[2] as i64 / 2];
    let mut out = DenseGrid::zeros(out_dims, c_out);
    for oz in 0..out_dims[2] {
        for oy in 0..out_dims[1] {
            for ox in 0..out_dims[0] {
                let mut ko = 0usize;
                for dz in -half[2]..=half[2] {
                    for dy in -half[1]..=half[1] {
                        for dx in -half[0]..=half[0] {
                            let ix = ox as i64 * stride as i64 + dx;
                            let iy = oy as i64 * stride as i64 + dy;
                            let iz = oz as i64 * stride as i64 + dz;
                            if ix >= 0
                                && iy >= 0
                                && iz >= 0
                                && (ix as usize) < input.dims[0]
                                && (iy as usize) < input.dims[1]
                                && (iz as usize) < input.dims[2]
                            {
                                let base = ko * c_in * c_out;
                                for ci in 0..c_in {
                                    let v =
                                        input.at(ix as usize, iy as usize, iz as usize, ci);
                                    if v == 0.0 {
                                        continue;
                                    }
                                    for co in 0..c_out {
                                        *out.at_mut(ox, oy, oz, co) +=
                                            v * weights[base + ci * c_out + co];
                                    }
                                }
                            }
                            ko += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Transposed counterpart of `dense_conv`:
/// out[i, co] = sum_k w[k, ci, co] * in[(i - k)/s, ci] where the division
/// is exact and in range.
#[allow(clippy::too_many_arguments)]
pub fn dense_transposed_conv(
    input: &DenseGrid,
    weights: &[f64],
    kernel: [usize; 3],
    c_in: usize,
    c_out: usize,
    stride: usize,
    out_dims: [usize; 3],
) -> DenseGrid {
    assert_eq!(input.channels, c_in);
    let half = [kernel[0] as i64 / 2, kernel[1] as i64 / 2, kernel[2] as i64 / 2];
    let mut out = DenseGrid::zeros(out_dims, c_out);
    for oz in 0..out_dims[2] {
        for oy in 0..out_dims[1] {
            for ox in 0..out_dims[0] {
                let mut ko = 0usize;
                for dz in -half[2]..=half[2] {
                    for dy in -half[1]..=half[1] {
                        for dx in -half[0]..=half[0] {
                            let nx = ox as i64 - dx;
                            let ny = oy as i64 - dy;
                            let nz = oz as i64 - dz;
                            let s = stride as i64;
                            if nx >= 0
                                && ny >= 0
                                && nz >= 0
                                && nx % s == 0
                                && ny % s == 0
                                && nz % s == 0
                            {
                                let (sx, sy, sz) =
                                    ((nx / s) as usize, (ny / s) as usize, (nz / s) as usize);
                                if sx < input.dims[0] && sy < input.dims[1] && sz < input.dims[2]
                                {
                                    let base = ko * c_in * c_out;
                                    for ci in 0..c_in {
                                        let v = input.at(sx, sy, sz, ci);
                                        if v == 0.0 {
                                            continue;
                                        }
                                        for co in 0..c_out {
                                            *out.at_mut(ox, oy, oz, co) +=
                                                v * weights[base + ci * c_out + co];
                                        }
                                    }
                                }
                            }
                            ko += 1;
                        }
                    }
                }
            }
        }
    }
    out
}
