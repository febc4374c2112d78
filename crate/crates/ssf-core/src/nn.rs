//! Dense row-major matrices and the affine / batch-norm / ReLU layers
//! used throughout the network, each with an exact backward pass.

use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::params::{GradStore, ParamId, ParamStore, Tensor};
use crate::rng::SplitMix64;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: alloc::vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            debug_assert_eq!(row.len(), c);
            data.extend_from_slice(&row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// self (r x k) * other (k x c).
    pub fn matmul(&self, other: &Mat) -> Mat {
        debug_assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// selfᵀ (k x r)ᵀ * other: (self.cols x other.cols).
    pub fn matmul_transpose_self(&self, other: &Mat) -> Mat {
        debug_assert_eq!(self.rows, other.rows);
        let mut out = Mat::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// self * otherᵀ: (self.rows x other.rows).
    pub fn matmul_transpose_other(&self, other: &Mat) -> Mat {
        debug_assert_eq!(self.cols, other.cols);
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = other.row(j);
                let mut acc = 0.0;
                for (&a, &b) in a_row.iter().zip(b_row.iter()) {
                    acc += a * b;
                }
                *o = acc;
            }
        }
        out
    }
}

/// Normalization behavior during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Identity; used by dense-oracle equivalence tests.
    Off,
    /// Running statistics (inference).
    Eval,
    /// Batch statistics over unmasked rows; updates running stats.
    Train,
}

/// Affine layer y = xW + b with W: in x out.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn register(
        ps: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let limit = math::sqrt(1.0 / fan_in as f64);
        let wdata = (0..fan_in * fan_out).map(|_| rng.uniform(-limit, limit)).collect();
        let bdata = (0..fan_out).map(|_| rng.uniform(-limit, limit)).collect();
        let w = ps.add(
            &alloc::format!("{prefix}.w"),
            Tensor { shape: alloc::vec![fan_in, fan_out], data: wdata },
            true,
        )?;
        let b = ps.add(
            &alloc::format!("{prefix}.b"),
            Tensor { shape: alloc::vec![fan_out], data: bdata },
            true,
        )?;
        Ok(Linear { w, b })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Mat) -> Mat {
        let w = ps.get(self.w);
        let (fan_in, fan_out) = (w.shape[0], w.shape[1]);
        debug_assert_eq!(x.cols, fan_in);
        let wm = Mat { rows: fan_in, cols: fan_out, data: w.data.clone() };
        let mut y = x.matmul(&wm);
        let b = &ps.get(self.b).data;
        for r in 0..y.rows {
            for (v, &bb) in y.row_mut(r).iter_mut().zip(b.iter()) {
                *v += bb;
            }
        }
        y
    }

    /// Accumulates dW, db into `grads`; returns dX.
    pub fn backward(&self, ps: &ParamStore, grads: &mut GradStore, x: &Mat, gy: &Mat) -> Mat {
        let w = ps.get(self.w);
        let (fan_in, fan_out) = (w.shape[0], w.shape[1]);
        let wm = Mat { rows: fan_in, cols: fan_out, data: w.data.clone() };
        let gw = x.matmul_transpose_self(gy);
        for (a, &g) in grads.get_mut(self.w).iter_mut().zip(gw.data.iter()) {
            *a += g;
        }
        let gb = grads.get_mut(self.b);
        for r in 0..gy.rows {
            for (a, &g) in gb.iter_mut().zip(gy.row(r).iter()) {
                *a += g;
            }
        }
        gy.matmul_transpose_other(&wm)
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

/// Saved state for the batch-norm backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    mode: NormMode,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    x: Mat,
    mask: Option<Vec<bool>>,
    active: usize,
}

impl BatchNorm {
    pub fn register(ps: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        let ones = Tensor { shape: alloc::vec![channels], data: alloc::vec![1.0; channels] };
        let zeros = Tensor::zeros(alloc::vec![channels]);
        Ok(BatchNorm {
            gamma: ps.add(&alloc::format!("{prefix}.norm.gamma"), ones.clone(), true)?,
            beta: ps.add(&alloc::format!("{prefix}.norm.beta"), zeros.clone(), true)?,
            running_mean: ps.add(&alloc::format!("{prefix}.norm.mean"), zeros, false)?,
            running_var: ps.add(&alloc::format!("{prefix}.norm.var"), ones, false)?,
            channels,
        })
    }

    /// `row_mask`, when present, marks rows that contribute to batch
    /// statistics (virtual rows are excluded). Normalization itself is
    /// applied to every row.
    pub fn forward(
        &self,
        ps: &mut ParamStore,
        x: &Mat,
        mode: NormMode,
        row_mask: Option<&[bool]>,
    ) -> (Mat, BnCache) {
        debug_assert_eq!(x.cols, self.channels);
        let c = self.channels;
        let (mean, var, active) = match mode {
            NormMode::Off => (alloc::vec![0.0; c], alloc::vec![1.0 - BN_EPS; c], x.rows),
            NormMode::Eval => (
                ps.get(self.running_mean).data.clone(),
                ps.get(self.running_var).data.clone(),
                x.rows,
            ),
            NormMode::Train => {
                let active_rows: Vec<usize> = (0..x.rows)
                    .filter(|&r| row_mask.map_or(true, |m| m[r]))
                    .collect();
                let m = active_rows.len();
                if m == 0 {
                    // No real rows: fall back to identity statistics.
                    (alloc::vec![0.0; c], alloc::vec![1.0 - BN_EPS; c], 0)
                } else {
                    let mut mean = alloc::vec![0.0; c];
                    for &r in &active_rows {
                        for (s, &v) in mean.iter_mut().zip(x.row(r).iter()) {
                            *s += v;
                        }
                    }
                    for s in &mut mean {
                        *s /= m as f64;
                    }
                    let mut var = alloc::vec![0.0; c];
                    for &r in &active_rows {
                        for j in 0..c {
                            let d = x.at(r, j) - mean[j];
                            var[j] += d * d;
                        }
                    }
                    for s in &mut var {
                        *s /= m as f64;
                    }
                    // Update running statistics in place.
                    let rm = &mut ps.get_mut(self.running_mean).data;
                    for (r, &b) in rm.iter_mut().zip(mean.iter()) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                    }
                    let rv = &mut ps.get_mut(self.running_var).data;
                    for (r, &b) in rv.iter_mut().zip(var.iter()) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                    }
                    (mean, var, m)
                }
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / math::sqrt(v + BN_EPS)).collect();
        let gamma = &ps.get(self.gamma).data;
        let beta = &ps.get(self.beta).data;
        let mut y = x.clone();
        if mode != NormMode::Off {
            for r in 0..y.rows {
                let row = y.row_mut(r);
                for j in 0..c {
                    row[j] = gamma[j] * (row[j] - mean[j]) * inv_std[j] + beta[j];
                }
            }
        }
        let cache = BnCache {
            mode,
            mean,
            inv_std,
            x: x.clone(),
            mask: row_mask.map(|m| m.to_vec()),
            active,
        };
        (y, cache)
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        grads: &mut GradStore,
        cache: &BnCache,
        gy: &Mat,
    ) -> Mat {
        if cache.mode == NormMode::Off {
            return gy.clone();
        }
        let c = self.channels;
        let x = &cache.x;
        let gamma = &ps.get(self.gamma).data;

        // dgamma / dbeta over all rows (gamma, beta act on every row).
        {
            let ggamma = grads.get_mut(self.gamma);
            for r in 0..x.rows {
                for j in 0..c {
                    let xhat = (x.at(r, j) - cache.mean[j]) * cache.inv_std[j];
                    ggamma[j] += gy.at(r, j) * xhat;
                }
            }
        }
        {
            let gbeta = grads.get_mut(self.beta);
            for r in 0..gy.rows {
                for (a, &g) in gbeta.iter_mut().zip(gy.row(r).iter()) {
                    *a += g;
                }
            }
        }

        let mut gx = Mat::zeros(x.rows, c);
        match cache.mode {
            NormMode::Eval => {
                for r in 0..x.rows {
                    for j in 0..c {
                        gx.row_mut(r)[j] = gy.at(r, j) * gamma[j] * cache.inv_std[j];
                    }
                }
            }
            NormMode::Train => {
                let m = cache.active as f64;
                let is_active =
                    |r: usize| cache.mask.as_ref().map_or(true, |mask| mask[r]);
                // dxhat everywhere; stat terms only where rows fed the stats.
                let mut dvar = alloc::vec![0.0; c];
                let mut dmu = alloc::vec![0.0; c];
                for r in 0..x.rows {
                    for j in 0..c {
                        let dxhat = gy.at(r, j) * gamma[j];
                        let xc = x.at(r, j) - cache.mean[j];
                        let istd = cache.inv_std[j];
                        dvar[j] += dxhat * xc * (-0.5) * istd * istd * istd;
                        dmu[j] += -dxhat * istd;
                    }
                }
                if cache.active > 0 {
                    let mut sum_xc = alloc::vec![0.0; c];
                    for r in 0..x.rows {
                        if is_active(r) {
                            for j in 0..c {
                                sum_xc[j] += x.at(r, j) - cache.mean[j];
                            }
                        }
                    }
                    for j in 0..c {
                        dmu[j] += dvar[j] * (-2.0 / m) * sum_xc[j];
                    }
                }
                for r in 0..x.rows {
                    for j in 0..c {
                        let dxhat = gy.at(r, j) * gamma[j];
                        let mut g = dxhat * cache.inv_std[j];
                        if cache.active > 0 && is_active(r) {
                            let xc = x.at(r, j) - cache.mean[j];
                            g += dvar[j] * 2.0 * xc / m + dmu[j] / m;
                        }
                        gx.row_mut(r)[j] = g;
                    }
                }
            }
            NormMode::Off => unreachable!(),
        }
        gx
    }
}

/// ReLU forward; returns the output and the positive mask for backward.
pub fn relu_forward(x: &Mat) -> (Mat, Vec<bool>) {
    let mut y = x.clone();
    let mut mask = Vec::with_capacity(x.data.len());
    for v in &mut y.data {
        let pos = *v > 0.0;
        mask.push(pos);
        if !pos {
            *v = 0.0;
        }
    }
    (y, mask)
}

pub fn relu_backward(gy: &Mat, mask: &[bool]) -> Mat {
    let mut gx = gy.clone();
    for (g, &pos) in gx.data.iter_mut().zip(mask.iter()) {
        if !pos {
            *g = 0.0;
        }
    }
    gx
}

/// Fails with the layer name if any value is non-finite.
pub fn check_finite(m: &Mat, layer: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(CoreError::Numeric(alloc::format!("non-finite activation in {layer}")))
    }
}
