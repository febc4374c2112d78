//! Toy training path: L2 flow loss, hand-rolled backward through the
//! whole pipeline, and an Adam-style optimizer.

use alloc::vec::Vec;

use crate::cloud::{FlowField, FramePair};
use crate::error::{CoreError, Result};
use crate::grid::GridConfig;
use crate::math;
use crate::network::{
    head_backward, ssf_forward, unet_backward, unpillar_backward, SsfCache, SsfOutput, SsfParams,
};
use crate::nn::{Mat, NormMode};
use crate::params::{GradStore, ParamStore};
use crate::fusion::virtual_vfe_backward;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Toy-scale default learning rate.
pub const DEFAULT_TOY_LR: f64 = 1e-3;

/// Mean L2 distance between predicted and ground-truth flow over the
/// processed points. The flag is true when no point was processed (the
/// loss is then defined as 0).
pub fn flow_loss(pred: &FlowField, gt: &[[f64; 3]], processed: &[bool]) -> Result<(f64, bool)> {
    if pred.len() != gt.len() || processed.len() != gt.len() {
        return Err(CoreError::Contract("flow_loss: length mismatch".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..gt.len() {
        if processed[i] {
            let d = [
                pred.flow[i][0] - gt[i][0],
                pred.flow[i][1] - gt[i][1],
                pred.flow[i][2] - gt[i][2],
            ];
            sum += math::norm3(d);
            count += 1;
        }
    }
    if count == 0 {
        return Ok((0.0, true));
    }
    Ok((sum / count as f64, false))
}

/// One forward pass plus full reverse-mode accumulation; returns the loss
/// and the parameter gradients. Ground truth comes from `cloud_t.gt_flow`.
pub fn backward_pipeline(
    pair: &FramePair,
    net: &SsfParams,
    grid: &GridConfig,
    ps: &mut ParamStore,
    mode: NormMode,
) -> Result<(f64, GradStore)> {
    let gt = pair
        .cloud_t
        .gt_flow
        .as_ref()
        .ok_or_else(|| CoreError::Contract("backward_pipeline: cloud_t has no gt_flow".into()))?
        .clone();
    let out = ssf_forward(pair, net, grid, ps, mode)?;
    let (loss, empty) = flow_loss(&out.flow, &gt, &out.processed)?;
    let mut grads = GradStore::zeros_like(ps);
    if empty {
        return Ok((loss, grads));
    }
    let cache = out
        .cache
        .as_ref()
        .ok_or_else(|| CoreError::Contract("backward_pipeline: missing forward cache".into()))?;
    accumulate_gradients(&out, cache, &gt, net, ps, &mut grads)?;
    Ok((loss, grads))
}

fn accumulate_gradients(
    out: &SsfOutput,
    cache: &SsfCache,
    gt: &[[f64; 3]],
    net: &SsfParams,
    ps: &ParamStore,
    grads: &mut GradStore,
) -> Result<()> {
    let n_proc = cache.processed_rows.len();
    // d(mean ‖pred − gt‖)/d(delta_k) = (pred_k − gt_k)/(‖·‖ · n).
    let mut g_delta = Mat::zeros(n_proc, 3);
    for (r, &orig) in cache.processed_rows.iter().enumerate() {
        let d = [
            out.flow.flow[orig][0] - gt[orig][0],
            out.flow.flow[orig][1] - gt[orig][1],
            out.flow.flow[orig][2] - gt[orig][2],
        ];
        let norm = math::norm3(d);
        if norm > 1e-12 {
            let scale = 1.0 / (norm * n_proc as f64);
            for k in 0..3 {
                g_delta.row_mut(r)[k] = d[k] * scale;
            }
        }
    }

    let (g_dec_pt, g_vfe_pt) = head_backward(&g_delta, net, &cache.head, ps, grads);
    let g_dec_voxels = unpillar_backward(&g_dec_pt, &cache.jv);
    let g_fused = unet_backward(&g_dec_voxels, net, &cache.unet, ps, grads)?;
    let c = net.cfg.vfe_out;
    let mut g_et = Mat::zeros(g_fused.rows, c);
    let mut g_et1 = Mat::zeros(g_fused.rows, c);
    for r in 0..g_fused.rows {
        g_et.row_mut(r).copy_from_slice(&g_fused.row(r)[..c]);
        g_et1.row_mut(r).copy_from_slice(&g_fused.row(r)[c..]);
    }
    // Input gradients (on the 9-dim point features) are discarded.
    let _ = virtual_vfe_backward(&net.vfe, ps, grads, &cache.vfe_t.cache, &g_et, Some(&g_vfe_pt));
    let _ = virtual_vfe_backward(&net.vfe, ps, grads, &cache.vfe_t1.cache, &g_et1, None);
    Ok(())
}

/// Adam over the flattened trainable parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(ps: &ParamStore, lr: f64) -> Self {
        let n = ps.trainable_len();
        Adam {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step_count: 0,
            m: alloc::vec![0.0; n],
            v: alloc::vec![0.0; n],
        }
    }

    pub fn step(&mut self, ps: &mut ParamStore, grads: &GradStore) -> Result<()> {
        let g = grads.flatten_trainable(ps);
        if g.len() != self.m.len() {
            return Err(CoreError::Contract("Adam: gradient length mismatch".into()));
        }
        self.step_count += 1;
        let bc1 = 1.0 - math::powi(self.beta1, self.step_count as i32);
        let bc2 = 1.0 - math::powi(self.beta2, self.step_count as i32);
        let mut theta = ps.flatten_trainable();
        for i in 0..g.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= self.lr * m_hat / (math::sqrt(v_hat) + self.eps);
        }
        ps.set_trainable(&theta)
    }
}

/// Cycle through `pairs` for `steps` optimizer steps; returns the
/// per-step loss trace. Aborts with an error naming the step when the
/// loss turns non-finite.
pub fn fit(
    pairs: &[FramePair],
    net: &SsfParams,
    grid: &GridConfig,
    ps: &mut ParamStore,
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(CoreError::Contract("fit: need at least one frame pair".into()));
    }
    let mut opt = Adam::new(ps, lr);
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let pair = &pairs[step % pairs.len()];
        let (loss, grads) = backward_pipeline(pair, net, grid, ps, NormMode::Train)?;
        if !loss.is_finite() {
            return Err(CoreError::Numeric(alloc::format!(
                "fit: non-finite loss at step {step}"
            )));
        }
        trace.push(loss);
        opt.step(ps, &grads)?;
    }
    Ok(trace)
}
