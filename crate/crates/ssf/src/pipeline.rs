//! Glue between the file formats and the `ssf-core` compute path; used by
//! the CLI binary and by the acceptance suite.

use ssf_core::metrics::{evaluate_frame, MetricsReport};
use ssf_core::network::{init_params, ssf_forward, SsfParams};
use ssf_core::nn::NormMode;
use ssf_core::params::ParamStore;
use ssf_core::spconv::Counters;
use ssf_core::train::fit;
use ssf_core::FramePair;

use crate::config::RunConfig;
use crate::error::{IoError, Result};
use crate::ssfl::FlowOutput;
use crate::ssfw::WeightBundle;

pub struct Network {
    pub params: SsfParams,
    pub store: ParamStore,
}

/// Register the configured network in a fresh parameter store.
pub fn build_network(cfg: &RunConfig) -> Result<Network> {
    let mut store = ParamStore::new();
    let params = init_params(&cfg.net.unet_config(), cfg.seed, &mut store)?;
    Ok(Network { params, store })
}

/// Forward pass under the given weights; Eval mode, so stored running
/// statistics are used and nothing is mutated logically.
pub fn infer(pair: &FramePair, bundle: &WeightBundle, cfg: &RunConfig) -> Result<(FlowOutput, Counters)> {
    let mut net = build_network(cfg)?;
    bundle.apply_to(&mut net.store)?;
    let out = ssf_forward(pair, &net.params, &cfg.grid, &mut net.store, NormMode::Eval)?;
    let flow = FlowOutput {
        flow: out
            .flow
            .flow
            .iter()
            .map(|f| [f[0] as f32, f[1] as f32, f[2] as f32])
            .collect(),
        processed: out.processed,
    };
    Ok((flow, out.counters))
}

/// Assemble an evaluation frame from a ground-truth-bearing pair and a
/// predicted flow, then run every metric family.
pub fn evaluate(pair: &FramePair, pred: &FlowOutput, cfg: &RunConfig) -> Result<MetricsReport> {
    let n = pair.cloud_t.len();
    if pred.flow.len() != n {
        return Err(IoError::Structure {
            section: "SSFL".into(),
            message: format!("{} predictions for {} points", pred.flow.len(), n),
        });
    }
    let gt_flow = pair.cloud_t.gt_flow.clone().ok_or_else(|| IoError::Structure {
        section: "GF0".into(),
        message: "ground-truth flow required for evaluation".into(),
    })?;
    let class_id = pair.cloud_t.class_id.clone().unwrap_or_else(|| vec![0u8; n]);
    let frame = ssf_core::metrics::EvalFrame {
        pred_flow: pred.flow.iter().map(|f| [f[0] as f64, f[1] as f64, f[2] as f64]).collect(),
        gt_flow,
        range_m: pair
            .cloud_t
            .positions
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt())
            .collect(),
        is_foreground: class_id.iter().map(|&c| c != 0).collect(),
        class_id,
        dt: pair.dt,
    };
    Ok(evaluate_frame(&frame, cfg.dynamic_threshold_mps, &cfg.range_edges_m)?)
}

/// Train from scratch on the given pairs; returns the final weights and
/// the per-step loss trace.
pub fn train_toy(pairs: &[FramePair], cfg: &RunConfig) -> Result<(WeightBundle, Vec<f64>)> {
    let mut net = build_network(cfg)?;
    let trace = fit(pairs, &net.params, &cfg.grid, &mut net.store, cfg.train_steps, cfg.train_lr)?;
    Ok((WeightBundle::from_param_store(&net.store)?, trace))
}

pub fn loss_trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}
