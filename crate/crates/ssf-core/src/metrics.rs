//! End-point-error metric suite: plain EPE, three-way EPE, speed-bucket
//! normalized EPE, and range-wise EPE over distance bins.
//!
//! Empty subsets are reported as absent (`None`), never as zero; all
//! summary means skip absent cells.

use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;

/// Default three-way dynamic/static speed threshold in m/s.
pub const DEFAULT_THREEWAY_THRESHOLD_MPS: f64 = 0.5;
/// Range-wise dynamic/static speed threshold in m/s (pedestrian walking
/// speed).
pub const RANGEWISE_THRESHOLD_MPS: f64 = 1.4;
/// Speed bucket width for the normalized metric, in m/s.
pub const BUCKET_WIDTH_MPS: f64 = 0.4;
/// Default interior range-bin edges in meters; bins are
/// [0,35), [35,50), [50,75), [75,100), [100,inf).
pub const DEFAULT_RANGE_EDGES_M: [f64; 4] = [35.0, 50.0, 75.0, 100.0];

/// One evaluated frame: predicted and ground-truth flow plus per-point
/// attributes.
#[derive(Debug, Clone)]
pub struct EvalFrame {
    pub pred_flow: Vec<[f64; 3]>,
    pub gt_flow: Vec<[f64; 3]>,
    /// Horizontal (x, y) distance from the ego origin at time t.
    pub range_m: Vec<f64>,
    pub is_foreground: Vec<bool>,
    pub class_id: Vec<u8>,
    /// Scan interval in seconds.
    pub dt: f64,
}

impl EvalFrame {
    pub fn len(&self) -> usize {
        self.pred_flow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pred_flow.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pred_flow.len();
        if self.gt_flow.len() != n
            || self.range_m.len() != n
            || self.is_foreground.len() != n
            || self.class_id.len() != n
        {
            return Err(CoreError::Contract("EvalFrame: field lengths differ".into()));
        }
        if !(self.dt > 0.0) {
            return Err(CoreError::Contract("EvalFrame: dt must be positive".into()));
        }
        if self.range_m.iter().any(|&r| !(r >= 0.0)) {
            return Err(CoreError::Contract("EvalFrame: range_m must be non-negative".into()));
        }
        Ok(())
    }
}

/// An EPE value over a subset together with the subset size. Empty
/// subsets never produce a cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub value: f64,
    pub count: usize,
}

fn point_error(pred: [f64; 3], gt: [f64; 3]) -> f64 {
    math::norm3([pred[0] - gt[0], pred[1] - gt[1], pred[2] - gt[2]])
}

/// Mean end-point error over the points selected by `subset`;
/// `None` for an empty subset.
pub fn epe(pred: &[[f64; 3]], gt: &[[f64; 3]], subset: &[bool]) -> Option<f64> {
    epe_cell(pred, gt, subset).map(|c| c.value)
}

fn epe_cell(pred: &[[f64; 3]], gt: &[[f64; 3]], subset: &[bool]) -> Option<Cell> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..pred.len() {
        if subset[i] {
            sum += point_error(pred[i], gt[i]);
            count += 1;
        }
    }
    (count > 0).then(|| Cell { value: sum / count as f64, count })
}

/// Per-point dynamic flags: dynamic iff ‖gt‖/dt strictly exceeds
/// `threshold_mps`.
pub fn classify_speed(gt_flow: &[[f64; 3]], dt: f64, threshold_mps: f64) -> Vec<bool> {
    gt_flow.iter().map(|&f| math::norm3(f) / dt > threshold_mps).collect()
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Three-way split: foreground-dynamic, foreground-static,
/// background-static. Background-dynamic points are discarded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThreeWayEpe {
    pub fd: Option<Cell>,
    pub fs: Option<Cell>,
    pub bs: Option<Cell>,
    /// Unweighted average of the present parts.
    pub mean: Option<f64>,
}

pub fn three_way_epe(frame: &EvalFrame, threshold_mps: f64) -> Result<ThreeWayEpe> {
    frame.validate()?;
    let dynamic = classify_speed(&frame.gt_flow, frame.dt, threshold_mps);
    let pick = |want_fg: bool, want_dyn: bool| -> Vec<bool> {
        (0..frame.len())
            .map(|i| frame.is_foreground[i] == want_fg && dynamic[i] == want_dyn)
            .collect()
    };
    let fd = epe_cell(&frame.pred_flow, &frame.gt_flow, &pick(true, true));
    let fs = epe_cell(&frame.pred_flow, &frame.gt_flow, &pick(true, false));
    let bs = epe_cell(&frame.pred_flow, &frame.gt_flow, &pick(false, false));
    let mean = mean_present([fd, fs, bs].into_iter().map(|c| c.map(|c| c.value)));
    Ok(ThreeWayEpe { fd, fs, bs, mean })
}

/// One non-empty (class, speed-bucket) cell of the normalized metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BucketCell {
    pub class_id: u8,
    /// Speed bucket index; bucket b covers [b·0.4, (b+1)·0.4) m/s.
    pub bucket: usize,
    pub epe: f64,
    pub mean_speed_mps: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketNormalizedEpe {
    /// Non-empty dynamic cells (bucket ≥ 1), ordered by (class, bucket).
    pub cells: Vec<BucketCell>,
    /// Static (bucket 0) EPE per class, ordered by class.
    pub static_cells: Vec<BucketCell>,
    /// Mean over classes of their static-point EPE.
    pub static_mean: Option<f64>,
    /// Mean over classes of the per-class mean of epe/mean-bucket-speed.
    pub dynamic_normalized_mean: Option<f64>,
}

pub fn bucket_normalized_epe(frame: &EvalFrame) -> Result<BucketNormalizedEpe> {
    frame.validate()?;
    let n = frame.len();
    let speed: Vec<f64> = frame.gt_flow.iter().map(|&f| math::norm3(f) / frame.dt).collect();
    let bucket: Vec<usize> = speed.iter().map(|&s| math::floor(s / BUCKET_WIDTH_MPS) as usize).collect();

    let mut classes: Vec<u8> = frame.class_id.to_vec();
    classes.sort_unstable();
    classes.dedup();

    let mut cells = Vec::new();
    let mut static_cells = Vec::new();
    let mut static_scores = Vec::new();
    let mut dynamic_scores = Vec::new();
    for &cls in &classes {
        let in_class: Vec<usize> = (0..n).filter(|&i| frame.class_id[i] == cls).collect();
        let max_bucket = in_class.iter().map(|&i| bucket[i]).max().unwrap();
        let mut class_normalized = Vec::new();
        for b in 0..=max_bucket {
            let subset: Vec<bool> =
                (0..n).map(|i| frame.class_id[i] == cls && bucket[i] == b).collect();
            let Some(cell) = epe_cell(&frame.pred_flow, &frame.gt_flow, &subset) else {
                continue;
            };
            let mean_speed = (0..n)
                .filter(|&i| subset[i])
                .map(|i| speed[i])
                .sum::<f64>()
                / cell.count as f64;
            let out = BucketCell {
                class_id: cls,
                bucket: b,
                epe: cell.value,
                mean_speed_mps: mean_speed,
                count: cell.count,
            };
            if b == 0 {
                static_scores.push(cell.value);
                static_cells.push(out);
            } else {
                class_normalized.push(cell.value / mean_speed);
                cells.push(out);
            }
        }
        if !class_normalized.is_empty() {
            dynamic_scores
                .push(class_normalized.iter().sum::<f64>() / class_normalized.len() as f64);
        }
    }
    let static_mean =
        (!static_scores.is_empty()).then(|| static_scores.iter().sum::<f64>() / static_scores.len() as f64);
    let dynamic_normalized_mean = (!dynamic_scores.is_empty())
        .then(|| dynamic_scores.iter().sum::<f64>() / dynamic_scores.len() as f64);
    Ok(BucketNormalizedEpe { cells, static_cells, static_mean, dynamic_normalized_mean })
}

/// One distance bin of the range-wise metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeBin {
    pub lower_m: f64,
    /// `None` for the unbounded final bin.
    pub upper_m: Option<f64>,
    pub dynamic: Option<Cell>,
    pub stat: Option<Cell>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeWiseEpe {
    pub bins: Vec<RangeBin>,
    /// Mean over bins with a non-empty dynamic cell.
    pub dynamic_mean: Option<f64>,
    /// Mean over bins with a non-empty static cell.
    pub static_mean: Option<f64>,
}

/// Range-wise EPE over half-open distance bins; `edges_m` are the
/// interior bin boundaries (the first bin starts at 0, the last is
/// unbounded). With `strict`, empty cells are an error instead of being
/// skipped in the means.
pub fn range_wise_epe(frame: &EvalFrame, edges_m: &[f64], strict: bool) -> Result<RangeWiseEpe> {
    frame.validate()?;
    if edges_m.windows(2).any(|w| !(w[0] < w[1])) || edges_m.iter().any(|&e| !(e > 0.0)) {
        return Err(CoreError::Contract(
            "range_wise_epe: bin edges must be positive and strictly ascending".into(),
        ));
    }
    let dynamic = classify_speed(&frame.gt_flow, frame.dt, RANGEWISE_THRESHOLD_MPS);
    let mut bins = Vec::new();
    for b in 0..=edges_m.len() {
        let lower = if b == 0 { 0.0 } else { edges_m[b - 1] };
        let upper = edges_m.get(b).copied();
        let in_bin = |r: f64| r >= lower && upper.map_or(true, |u| r < u);
        let pick = |want_dyn: bool| -> Vec<bool> {
            (0..frame.len())
                .map(|i| in_bin(frame.range_m[i]) && dynamic[i] == want_dyn)
                .collect()
        };
        let dyn_cell = epe_cell(&frame.pred_flow, &frame.gt_flow, &pick(true));
        let stat_cell = epe_cell(&frame.pred_flow, &frame.gt_flow, &pick(false));
        if strict && (dyn_cell.is_none() || stat_cell.is_none()) {
            return Err(CoreError::Contract(alloc::format!(
                "range_wise_epe: empty cell in bin {b} under strict mode"
            )));
        }
        bins.push(RangeBin { lower_m: lower, upper_m: upper, dynamic: dyn_cell, stat: stat_cell });
    }
    let dynamic_mean = mean_present(bins.iter().map(|b| b.dynamic.map(|c| c.value)));
    let static_mean = mean_present(bins.iter().map(|b| b.stat.map(|c| c.value)));
    Ok(RangeWiseEpe { bins, dynamic_mean, static_mean })
}

/// All three metric families for one frame.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub threeway: ThreeWayEpe,
    pub bucket: BucketNormalizedEpe,
    pub rangewise: RangeWiseEpe,
    pub range_edges_m: Vec<f64>,
    pub threeway_threshold_mps: f64,
}

pub fn evaluate_frame(
    frame: &EvalFrame,
    threeway_threshold_mps: f64,
    range_edges_m: &[f64],
) -> Result<MetricsReport> {
    Ok(MetricsReport {
        threeway: three_way_epe(frame, threeway_threshold_mps)?,
        bucket: bucket_normalized_epe(frame)?,
        rangewise: range_wise_epe(frame, range_edges_m, false)?,
        range_edges_m: range_edges_m.to_vec(),
        threeway_threshold_mps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use approx::assert_abs_diff_eq;

    fn frame(
        pred: Vec<[f64; 3]>,
        gt: Vec<[f64; 3]>,
        range: Vec<f64>,
        fg: Vec<bool>,
        class: Vec<u8>,
        dt: f64,
    ) -> EvalFrame {
        EvalFrame {
            pred_flow: pred,
            gt_flow: gt,
            range_m: range,
            is_foreground: fg,
            class_id: class,
            dt,
        }
    }

    fn random_frame(rng: &mut SplitMix64, n: usize) -> EvalFrame {
        let mut pred = Vec::new();
        let mut gt = Vec::new();
        let mut range = Vec::new();
        let mut fg = Vec::new();
        let mut class = Vec::new();
        for _ in 0..n {
            // A third of the points move slowly so static cells are
            // populated in every frame.
            let scale = if rng.below(3) == 0 { 0.03 } else { 0.3 };
            let g = [
                rng.uniform(-scale, scale),
                rng.uniform(-scale, scale),
                rng.uniform(-scale / 6.0, scale / 6.0),
            ];
            let e = [rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)];
            pred.push([g[0] + e[0], g[1] + e[1], g[2] + e[2]]);
            gt.push(g);
            range.push(rng.uniform(0.0, 130.0));
            fg.push(rng.below(2) == 1);
            class.push(rng.below(3) as u8);
        }
        frame(pred, gt, range, fg, class, 0.1)
    }

    #[test]
    fn epe_hand_values() {
        let pred = [[0.0, 3.0, 4.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]];
        let gt = [[0.0; 3]; 4];
        assert_eq!(epe(&pred, &gt, &[true, false, false, false]), Some(5.0));
        assert_eq!(epe(&pred, &gt, &[false, true, true, true]), Some(2.0));
        assert_eq!(epe(&pred, &gt, &[false; 4]), None);
        assert_eq!(epe(&gt, &gt, &[true; 4]), Some(0.0));
    }

    #[test]
    fn classify_speed_boundary_is_strict() {
        // dt = 1 keeps the decimal literals exact through the division,
        // so the boundary case is a true equality.
        let flows = [[1.4, 0.0, 0.0], [1.5, 0.0, 0.0], [0.0, 0.0, 0.0]];
        assert_eq!(classify_speed(&flows, 1.0, 1.4), [false, true, false]);
    }

    #[test]
    fn three_way_hand_frame() {
        // FD error 0.3, FS error 0.03, BS error 0.0; mean 0.11.
        let gt = alloc::vec![[0.3, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let pred = alloc::vec![[0.6, 0.0, 0.0], [0.03, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let f = frame(
            pred,
            gt,
            alloc::vec![1.0; 3],
            alloc::vec![true, true, false],
            alloc::vec![1, 1, 0],
            0.1,
        );
        let tw = three_way_epe(&f, DEFAULT_THREEWAY_THRESHOLD_MPS).unwrap();
        assert_abs_diff_eq!(tw.fd.unwrap().value, 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(tw.fs.unwrap().value, 0.03, epsilon = 1e-15);
        assert_eq!(tw.bs.unwrap().value, 0.0);
        assert_abs_diff_eq!(tw.mean.unwrap(), 0.11, epsilon = 1e-15);
    }

    #[test]
    fn three_way_absent_parts() {
        // All points background-static with uniform error e.
        let gt = alloc::vec![[0.0; 3]; 4];
        let pred = alloc::vec![[0.2, 0.0, 0.0]; 4];
        let f = frame(
            pred,
            gt,
            alloc::vec![1.0; 4],
            alloc::vec![false; 4],
            alloc::vec![0; 4],
            0.1,
        );
        let tw = three_way_epe(&f, DEFAULT_THREEWAY_THRESHOLD_MPS).unwrap();
        assert!(tw.fd.is_none() && tw.fs.is_none());
        assert_abs_diff_eq!(tw.mean.unwrap(), 0.2, epsilon = 1e-15);
    }

    #[test]
    fn three_way_excludes_background_dynamic() {
        let gt = alloc::vec![[1.0, 0.0, 0.0]];
        let pred = alloc::vec![[9.0, 0.0, 0.0]];
        let f = frame(pred, gt, alloc::vec![1.0], alloc::vec![false], alloc::vec![0], 0.1);
        let tw = three_way_epe(&f, DEFAULT_THREEWAY_THRESHOLD_MPS).unwrap();
        assert!(tw.fd.is_none() && tw.fs.is_none() && tw.bs.is_none() && tw.mean.is_none());
    }

    #[test]
    fn bucket_hand_values() {
        // One class, one dynamic bucket: speed 2.0 m/s, uniform EPE 0.4.
        let gt = alloc::vec![[0.2, 0.0, 0.0]; 3];
        let pred = alloc::vec![[0.2, 0.4, 0.0]; 3];
        let f = frame(pred, gt, alloc::vec![1.0; 3], alloc::vec![true; 3], alloc::vec![1; 3], 0.1);
        let b = bucket_normalized_epe(&f).unwrap();
        assert!(b.static_mean.is_none());
        assert_abs_diff_eq!(b.dynamic_normalized_mean.unwrap(), 0.2, epsilon = 1e-15);
        assert_eq!(b.cells.len(), 1);
        assert_eq!(b.cells[0].bucket, 5); // 2.0 / 0.4
        assert_abs_diff_eq!(b.cells[0].mean_speed_mps, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn bucket_averages_across_classes() {
        // Class 1 normalized 0.1 (speed 1.0, epe 0.1); class 2 normalized
        // 0.3 (speed 1.0, epe 0.3) → dynamic mean 0.2.
        let gt = alloc::vec![[0.1, 0.0, 0.0]; 2];
        let pred = alloc::vec![[0.1, 0.1, 0.0], [0.1, 0.3, 0.0]];
        let f = frame(pred, gt, alloc::vec![1.0; 2], alloc::vec![true; 2], alloc::vec![1, 2], 0.1);
        let b = bucket_normalized_epe(&f).unwrap();
        assert_abs_diff_eq!(b.dynamic_normalized_mean.unwrap(), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn bucket_static_bucket_is_half_open() {
        // Speed exactly 0.4 m/s lands in bucket 1, not the static bucket
        // (dt = 1 keeps the boundary value exact).
        let gt = alloc::vec![[0.4, 0.0, 0.0]];
        let pred = gt.clone();
        let f = frame(pred, gt, alloc::vec![1.0], alloc::vec![true], alloc::vec![0], 1.0);
        let b = bucket_normalized_epe(&f).unwrap();
        assert!(b.static_cells.is_empty());
        assert_eq!(b.cells[0].bucket, 1);
    }

    #[test]
    fn range_wise_hand_values() {
        // Two populated bins with dynamic EPEs 0.1 / 0.3 and static EPEs
        // 0.01 / 0.03.
        let gt = alloc::vec![[0.5, 0.0, 0.0], [0.0; 3], [0.5, 0.0, 0.0], [0.0; 3]];
        let pred = alloc::vec![
            [0.5, 0.1, 0.0],
            [0.01, 0.0, 0.0],
            [0.5, 0.3, 0.0],
            [0.03, 0.0, 0.0]
        ];
        let f = frame(
            pred,
            gt,
            alloc::vec![10.0, 10.0, 40.0, 40.0],
            alloc::vec![true; 4],
            alloc::vec![1; 4],
            0.1,
        );
        let r = range_wise_epe(&f, &[35.0], false).unwrap();
        assert_abs_diff_eq!(r.dynamic_mean.unwrap(), 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(r.static_mean.unwrap(), 0.02, epsilon = 1e-15);
        assert!(range_wise_epe(&f, &[35.0], true).is_ok());
        // Strict mode rejects the frame once a bin goes empty.
        assert!(range_wise_epe(&f, &[35.0, 50.0], true).is_err());
    }

    #[test]
    fn range_bin_boundary_is_half_open() {
        let gt = alloc::vec![[0.0; 3]];
        let f = frame(
            gt.clone(),
            gt,
            alloc::vec![35.0],
            alloc::vec![false],
            alloc::vec![0],
            0.1,
        );
        let r = range_wise_epe(&f, &DEFAULT_RANGE_EDGES_M, false).unwrap();
        assert!(r.bins[0].stat.is_none());
        assert_eq!(r.bins[1].stat.unwrap().count, 1);
    }

    #[test]
    fn range_wise_rejects_unsorted_edges() {
        let gt = alloc::vec![[0.0; 3]];
        let f = frame(
            gt.clone(),
            gt,
            alloc::vec![1.0],
            alloc::vec![false],
            alloc::vec![0],
            0.1,
        );
        assert!(range_wise_epe(&f, &[50.0, 35.0], false).is_err());
    }

    // ---- independent naive oracles, written straight off the formulas ----

    fn oracle_speed(f: [f64; 3], dt: f64) -> f64 {
        (f[0] * f[0] + f[1] * f[1] + f[2] * f[2]).sqrt() / dt
    }

    fn oracle_epe(frame: &EvalFrame, idx: &[usize]) -> Option<f64> {
        if idx.is_empty() {
            return None;
        }
        let s: f64 = idx
            .iter()
            .map(|&i| {
                let d = [
                    frame.pred_flow[i][0] - frame.gt_flow[i][0],
                    frame.pred_flow[i][1] - frame.gt_flow[i][1],
                    frame.pred_flow[i][2] - frame.gt_flow[i][2],
                ];
                (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
            })
            .sum();
        Some(s / idx.len() as f64)
    }

    fn oracle_three_way(frame: &EvalFrame, th: f64) -> (Option<f64>, Option<f64>, Option<f64>, Option<f64>) {
        let mut fd = Vec::new();
        let mut fs = Vec::new();
        let mut bs = Vec::new();
        for i in 0..frame.len() {
            let dynamic = oracle_speed(frame.gt_flow[i], frame.dt) > th;
            match (frame.is_foreground[i], dynamic) {
                (true, true) => fd.push(i),
                (true, false) => fs.push(i),
                (false, false) => bs.push(i),
                (false, true) => {}
            }
        }
        let parts = [oracle_epe(frame, &fd), oracle_epe(frame, &fs), oracle_epe(frame, &bs)];
        let present: Vec<f64> = parts.iter().flatten().copied().collect();
        let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        (parts[0], parts[1], parts[2], mean)
    }

    fn oracle_bucket(frame: &EvalFrame) -> (Option<f64>, Option<f64>) {
        let mut classes: Vec<u8> = frame.class_id.clone();
        classes.sort_unstable();
        classes.dedup();
        let mut statics = Vec::new();
        let mut dyns = Vec::new();
        for cls in classes {
            let static_idx: Vec<usize> = (0..frame.len())
                .filter(|&i| {
                    frame.class_id[i] == cls && oracle_speed(frame.gt_flow[i], frame.dt) < 0.4
                })
                .collect();
            if let Some(e) = oracle_epe(frame, &static_idx) {
                statics.push(e);
            }
            let mut normalized = Vec::new();
            for b in 1..64usize {
                let lo = b as f64 * 0.4;
                let hi = lo + 0.4;
                let idx: Vec<usize> = (0..frame.len())
                    .filter(|&i| {
                        let s = oracle_speed(frame.gt_flow[i], frame.dt);
                        frame.class_id[i] == cls && s >= lo && s < hi
                    })
                    .collect();
                if let Some(e) = oracle_epe(frame, &idx) {
                    let ms = idx
                        .iter()
                        .map(|&i| oracle_speed(frame.gt_flow[i], frame.dt))
                        .sum::<f64>()
                        / idx.len() as f64;
                    normalized.push(e / ms);
                }
            }
            if !normalized.is_empty() {
                dyns.push(normalized.iter().sum::<f64>() / normalized.len() as f64);
            }
        }
        let sm = (!statics.is_empty()).then(|| statics.iter().sum::<f64>() / statics.len() as f64);
        let dm = (!dyns.is_empty()).then(|| dyns.iter().sum::<f64>() / dyns.len() as f64);
        (sm, dm)
    }

    fn oracle_range_wise(frame: &EvalFrame, edges: &[f64]) -> (Option<f64>, Option<f64>) {
        let mut dyn_cells = Vec::new();
        let mut stat_cells = Vec::new();
        let mut bounds = alloc::vec![0.0];
        bounds.extend_from_slice(edges);
        bounds.push(f64::INFINITY);
        for w in bounds.windows(2) {
            let in_bin: Vec<usize> = (0..frame.len())
                .filter(|&i| frame.range_m[i] >= w[0] && frame.range_m[i] < w[1])
                .collect();
            let d: Vec<usize> = in_bin
                .iter()
                .copied()
                .filter(|&i| oracle_speed(frame.gt_flow[i], frame.dt) > 1.4)
                .collect();
            let s: Vec<usize> = in_bin
                .iter()
                .copied()
                .filter(|&i| oracle_speed(frame.gt_flow[i], frame.dt) <= 1.4)
                .collect();
            if let Some(e) = oracle_epe(frame, &d) {
                dyn_cells.push(e);
            }
            if let Some(e) = oracle_epe(frame, &s) {
                stat_cells.push(e);
            }
        }
        let dm = (!dyn_cells.is_empty()).then(|| dyn_cells.iter().sum::<f64>() / dyn_cells.len() as f64);
        let sm =
            (!stat_cells.is_empty()).then(|| stat_cells.iter().sum::<f64>() / stat_cells.len() as f64);
        (dm, sm)
    }

    #[test]
    fn random_frames_match_naive_oracles() {
        let mut rng = SplitMix64::new(0xA11CE);
        for _ in 0..50 {
            let f = random_frame(&mut rng, 120);
            let tw = three_way_epe(&f, DEFAULT_THREEWAY_THRESHOLD_MPS).unwrap();
            let (ofd, ofs, obs, om) = oracle_three_way(&f, DEFAULT_THREEWAY_THRESHOLD_MPS);
            for (got, want) in [
                (tw.fd.map(|c| c.value), ofd),
                (tw.fs.map(|c| c.value), ofs),
                (tw.bs.map(|c| c.value), obs),
                (tw.mean, om),
            ] {
                match (got, want) {
                    (Some(a), Some(b)) => assert_abs_diff_eq!(a, b, epsilon = 1e-12),
                    (None, None) => {}
                    other => panic!("presence mismatch: {other:?}"),
                }
            }

            let b = bucket_normalized_epe(&f).unwrap();
            let (osm, odm) = oracle_bucket(&f);
            assert_abs_diff_eq!(b.static_mean.unwrap(), osm.unwrap(), epsilon = 1e-12);
            assert_abs_diff_eq!(
                b.dynamic_normalized_mean.unwrap(),
                odm.unwrap(),
                epsilon = 1e-12
            );

            let r = range_wise_epe(&f, &DEFAULT_RANGE_EDGES_M, false).unwrap();
            let (odm, osm) = oracle_range_wise(&f, &DEFAULT_RANGE_EDGES_M);
            assert_abs_diff_eq!(r.dynamic_mean.unwrap(), odm.unwrap(), epsilon = 1e-12);
            assert_abs_diff_eq!(r.static_mean.unwrap(), osm.unwrap(), epsilon = 1e-12);
        }
    }

    #[test]
    fn epe_subset_additivity() {
        let mut rng = SplitMix64::new(7);
        let f = random_frame(&mut rng, 60);
        let half_a: Vec<bool> = (0..60).map(|i| i < 30).collect();
        let half_b: Vec<bool> = (0..60).map(|i| i >= 30).collect();
        let whole = alloc::vec![true; 60];
        let ea = epe(&f.pred_flow, &f.gt_flow, &half_a).unwrap();
        let eb = epe(&f.pred_flow, &f.gt_flow, &half_b).unwrap();
        let ew = epe(&f.pred_flow, &f.gt_flow, &whole).unwrap();
        assert_abs_diff_eq!(ew, 0.5 * ea + 0.5 * eb, epsilon = 1e-12);
    }

    #[test]
    fn error_scaling_scales_every_cell() {
        let mut rng = SplitMix64::new(11);
        let f = random_frame(&mut rng, 80);
        let alpha = 3.0;
        let mut scaled = f.clone();
        for i in 0..scaled.len() {
            for k in 0..3 {
                scaled.pred_flow[i][k] =
                    f.gt_flow[i][k] + alpha * (f.pred_flow[i][k] - f.gt_flow[i][k]);
            }
        }
        let r0 = range_wise_epe(&f, &DEFAULT_RANGE_EDGES_M, false).unwrap();
        let r1 = range_wise_epe(&scaled, &DEFAULT_RANGE_EDGES_M, false).unwrap();
        for (b0, b1) in r0.bins.iter().zip(r1.bins.iter()) {
            match (b0.dynamic, b1.dynamic) {
                (Some(a), Some(b)) => assert_abs_diff_eq!(b.value, alpha * a.value, epsilon = 1e-10),
                (None, None) => {}
                other => panic!("presence mismatch: {other:?}"),
            }
        }
        let tw0 = three_way_epe(&f, 0.5).unwrap();
        let tw1 = three_way_epe(&scaled, 0.5).unwrap();
        assert_abs_diff_eq!(tw1.mean.unwrap(), alpha * tw0.mean.unwrap(), epsilon = 1e-10);
    }
}
