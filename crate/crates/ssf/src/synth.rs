//! Synthetic rigid-motion scenes with exact ground-truth flow.
//!
//! A scene is static background (ground plane plus structures) and a
//! handful of rigid boxes moving at constant horizontal velocity,
//! observed from an ego vehicle that itself moves between the two scans.
//! Positions are quantized to f32 at generation time so SFFP round-trips
//! are bit-exact; ground truth is then computed in f64 from the quantized
//! positions and is exact by construction.

use ssf_core::cloud::{FramePair, PointCloud};
use ssf_core::geom::ego_flow;
use ssf_core::rng::SplitMix64;
use ssf_core::{GridConfig, RigidTransform};

use crate::error::{IoError, Result};

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_VEHICLE: u8 = 1;
pub const CLASS_PEDESTRIAN: u8 = 2;

const VEHICLE_POINTS: usize = 60;
const PEDESTRIAN_POINTS: usize = 25;

#[derive(Debug, Clone)]
pub struct SyntheticSceneConfig {
    pub n_background_points: usize,
    pub n_boxes: usize,
    /// Box edge lengths are drawn from this range (meters).
    pub box_size_range: [f64; 2],
    /// Box speeds (m/s). Vehicle-like boxes draw from the upper half,
    /// pedestrian-like boxes from the lower half, so the two classes
    /// populate distinct speed buckets.
    pub box_speed_range: [f64; 2],
    pub ego_speed_range: [f64; 2],
    pub grid: GridConfig,
    /// Horizontal half-width of the sampled scene, independent of the
    /// grid range so benchmarks can grow the grid around a fixed scene.
    pub scene_extent_m: f64,
    pub dt: f64,
    pub rng_seed: u64,
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        let ranged = [
            ("box_size_range", self.box_size_range),
            ("box_speed_range", self.box_speed_range),
            ("ego_speed_range", self.ego_speed_range),
        ];
        for (name, [lo, hi]) in ranged {
            if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || hi < lo {
                return Err(IoError::Config(format!("{name} [{lo}, {hi}] is invalid")));
            }
        }
        if !(self.dt > 0.0) {
            return Err(IoError::Config(format!("dt {} must be positive", self.dt)));
        }
        if !(self.scene_extent_m > 0.0) {
            return Err(IoError::Config(format!(
                "scene_extent_m {} must be positive",
                self.scene_extent_m
            )));
        }
        self.grid.validate().map_err(IoError::Core)?;
        Ok(())
    }
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        SyntheticSceneConfig {
            n_background_points: 1500,
            n_boxes: 4,
            box_size_range: [1.0, 4.0],
            box_speed_range: [0.6, 2.4],
            ego_speed_range: [3.0, 8.0],
            grid: GridConfig::new(102.4, [1.6, 1.6, 6.0], -3.0, 3.0).expect("default grid"),
            scene_extent_m: 48.0,
            dt: 0.1,
            rng_seed: 0,
        }
    }
}

/// Per-point generator bookkeeping the pipeline itself never sees, used
/// by tests to verify metrics against known motion.
#[derive(Debug, Clone)]
pub struct SynthMeta {
    /// World-frame displacement of each `cloud_t` point over `dt`
    /// (zero for static points).
    pub displacement: Vec<[f64; 3]>,
    /// Index of the box owning each point, or `None` for background.
    pub box_of_point: Vec<Option<usize>>,
    /// World-frame displacement per box.
    pub box_displacement: Vec<[f64; 3]>,
}

fn quantize(p: [f64; 3]) -> [f64; 3] {
    [p[0] as f32 as f64, p[1] as f32 as f64, p[2] as f32 as f64]
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn synth_frame_pair(cfg: &SyntheticSceneConfig) -> Result<FramePair> {
    Ok(synth_frame_pair_with_meta(cfg)?.0)
}

pub fn synth_frame_pair_with_meta(cfg: &SyntheticSceneConfig) -> Result<(FramePair, SynthMeta)> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(cfg.rng_seed);
    let half = cfg.scene_extent_m / 2.0;
    let (z_lo, z_hi) = (cfg.grid.z_min, cfg.grid.z_max);

    // Ego: forward motion with a turn rate proportional to speed, so a
    // zero speed range yields the identity transform.
    let ego_speed = rng.uniform(cfg.ego_speed_range[0], cfg.ego_speed_range[1]);
    let yaw = rng.uniform(-0.05, 0.05) * ego_speed * cfg.dt;
    let heading = rng.uniform(-0.2, 0.2) * if ego_speed > 0.0 { 1.0 } else { 0.0 };
    let pose_delta = RigidTransform::from_yaw_translation(
        yaw,
        [
            ego_speed * cfg.dt * heading.cos(),
            ego_speed * cfg.dt * heading.sin(),
            0.0,
        ],
    );
    // T_{t,t+1}: frame-t coordinates of a static world point, expressed
    // in the ego frame at t+1.
    let ego_motion = pose_delta.inverse();

    let mut positions: Vec<[f64; 3]> = Vec::new();
    let mut ground_mask: Vec<bool> = Vec::new();
    let mut class_id: Vec<u8> = Vec::new();
    let mut displacement: Vec<[f64; 3]> = Vec::new();
    let mut box_of_point: Vec<Option<usize>> = Vec::new();

    let ground_z = z_lo + 0.15 * (z_hi - z_lo);
    for i in 0..cfg.n_background_points {
        let is_ground = i % 5 < 2;
        let z = if is_ground {
            ground_z + rng.uniform(-0.03, 0.03)
        } else {
            rng.uniform(ground_z + 0.3, z_hi - 0.2)
        };
        positions.push(quantize([rng.uniform(-half, half), rng.uniform(-half, half), z]));
        ground_mask.push(is_ground);
        class_id.push(CLASS_BACKGROUND);
        displacement.push([0.0; 3]);
        box_of_point.push(None);
    }

    let mut box_displacement = Vec::with_capacity(cfg.n_boxes);
    let speed_mid = (cfg.box_speed_range[0] + cfg.box_speed_range[1]) / 2.0;
    for b in 0..cfg.n_boxes {
        let vehicle = b % 2 == 0;
        let (class, n_points, speed) = if vehicle {
            (CLASS_VEHICLE, VEHICLE_POINTS, rng.uniform(speed_mid, cfg.box_speed_range[1]))
        } else {
            (CLASS_PEDESTRIAN, PEDESTRIAN_POINTS, rng.uniform(cfg.box_speed_range[0], speed_mid))
        };
        let dir = rng.uniform(0.0, core::f64::consts::TAU);
        let d = [speed * cfg.dt * dir.cos(), speed * cfg.dt * dir.sin(), 0.0];
        box_displacement.push(d);

        let scale = if vehicle { 1.0 } else { 0.35 };
        let hx = scale * rng.uniform(cfg.box_size_range[0], cfg.box_size_range[1]) / 2.0;
        let hy = scale * rng.uniform(cfg.box_size_range[0], cfg.box_size_range[1]) / 2.0;
        let hz = (0.4 * (z_hi - z_lo) / 2.0).min(1.0);
        let cx = rng.uniform(-0.8 * half, 0.8 * half);
        let cy = rng.uniform(-0.8 * half, 0.8 * half);
        let cz = ground_z + 0.4 + hz;
        for _ in 0..n_points {
            positions.push(quantize([
                cx + rng.uniform(-hx, hx),
                cy + rng.uniform(-hy, hy),
                (cz + rng.uniform(-hz, hz)).min(z_hi - 1e-3),
            ]));
            ground_mask.push(false);
            class_id.push(class);
            displacement.push(d);
            box_of_point.push(Some(b));
        }
    }

    // Ground truth on the quantized scan-t points, in the shared frame
    // convention pos_t1 - pos_t. T(p + d) - p == ego_flow(p) + R d holds
    // exactly in real arithmetic; the right-hand form is used so static
    // points match the evaluator's ego_flow bit for bit and an identity
    // ego yields gt == d with no rounding.
    let static_flow = ego_flow(&positions, &ego_motion);
    let r = &ego_motion.rotation;
    let mut gt_flow = Vec::with_capacity(positions.len());
    for (i, ef) in static_flow.iter().enumerate() {
        let d = displacement[i];
        if box_of_point[i].is_some() {
            let rd = [
                r[0][0] * d[0] + r[0][1] * d[1] + r[0][2] * d[2],
                r[1][0] * d[0] + r[1][1] * d[1] + r[1][2] * d[2],
                r[2][0] * d[0] + r[2][1] * d[1] + r[2][2] * d[2],
            ];
            gt_flow.push(add(*ef, rd));
        } else {
            gt_flow.push(*ef);
        }
    }

    // Scan t+1 observes every point at its advanced world position, in the
    // new ego frame and with sensor-style f32 quantization. Order is
    // shuffled: real scans carry no correspondence.
    let mut pts_t1: Vec<[f64; 3]> = positions
        .iter()
        .zip(&displacement)
        .map(|(&p, &d)| quantize(ego_motion.apply(add(p, d))))
        .collect();
    let mut gm_t1 = ground_mask.clone();
    for i in (1..pts_t1.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        pts_t1.swap(i, j);
        gm_t1.swap(i, j);
    }

    let mut cloud_t = PointCloud::new(positions, ground_mask);
    cloud_t.gt_flow = Some(gt_flow);
    cloud_t.class_id = Some(class_id);
    let pair = FramePair {
        cloud_t,
        cloud_t1: PointCloud::new(pts_t1, gm_t1),
        ego_motion,
        dt: cfg.dt,
    };
    pair.validate()?;
    Ok((pair, SynthMeta { displacement, box_of_point, box_displacement }))
}
