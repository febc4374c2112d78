//! Point clouds, frame pairs and flow fields.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::geom::RigidTransform;

/// A LiDAR scan in the ego frame with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    pub ground_mask: Vec<bool>,
    pub gt_flow: Option<Vec<[f64; 3]>>,
    pub class_id: Option<Vec<u8>>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>, ground_mask: Vec<bool>) -> Self {
        PointCloud { positions, ground_mask, gt_flow: None, class_id: None }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if self.ground_mask.len() != n {
            return Err(CoreError::Contract(format!(
                "ground_mask length {} != point count {n}",
                self.ground_mask.len()
            )));
        }
        if let Some(f) = &self.gt_flow {
            if f.len() != n {
                return Err(CoreError::Contract(format!(
                    "gt_flow length {} != point count {n}",
                    f.len()
                )));
            }
            if f.iter().flatten().any(|v| !v.is_finite()) {
                return Err(CoreError::Contract("gt_flow contains non-finite values".into()));
            }
        }
        if let Some(c) = &self.class_id {
            if c.len() != n {
                return Err(CoreError::Contract(format!(
                    "class_id length {} != point count {n}",
                    c.len()
                )));
            }
        }
        if self.positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CoreError::Contract("positions contain non-finite values".into()));
        }
        Ok(())
    }
}

/// Two time-sequential scans plus the ego transform between them.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub cloud_t: PointCloud,
    pub cloud_t1: PointCloud,
    /// T_{t,t+1}: maps frame-t coordinates into frame t+1.
    pub ego_motion: RigidTransform,
    /// Frame gap in seconds.
    pub dt: f64,
}

impl FramePair {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(CoreError::Contract(format!("dt must be > 0, got {}", self.dt)));
        }
        self.cloud_t.validate()?;
        self.cloud_t1.validate()?;
        self.ego_motion.validate(1e-9)
    }
}

/// Per-point displacement over dt, aligned to cloud_t rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub flow: Vec<[f64; 3]>,
    pub validity: Vec<bool>,
}

impl FlowField {
    pub fn valid(flow: Vec<[f64; 3]>) -> Self {
        let validity = alloc::vec![true; flow.len()];
        FlowField { flow, validity }
    }

    pub fn len(&self) -> usize {
        self.flow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flow.is_empty()
    }
}

/// Drops ground points, preserving order. Returns the subset cloud and a
/// map from subset rows back to original rows.
pub fn remove_ground(cloud: &PointCloud) -> (PointCloud, Vec<usize>) {
    let keep: Vec<usize> = cloud
        .ground_mask
        .iter()
        .enumerate()
        .filter(|(_, &g)| !g)
        .map(|(i, _)| i)
        .collect();
    let positions = keep.iter().map(|&i| cloud.positions[i]).collect();
    let ground_mask = alloc::vec![false; keep.len()];
    let gt_flow = cloud
        .gt_flow
        .as_ref()
        .map(|f| keep.iter().map(|&i| f[i]).collect());
    let class_id = cloud
        .class_id
        .as_ref()
        .map(|c| keep.iter().map(|&i| c[i]).collect());
    (PointCloud { positions, ground_mask, gt_flow, class_id }, keep)
}
