//! Ego-centered square voxel grid configuration.

use alloc::format;

use crate::error::{CoreError, Result};
use crate::math;

/// Square grid of side `range_m` centered on the ego vehicle, with pillar
/// voxels of size (v_x, v_y, v_z) and a vertical extent [z_min, z_max).
#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub range_m: f64,
    pub voxel_size: [f64; 3],
    pub z_min: f64,
    pub z_max: f64,
}

impl GridConfig {
    pub fn new(range_m: f64, voxel_size: [f64; 3], z_min: f64, z_max: f64) -> Result<Self> {
        let g = GridConfig { range_m, voxel_size, z_min, z_max };
        g.validate()?;
        Ok(g)
    }

    /// Default configuration: 102.4 m grid, (0.1, 0.1, 6) m voxels, z in [-3, 3).
    pub fn default_pillar() -> Self {
        GridConfig { range_m: 102.4, voxel_size: [0.1, 0.1, 6.0], z_min: -3.0, z_max: 3.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let [vx, vy, vz] = self.voxel_size;
        if vx != vy {
            return Err(CoreError::Contract(format!(
                "pillar grid requires v_x == v_y, got {vx} and {vy}"
            )));
        }
        if !(vx > 0.0 && vz > 0.0) {
            return Err(CoreError::Contract("voxel sizes must be positive".into()));
        }
        if !(self.range_m > 0.0) {
            return Err(CoreError::Contract("range must be positive".into()));
        }
        if !(self.z_max > self.z_min) {
            return Err(CoreError::Contract("z_max must exceed z_min".into()));
        }
        let d = self.range_m / vx;
        if math::abs(d - math::round(d)) > 1e-9 {
            return Err(CoreError::Contract(format!(
                "range {} is not an integral multiple of voxel size {vx}",
                self.range_m
            )));
        }
        Ok(())
    }

    /// Horizontal cell count per side: D = round(R / v_x).
    pub fn side_cells(&self) -> usize {
        math::round(self.range_m / self.voxel_size[0]) as usize
    }

    /// Vertical cell count.
    pub fn z_cells(&self) -> usize {
        math::round((self.z_max - self.z_min) / self.voxel_size[2]).max(1.0) as usize
    }
}
