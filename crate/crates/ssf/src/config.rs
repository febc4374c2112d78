//! Declarative run configuration: a flat key = value text format with
//! sectioned (dotted) keys, e.g. `grid.range_m = 102.4`. Unknown keys are
//! rejected so typos fail loudly; CLI flags override file values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ssf_core::metrics::{DEFAULT_RANGE_EDGES_M, DEFAULT_THREEWAY_THRESHOLD_MPS};
use ssf_core::network::UnetConfig;
use ssf_core::GridConfig;

use crate::error::{IoError, Result};
use crate::synth::SyntheticSceneConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetPreset {
    Toy,
    Full,
}

impl NetPreset {
    pub fn unet_config(self) -> UnetConfig {
        match self {
            NetPreset::Toy => UnetConfig::toy(),
            NetPreset::Full => UnetConfig::default_full(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub net: NetPreset,
    pub range_edges_m: Vec<f64>,
    pub dynamic_threshold_mps: f64,
    pub seed: u64,
    pub threads: usize,
    pub synth: SyntheticSceneConfig,
    pub train_steps: usize,
    pub train_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let grid = GridConfig::new(102.4, [1.6, 1.6, 6.0], -3.0, 3.0).expect("default grid");
        RunConfig {
            grid: grid.clone(),
            net: NetPreset::Toy,
            range_edges_m: DEFAULT_RANGE_EDGES_M.to_vec(),
            dynamic_threshold_mps: DEFAULT_THREEWAY_THRESHOLD_MPS,
            seed: 0,
            threads: 1,
            synth: SyntheticSceneConfig { grid, ..SyntheticSceneConfig::default() },
            train_steps: 400,
            train_lr: ssf_core::train::DEFAULT_TOY_LR,
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.trim()
        .parse()
        .map_err(|_| IoError::Config(format!("{key}: {v:?} is not a number")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| IoError::Config(format!("{key}: {v:?} is not a non-negative integer")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|part| parse_f64(key, part)).collect()
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_str_named(&fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn from_str_named(text: &str, origin: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                IoError::Config(format!("{origin}:{}: expected key = value", lineno + 1))
            })?;
            let key = key.trim().to_string();
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(IoError::Config(format!(
                    "{origin}:{}: duplicate key {key}",
                    lineno + 1
                )));
            }
        }
        let mut cfg = RunConfig::default();
        for (key, value) in &entries {
            cfg.apply(key, value)?;
        }
        cfg.finish()
    }

    /// Apply one `key = value` assignment (also used for CLI overrides).
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "grid.range_m" => self.grid.range_m = parse_f64(key, value)?,
            "grid.voxel_xy_m" => {
                let v = parse_f64(key, value)?;
                self.grid.voxel_size[0] = v;
                self.grid.voxel_size[1] = v;
            }
            "grid.voxel_z_m" => self.grid.voxel_size[2] = parse_f64(key, value)?,
            "grid.z_min_m" => self.grid.z_min = parse_f64(key, value)?,
            "grid.z_max_m" => self.grid.z_max = parse_f64(key, value)?,
            "net.preset" => {
                self.net = match value {
                    "toy" => NetPreset::Toy,
                    "full" => NetPreset::Full,
                    other => {
                        return Err(IoError::Config(format!(
                            "net.preset: {other:?} is not \"toy\" or \"full\""
                        )))
                    }
                }
            }
            "metrics.range_edges_m" => self.range_edges_m = parse_list(key, value)?,
            "metrics.dynamic_threshold_mps" => {
                self.dynamic_threshold_mps = parse_f64(key, value)?
            }
            "seed" => self.seed = parse_usize(key, value)? as u64,
            "threads" => self.threads = parse_usize(key, value)?,
            "synth.n_background_points" => {
                self.synth.n_background_points = parse_usize(key, value)?
            }
            "synth.n_boxes" => self.synth.n_boxes = parse_usize(key, value)?,
            "synth.box_size_min_m" => self.synth.box_size_range[0] = parse_f64(key, value)?,
            "synth.box_size_max_m" => self.synth.box_size_range[1] = parse_f64(key, value)?,
            "synth.box_speed_min_mps" => self.synth.box_speed_range[0] = parse_f64(key, value)?,
            "synth.box_speed_max_mps" => self.synth.box_speed_range[1] = parse_f64(key, value)?,
            "synth.ego_speed_min_mps" => self.synth.ego_speed_range[0] = parse_f64(key, value)?,
            "synth.ego_speed_max_mps" => self.synth.ego_speed_range[1] = parse_f64(key, value)?,
            "synth.scene_extent_m" => self.synth.scene_extent_m = parse_f64(key, value)?,
            "synth.dt_s" => self.synth.dt = parse_f64(key, value)?,
            "train.steps" => self.train_steps = parse_usize(key, value)?,
            "train.lr" => self.train_lr = parse_f64(key, value)?,
            other => return Err(IoError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Re-validate after all assignments and propagate shared fields.
    pub fn finish(mut self) -> Result<Self> {
        self.grid.validate().map_err(IoError::Core)?;
        self.synth.grid = self.grid.clone();
        self.synth.rng_seed = self.seed;
        self.synth.validate()?;
        if self.range_edges_m.windows(2).any(|w| w[0] >= w[1])
            || self.range_edges_m.iter().any(|e| !e.is_finite() || *e <= 0.0)
        {
            return Err(IoError::Config(format!(
                "metrics.range_edges_m {:?} must be positive and strictly increasing",
                self.range_edges_m
            )));
        }
        if !(self.dynamic_threshold_mps >= 0.0) {
            return Err(IoError::Config("metrics.dynamic_threshold_mps must be >= 0".into()));
        }
        if self.threads == 0 {
            return Err(IoError::Config("threads must be >= 1".into()));
        }
        Ok(self)
    }
}
