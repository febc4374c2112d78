//! SSFL v1: per-point flow output.
//!
//! Layout (little-endian): magic `"SSFL"`, `u32` version, `u32` N,
//! f32 N x 3 flow vectors, u8 N processed mask.

use std::fs;
use std::path::Path;

use crate::error::{IoError, Result};

pub const MAGIC: &str = "SSFL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowOutput {
    pub flow: Vec<[f32; 3]>,
    /// True where the network contributed a residual on top of ego flow.
    pub processed: Vec<bool>,
}

pub fn flow_bytes(out: &FlowOutput) -> Result<Vec<u8>> {
    if out.flow.len() != out.processed.len() {
        return Err(IoError::Structure {
            section: "SSFL".into(),
            message: format!("{} flow rows, {} mask bytes", out.flow.len(), out.processed.len()),
        });
    }
    let n = out.flow.len();
    let mut bytes = Vec::with_capacity(12 + n * 13);
    bytes.extend_from_slice(MAGIC.as_bytes());
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(n as u32).to_le_bytes());
    for f in &out.flow {
        for &c in f {
            bytes.extend_from_slice(&c.to_le_bytes());
        }
    }
    bytes.extend(out.processed.iter().map(|&b| b as u8));
    Ok(bytes)
}

pub fn write_flow(out: &FlowOutput, path: &Path) -> Result<()> {
    fs::write(path, flow_bytes(out)?)?;
    Ok(())
}

pub fn flow_from_bytes(data: &[u8]) -> Result<FlowOutput> {
    if data.len() < 4 || &data[..4] != MAGIC.as_bytes() {
        return Err(IoError::BadMagic {
            expected: MAGIC,
            found: String::from_utf8_lossy(data.get(..4).unwrap_or(data)).into_owned(),
        });
    }
    if data.len() < 12 {
        return Err(IoError::Truncated { section: "header".into() });
    }
    let version = u32::from_le_bytes(data[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(IoError::VersionMismatch { format: "SSFL", expected: VERSION, found: version });
    }
    let n = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
    let need = 12 + n * 12 + n;
    if data.len() < need {
        return Err(IoError::Truncated { section: "flow".into() });
    }
    if data.len() > need {
        return Err(IoError::Structure {
            section: "SSFL".into(),
            message: format!("{} trailing bytes", data.len() - need),
        });
    }
    let mut flow = Vec::with_capacity(n);
    for chunk in data[12..12 + n * 12].chunks_exact(12) {
        let mut f = [0.0f32; 3];
        for (i, c) in chunk.chunks_exact(4).enumerate() {
            f[i] = f32::from_le_bytes(c.try_into().unwrap());
        }
        flow.push(f);
    }
    let mut processed = Vec::with_capacity(n);
    for &b in &data[12 + n * 12..] {
        if b > 1 {
            return Err(IoError::Structure {
                section: "mask".into(),
                message: format!("mask byte {b} is not 0 or 1"),
            });
        }
        processed.push(b == 1);
    }
    Ok(FlowOutput { flow, processed })
}

pub fn read_flow(path: &Path) -> Result<FlowOutput> {
    flow_from_bytes(&fs::read(path)?)
}
