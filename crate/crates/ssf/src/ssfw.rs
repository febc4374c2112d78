//! SSFW v1: weight bundle persistence.
//!
//! Layout (little-endian): magic `"SSFW"`, `u32` version, `u32` tensor
//! count; per tensor: `u32` name length, UTF-8 name, `u32` ndim,
//! `u32` dims, f32 data row-major. Tensor order is preserved so a
//! bundle serializes byte-identically after a round-trip.

use std::fs;
use std::path::Path;

use ssf_core::params::{ParamStore, Tensor};

use crate::error::{IoError, Result};

pub const MAGIC: &str = "SSFW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered collection of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightBundle {
    pub tensors: Vec<NamedTensor>,
}

impl WeightBundle {
    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        if self.tensors.iter().any(|t| t.name == name) {
            return Err(IoError::DuplicateTensor(name.into()));
        }
        let expected = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        if expected != Some(data.len()) {
            let expected = expected.map_or("overflow".to_string(), |e| e.to_string());
            return Err(IoError::Structure {
                section: name.into(),
                message: format!("shape {:?} wants {} values, found {}", shape, expected, data.len()),
            });
        }
        self.tensors.push(NamedTensor { name: name.into(), shape, data });
        Ok(())
    }

    /// Snapshot every tensor of a parameter store (trainable weights and
    /// running statistics alike), quantized to single precision.
    pub fn from_param_store(ps: &ParamStore) -> Result<Self> {
        let mut bundle = WeightBundle::default();
        for (name, tensor) in ps.iter() {
            bundle.push(
                name,
                tensor.shape.clone(),
                tensor.data.iter().map(|&v| v as f32).collect(),
            )?;
        }
        Ok(bundle)
    }

    /// Copy bundle values into an already-registered parameter store. Every
    /// bundle tensor must exist with a matching shape, and every store
    /// tensor must be covered, so a stale or mismatched bundle is rejected
    /// rather than silently half-applied.
    pub fn apply_to(&self, ps: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != ps.len() {
            return Err(IoError::Structure {
                section: "SSFW".into(),
                message: format!(
                    "bundle has {} tensors but the network expects {}",
                    self.tensors.len(),
                    ps.len()
                ),
            });
        }
        for t in &self.tensors {
            let id = ps.id_of(&t.name).ok_or_else(|| IoError::Structure {
                section: t.name.clone(),
                message: "tensor name unknown to the network".into(),
            })?;
            let dst = ps.get_mut(id);
            if dst.shape != t.shape {
                return Err(IoError::Structure {
                    section: t.name.clone(),
                    message: format!("shape {:?} does not match expected {:?}", t.shape, dst.shape),
                });
            }
            for (d, &s) in dst.data.iter_mut().zip(&t.data) {
                *d = s as f64;
            }
        }
        Ok(())
    }
}

pub fn weights_bytes(bundle: &WeightBundle) -> Result<Vec<u8>> {
    let mut seen: Vec<&str> = Vec::with_capacity(bundle.tensors.len());
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC.as_bytes());
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(bundle.tensors.len() as u32).to_le_bytes());
    for t in &bundle.tensors {
        if seen.contains(&t.name.as_str()) {
            return Err(IoError::DuplicateTensor(t.name.clone()));
        }
        seen.push(&t.name);
        let expected: usize = t.shape.iter().product();
        if expected != t.data.len() {
            return Err(IoError::Structure {
                section: t.name.clone(),
                message: format!("shape {:?} wants {expected} values, found {}", t.shape, t.data.len()),
            });
        }
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_weights(bundle: &WeightBundle, path: &Path) -> Result<()> {
    fs::write(path, weights_bytes(bundle)?)?;
    Ok(())
}

pub fn weights_from_bytes(data: &[u8]) -> Result<WeightBundle> {
    let mut pos = 0usize;
    let mut take = |n: usize, section: &str| -> Result<&[u8]> {
        if n > data.len() - pos {
            return Err(IoError::Truncated { section: section.into() });
        }
        let out = &data[pos..pos + n];
        pos += n;
        Ok(out)
    };

    let magic = take(4, "header")?;
    if magic != MAGIC.as_bytes() {
        return Err(IoError::BadMagic {
            expected: MAGIC,
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = u32::from_le_bytes(take(4, "header")?.try_into().unwrap());
    if version != VERSION {
        return Err(IoError::VersionMismatch { format: "SSFW", expected: VERSION, found: version });
    }
    let count = u32::from_le_bytes(take(4, "header")?.try_into().unwrap());

    let mut bundle = WeightBundle::default();
    for i in 0..count {
        let label = format!("tensor {i}");
        let name_len = u32::from_le_bytes(take(4, &label)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len, &label)?.to_vec()).map_err(|_| {
            IoError::Structure { section: label.clone(), message: "name is not UTF-8".into() }
        })?;
        let ndim = u32::from_le_bytes(take(4, &name)?.try_into().unwrap()) as usize;
        // `ndim` and the dims are untrusted; don't pre-allocate from them and
        // reject shapes whose element count overflows.
        let mut shape = Vec::new();
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(4, &name)?.try_into().unwrap()) as usize);
        }
        let n_bytes = shape
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| IoError::Structure {
                section: name.clone(),
                message: "tensor shape overflows".into(),
            })?;
        let raw = take(n_bytes, &name)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        bundle.push(&name, shape, values)?;
    }
    Ok(bundle)
}

pub fn read_weights(path: &Path) -> Result<WeightBundle> {
    weights_from_bytes(&fs::read(path)?)
}

/// Convenience used by tests/CLI: snapshot a store to disk.
pub fn save_param_store(ps: &ParamStore, path: &Path) -> Result<()> {
    write_weights(&WeightBundle::from_param_store(ps)?, path)
}

/// Tensor shapes registered under a given network, for error reporting.
pub fn describe(ps: &ParamStore) -> Vec<(String, Vec<usize>)> {
    ps.iter().map(|(n, t): (&str, &Tensor)| (n.to_string(), t.shape.clone())).collect()
}
