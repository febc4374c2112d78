//! Named parameter storage shared by the VFE, U-Net and head.
//!
//! Tensors are registered once in a fixed order under dotted names
//! (`enc.0.down.w`, `head.1.b`, ...), which is also the order used for
//! flattening into optimizer/finite-difference vectors and the naming
//! contract of the weight file format. Running normalization statistics
//! live here too but are marked non-trainable.

use alloc::string::String;
use alloc::vec::Vec;

use hashbrown::HashMap;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: alloc::vec![0.0; n] }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(CoreError::Contract(alloc::format!("duplicate parameter name {name}")));
        }
        let id = self.entries.len();
        self.by_name.insert(String::from(name), id);
        self.entries.push(Entry { name: String::from(name), tensor, trainable });
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Iterate (name, tensor) in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    /// Total trainable scalar count.
    pub fn trainable_len(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.data.len())
            .sum()
    }

    /// Trainable values concatenated in registration order.
    pub fn flatten_trainable(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_len());
        for e in &self.entries {
            if e.trainable {
                out.extend_from_slice(&e.tensor.data);
            }
        }
        out
    }

    /// Inverse of `flatten_trainable`.
    pub fn set_trainable(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.trainable_len() {
            return Err(CoreError::Contract(alloc::format!(
                "flat vector length {} != trainable parameter count {}",
                flat.len(),
                self.trainable_len()
            )));
        }
        let mut off = 0;
        for e in &mut self.entries {
            if e.trainable {
                let n = e.tensor.data.len();
                e.tensor.data.copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }
}

/// Per-parameter gradient accumulators, aligned with a `ParamStore`.
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: Vec<Vec<f64>>,
}

impl GradStore {
    pub fn zeros_like(ps: &ParamStore) -> Self {
        let grads = ps.entries.iter().map(|e| alloc::vec![0.0; e.tensor.data.len()]).collect();
        GradStore { grads }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        &mut self.grads[id.0]
    }

    /// Trainable gradients in the same order as `ParamStore::flatten_trainable`.
    pub fn flatten_trainable(&self, ps: &ParamStore) -> Vec<f64> {
        let mut out = Vec::with_capacity(ps.trainable_len());
        for (i, e) in ps.entries.iter().enumerate() {
            if e.trainable {
                out.extend_from_slice(&self.grads[i]);
            }
        }
        out
    }
}
