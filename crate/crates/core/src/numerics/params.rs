use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::array::Array;
use crate::error::{shape_err, Error, Result};

/// Named parameter leaves plus the number of optimizer steps applied.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    leaves: BTreeMap<String, Array>,
    pub step_count: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Result<()> {
        let name = name.into();
        if self.leaves.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter '{name}'")));
        }
        self.leaves.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.leaves.get(name).ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array> {
        self.leaves.get_mut(name).ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.leaves.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array)> {
        self.leaves.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.leaves.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.leaves.values().map(Array::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self { leaves: self.leaves.iter().map(|(k, v)| (k.clone(), Array::zeros(v.shape()))).collect(), step_count: 0 }
    }

    /// Checks that `other` has the same names and shapes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.leaves.len() != other.leaves.len() {
            return Err(shape_err(format!("parameter sets differ in size ({} vs {})", self.leaves.len(), other.leaves.len())));
        }
        for ((ka, va), (kb, vb)) in self.leaves.iter().zip(&other.leaves) {
            if ka != kb || va.shape() != vb.shape() {
                return Err(shape_err(format!("parameter '{ka}' {:?} does not match '{kb}' {:?}", va.shape(), vb.shape())));
            }
        }
        Ok(())
    }

    pub fn global_norm(&self) -> f64 {
        self.leaves.values().map(Array::norm_sq).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.leaves.values().all(Array::is_finite)
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in self.leaves.values_mut() {
            for x in v.data_mut() {
                *x *= s;
            }
        }
    }

    /// Concatenation of all leaves in name order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for v in self.leaves.values() {
            out.extend_from_slice(v.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) against this set's layout.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(shape_err(format!("flat buffer has {} values, parameters need {}", flat.len(), self.num_scalars())));
        }
        let mut off = 0;
        for v in self.leaves.values_mut() {
            let n = v.len();
            v.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// `(name, shape)` layout in flatten order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.leaves.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect()
    }

    pub fn from_layout(layout: &[(String, Vec<usize>)]) -> Result<Self> {
        let mut p = Self::new();
        for (name, shape) in layout {
            p.insert(name.clone(), Array::zeros(shape))?;
        }
        Ok(p)
    }

    /// SHA-256 over names, shapes and bit patterns.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.leaves {
            h.update(k.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
