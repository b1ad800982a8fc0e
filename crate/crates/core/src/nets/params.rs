use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub frozen: bool,
}

/// Named parameter tensors with a per-entry frozen flag.
///
/// Names are fully qualified (`"side.3.1.weight"`), so gradients from a tape
/// can be routed back without any other bookkeeping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), Param { value, frozen: false });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::contract(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn freeze(&mut self) {
        for p in self.entries.values_mut() {
            p.frozen = true;
        }
    }

    pub fn unfreeze(&mut self) {
        for p in self.entries.values_mut() {
            p.frozen = false;
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.entries.values().all(|p| p.frozen)
    }

    /// Number of scalars, optionally only those in trainable entries.
    pub fn count(&self, trainable_only: bool) -> usize {
        self.entries
            .values()
            .filter(|p| !(trainable_only && p.frozen))
            .map(|p| p.value.len())
            .sum()
    }

    /// Records `name` on the tape: as a parameter leaf when trainable, as a
    /// constant when frozen.
    pub fn var(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let p = self
            .entries
            .get(name)
            .ok_or_else(|| Error::contract(format!("no parameter named {name}")))?;
        if p.frozen {
            tape.constant(p.value.clone())
        } else {
            tape.param(name, &p.value)
        }
    }

    /// FNV-1a over names, shapes and raw bits.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::default();
        for (name, p) in &self.entries {
            h.write(name.as_bytes());
            for d in p.value.shape() {
                h.write(&(*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.0
    }
}

pub(crate) struct Fnv(pub u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

/// Anything that owns parameter stores.
pub trait Parameters {
    fn stores(&self) -> Vec<&ParamStore>;
    fn stores_mut(&mut self) -> Vec<&mut ParamStore>;

    fn count_params(&self, trainable_only: bool) -> usize {
        self.stores().iter().map(|s| s.count(trainable_only)).sum()
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.stores_mut().into_iter().find_map(|s| s.get_mut(name))
    }
}

impl Parameters for ParamStore {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![self]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![self]
    }
}
