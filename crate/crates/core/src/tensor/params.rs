//! Named parameter collections with deterministic iteration order.

use super::{Tape, Tensor, ValueId};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Named tensors of one model component. BTreeMap keeps iteration (and
/// therefore optimizer updates and fingerprints) deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|t| t.is_finite())
    }

    /// FNV-1a over names and raw little-endian bytes; used by the
    /// frozen-component checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        };
        for (name, t) in &self.entries {
            for b in name.as_bytes() {
                eat(*b);
            }
            for v in t.data() {
                for b in v.to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }
}

/// Binds a store's parameters onto a tape as leaves, memoizing ids so a
/// parameter appearing in several layers is a single node (gradients then
/// accumulate across uses).
pub struct ParamBinder<'a> {
    store: &'a ParamStore,
    requires_grad: bool,
    bound: BTreeMap<String, ValueId>,
}

impl<'a> ParamBinder<'a> {
    pub fn new(store: &'a ParamStore, requires_grad: bool) -> Self {
        ParamBinder { store, requires_grad, bound: BTreeMap::new() }
    }

    pub fn bind(&mut self, tape: &mut Tape, name: &str) -> Result<ValueId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let t = self.store.require(name)?.clone();
        let id = tape.leaf(t, self.requires_grad);
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Collects gradients for every bound parameter after backward().
    pub fn collect_grads(&self, tape: &Tape) -> BTreeMap<String, Vec<f32>> {
        let mut grads = BTreeMap::new();
        for (name, &id) in &self.bound {
            if let Some(g) = tape.grad(id) {
                grads.insert(name.clone(), g.to_vec());
            }
        }
        grads
    }
}
