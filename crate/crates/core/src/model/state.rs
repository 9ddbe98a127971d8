use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Canonical tensor names.
pub mod names {
    pub const EMBED: &str = "embed";
    pub const POS: &str = "pos_embed";
    pub const FINAL_NORM: &str = "final_norm";
    pub const ADAPTER_PREFIX: &str = "adapter.";
    pub const ADAPTER_K: &str = "adapter.k";
    pub const ADAPTER_V: &str = "adapter.v";

    pub fn attn_norm(l: usize) -> String {
        format!("layers.{l}.attn_norm")
    }
    pub fn attn_q(l: usize) -> String {
        format!("layers.{l}.attn.q")
    }
    pub fn attn_k(l: usize) -> String {
        format!("layers.{l}.attn.k")
    }
    pub fn attn_v(l: usize) -> String {
        format!("layers.{l}.attn.v")
    }
    pub fn attn_o(l: usize) -> String {
        format!("layers.{l}.attn.o")
    }
    pub fn ffn_norm(l: usize) -> String {
        format!("layers.{l}.ffn_norm")
    }
    /// FFN keys, `d_m × d`.
    pub fn ffn_k(l: usize) -> String {
        format!("layers.{l}.ffn.k")
    }
    /// FFN values, `d_m × d`.
    pub fn ffn_v(l: usize) -> String {
        format!("layers.{l}.ffn.v")
    }

    pub fn is_adapter(name: &str) -> bool {
        name.starts_with(ADAPTER_PREFIX)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub tensor: Tensor<S>,
    pub frozen: bool,
}

/// Named parameter tensors with a frozen flag each. Iteration order is by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<S> {
    params: BTreeMap<String, Param<S>>,
}

impl<S> Default for ModelState<S> {
    fn default() -> Self {
        ModelState {
            params: BTreeMap::new(),
        }
    }
}

impl<S: Scalar> ModelState<S> {
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>, frozen: bool) {
        self.params.insert(name.into(), Param { tensor, frozen });
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<S>> {
        self.params.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param<S>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.params.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> Result<&Param<S>> {
        self.get(name)
            .ok_or_else(|| Error::Invariant(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<S>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<S>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn set_frozen(&mut self, pred: impl Fn(&str) -> bool, frozen: bool) {
        for (name, p) in self.params.iter_mut() {
            if pred(name) {
                p.frozen = frozen;
            }
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.values().filter(|p| !p.frozen).map(|p| p.tensor.len()).sum()
    }

    /// Tensors whose name does not carry the adapter prefix.
    pub fn base(&self) -> impl Iterator<Item = (&String, &Param<S>)> {
        self.params.iter().filter(|(n, _)| !names::is_adapter(n))
    }

    pub fn adapter(&self) -> impl Iterator<Item = (&String, &Param<S>)> {
        self.params.iter().filter(|(n, _)| names::is_adapter(n))
    }
}
