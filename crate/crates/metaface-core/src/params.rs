//! Named parameter collections and their tape-lifted counterparts.
//!
//! Naming convention, relied on by adaptation scopes and checkpoints:
//! `base.*` for backbone weights, `lora.*` for low-rank adapter factors,
//! `enc.*` for the relation encoder. Iteration order is insertion order and
//! is part of every determinism contract in the crate.

use indexmap::IndexMap;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed::hash_bytes;

/// Ordered map of named tensors plus the hash of the config that shaped it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    config_hash: u64,
    entries: IndexMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new(config_hash: u64) -> ParameterSet {
        ParameterSet {
            config_hash,
            entries: IndexMap::new(),
        }
    }

    pub fn config_hash(&self) -> u64 {
        self.config_hash
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    /// Replace an existing entry; the tensor shape must not change.
    pub fn update(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownVar(format!("no parameter named {name:?}")))?;
        if slot.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "param_update",
                lhs: slot.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        *slot = tensor;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownVar(format!("no parameter named {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count over entries whose name passes the filter.
    pub fn element_count(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.iter()
            .filter(|(name, _)| filter(name))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Merge another set in; duplicate names are an error.
    pub fn absorb(&mut self, other: ParameterSet) -> Result<()> {
        for (name, tensor) in other.entries {
            if self.entries.contains_key(&name) {
                return Err(Error::Config(format!("duplicate parameter name {name:?}")));
            }
            self.entries.insert(name, tensor);
        }
        Ok(())
    }

    /// Order-sensitive content hash covering names, shapes, and value bits.
    pub fn content_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&self.config_hash.to_le_bytes());
        for (name, tensor) in &self.entries {
            bytes.extend_from_slice(name.as_bytes());
            bytes.push(0);
            for &d in tensor.shape() {
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        hash_bytes(&bytes)
    }

    /// Bitwise equality of two sets, order included.
    pub fn bits_equal(&self, other: &ParameterSet) -> bool {
        self.config_hash == other.config_hash
            && self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((an, at), (bn, bt))| {
                    an == bn
                        && at.shape() == bt.shape()
                        && at
                            .data()
                            .iter()
                            .zip(bt.data())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}

/// The same names bound to tape variables, each flagged trainable or frozen.
///
/// Trainable entries are recorded as differentiable leaves, frozen ones as
/// constants, so "gradients flow only into the adaptation scope" holds by
/// construction rather than by masking.
#[derive(Clone)]
pub struct VarSet<'t> {
    entries: IndexMap<String, (Var<'t>, bool)>,
}

impl<'t> VarSet<'t> {
    /// Lift a parameter set onto a tape. `trainable` decides leaf vs
    /// constant per name.
    pub fn lift(
        tape: &'t Tape,
        params: &ParameterSet,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<VarSet<'t>> {
        let mut entries = IndexMap::new();
        for (name, tensor) in params.iter() {
            let is_trainable = trainable(name);
            let var = if is_trainable {
                tape.var(tensor.clone())?
            } else {
                tape.constant(tensor.clone())?
            };
            entries.insert(name.to_string(), (var, is_trainable));
        }
        Ok(VarSet { entries })
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.entries
            .get(name)
            .map(|(v, _)| *v)
            .ok_or_else(|| Error::UnknownVar(format!("no variable named {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Names and vars of trainable entries, in insertion order.
    pub fn trainable(&self) -> Vec<(&str, Var<'t>)> {
        self.entries
            .iter()
            .filter(|(_, (_, t))| *t)
            .map(|(name, (var, _))| (name.as_str(), *var))
            .collect()
    }

    /// Rebind a trainable entry to a new var (an updated parameter).
    pub fn rebind(&mut self, name: &str, var: Var<'t>) -> Result<()> {
        match self.entries.get_mut(name) {
            Some((slot, true)) => {
                *slot = var;
                Ok(())
            }
            Some((_, false)) => Err(Error::Config(format!(
                "cannot rebind frozen parameter {name:?}"
            ))),
            None => Err(Error::UnknownVar(format!("no variable named {name:?}"))),
        }
    }

    /// Snapshot current values back into a parameter set.
    pub fn to_params(&self, config_hash: u64) -> ParameterSet {
        let mut out = ParameterSet::new(config_hash);
        for (name, (var, _)) in &self.entries {
            out.entries.insert(name.clone(), var.value());
        }
        out
    }
}
