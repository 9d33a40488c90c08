//! Named parameter store partitioned into the four trainable groups.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which part of the model a parameter belongs to. Every loss in the training
/// pipeline touches a fixed subset of these, enforced by [`PartitionSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Partition {
    /// Prompt encoder.
    Prompt,
    /// Prompt-agnostic encoder plus predictor stack.
    Backbone,
    /// Prompt mixing network.
    PromptMix,
    /// Structure mixing network.
    StructMix,
}

impl Partition {
    pub fn as_byte(self) -> u8 {
        match self {
            Partition::Prompt => 0,
            Partition::Backbone => 1,
            Partition::PromptMix => 2,
            Partition::StructMix => 3,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Partition::Prompt),
            1 => Ok(Partition::Backbone),
            2 => Ok(Partition::PromptMix),
            3 => Ok(Partition::StructMix),
            other => Err(Error::Corrupt(format!("invalid partition byte {other}"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Partition::Prompt => "PROMPT",
            Partition::Backbone => "BACKBONE",
            Partition::PromptMix => "PROMPTMIX",
            Partition::StructMix => "STRUCTMIX",
        }
    }
}

/// Set of partitions, used to select which parameters a graph binds as
/// trainable and which an optimizer is allowed to touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionSet(u8);

impl PartitionSet {
    pub const NONE: PartitionSet = PartitionSet(0);
    pub const PROMPT: PartitionSet = PartitionSet(1);
    pub const BACKBONE: PartitionSet = PartitionSet(2);
    pub const PROMPT_MIX: PartitionSet = PartitionSet(4);
    pub const STRUCT_MIX: PartitionSet = PartitionSet(8);
    /// The backbone loss partitions (prompt encoder + backbone).
    pub const THETA: PartitionSet = PartitionSet(1 | 2);
    /// The mixing-network partitions.
    pub const PHI: PartitionSet = PartitionSet(4 | 8);
    pub const ALL: PartitionSet = PartitionSet(15);

    pub fn contains(self, p: Partition) -> bool {
        let bit = match p {
            Partition::Prompt => 1,
            Partition::Backbone => 2,
            Partition::PromptMix => 4,
            Partition::StructMix => 8,
        };
        self.0 & bit != 0
    }

    pub fn union(self, other: PartitionSet) -> PartitionSet {
        PartitionSet(self.0 | other.0)
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
    pub partition: Partition,
}

impl Param {
    pub fn new(dims: Vec<usize>, data: Vec<f64>, partition: Partition) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Param {
            dims,
            data,
            partition,
        }
    }

    /// (rows, cols) view used when binding into a graph. Rank-1 parameters
    /// bind as a single row.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.dims.len() {
            1 => (1, self.dims[0]),
            2 => (self.dims[0], self.dims[1]),
            _ => (self.dims[0], self.data.len() / self.dims[0]),
        }
    }
}

/// Deterministically ordered map of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) {
        self.params.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
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

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names_in(&self, set: PartitionSet) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| set.contains(p.partition))
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn has_partition(&self, partition: Partition) -> bool {
        self.params.values().any(|p| p.partition == partition)
    }

    /// Deep copy of one partition group; the copies carry no gradient state
    /// and can be mutated independently.
    pub fn clone_partition(&self, set: PartitionSet) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, p) in &self.params {
            if set.contains(p.partition) {
                out.insert(name.clone(), p.clone());
            }
        }
        out
    }

    /// Overwrite every parameter present in `other` (names must exist here).
    pub fn write_back(&mut self, other: &ParamStore) -> Result<()> {
        for (name, p) in other.iter() {
            let dst = self.get_mut(name)?;
            dst.data.clone_from(&p.data);
        }
        Ok(())
    }

    /// Bitwise equality of one partition between two stores.
    pub fn partition_eq(&self, other: &ParamStore, set: PartitionSet) -> bool {
        let mine = self.names_in(set);
        let theirs = other.names_in(set);
        if mine != theirs {
            return false;
        }
        mine.iter().all(|n| {
            let a = &self.params[n];
            let b = &other.params[n];
            a.data.len() == b.data.len()
                && a.data
                    .iter()
                    .zip(&b.data)
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        })
    }

    /// Total scalar count, handy for logging.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }
}
