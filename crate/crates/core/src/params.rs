//! Flat parameter storage with named, shaped entries.
//!
//! Every trainable tensor lives inside one contiguous buffer per container
//! (model state, prompt bank, soft mask fields). Entries carry the partition
//! they belong to, which is what the stage freeze contracts are checked against.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PovError, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Backbone,
    Head,
    ViewPrompt,
    MaskPrompt,
}

impl Partition {
    pub const ALL: [Partition; 4] = [
        Partition::Backbone,
        Partition::Head,
        Partition::ViewPrompt,
        Partition::MaskPrompt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Partition::Backbone => "backbone",
            Partition::Head => "head",
            Partition::ViewPrompt => "view_prompt",
            Partition::MaskPrompt => "mask_prompt",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Partition::ALL.into_iter().find(|p| p.name() == s)
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub partition: Partition,
    pub shape: Vec<usize>,
    /// Offset in elements within the owning buffer.
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered list of entries over one flat buffer.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an entry and returns its offset.
    pub fn push(&mut self, name: impl Into<String>, partition: Partition, shape: &[usize]) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let offset = self.total;
        let entry = ParamEntry {
            name: name.clone(),
            partition,
            shape: shape.to_vec(),
            offset,
        };
        self.total += entry.len();
        self.index.insert(name, self.entries.len());
        self.entries.push(entry);
        offset
    }

    pub fn from_entries(entries: Vec<ParamEntry>) -> Result<Self> {
        let mut layout = ParamLayout::new();
        for e in entries {
            if layout.index.contains_key(&e.name) {
                return Err(PovError::Integrity(format!("duplicate entry `{}`", e.name)));
            }
            if e.offset != layout.total {
                return Err(PovError::Integrity(format!(
                    "entry `{}` at offset {} but expected {}",
                    e.name, e.offset, layout.total
                )));
            }
            layout.push(e.name, e.partition, &e.shape);
        }
        Ok(layout)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn count_in(&self, partition: Partition) -> usize {
        self.entries
            .iter()
            .filter(|e| e.partition == partition)
            .map(ParamEntry::len)
            .sum()
    }
}

/// Reference to one named tensor inside some container's buffer.
#[derive(Debug, Clone)]
pub struct ParamRef<'a, F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: &'a [F],
}

/// Disjoint, exhaustive split of all parameters by partition.
#[derive(Debug, Clone)]
pub struct PartitionSet<'a, F> {
    pub groups: BTreeMap<Partition, Vec<ParamRef<'a, F>>>,
}

impl<'a, F: Real> PartitionSet<'a, F> {
    pub fn count(&self, partition: Partition) -> usize {
        self.groups
            .get(&partition)
            .map(|g| g.iter().map(|p| p.values.len()).sum())
            .unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        Partition::ALL.iter().map(|&p| self.count(p)).sum()
    }

    /// SHA-256 over the partition's entries in registration order: name,
    /// shape and little-endian values.
    pub fn checksum(&self, partition: Partition) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        if let Some(group) = self.groups.get(&partition) {
            for p in group {
                hasher.update(p.name.as_bytes());
                for &d in &p.shape {
                    hasher.update((d as u64).to_le_bytes());
                }
                buf.clear();
                for &v in p.values {
                    v.write_le(&mut buf);
                }
                hasher.update(&buf);
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn checksums(&self) -> BTreeMap<Partition, String> {
        Partition::ALL
            .iter()
            .map(|&p| (p, self.checksum(p)))
            .collect()
    }
}

/// Global L2 norm across several gradient slices.
pub fn global_norm<F: Real>(slices: &[&[F]]) -> f64 {
    slices
        .iter()
        .flat_map(|s| s.iter())
        .map(|&g| {
            let g = g.to_f64_lossy();
            g * g
        })
        .sum::<f64>()
        .sqrt()
}
