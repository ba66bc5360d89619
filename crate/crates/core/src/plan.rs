//! Reshard planning: impose a global record order, then pack greedily into
//! output shards of a target payload size.
//!
//! Packing counts record payload bytes (sum of component sizes), not tar
//! bytes. A shard is closed when the next record would push it past the
//! target and it already holds at least one record, so a record larger than
//! the target ends up alone in an oversize shard rather than being split.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::record::Grouping;
use crate::rng::{fisher_yates, Prng};
use crate::template::{NameTemplate, TemplateError};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("record key {key:?} appears in both {first} and {second}")]
    DuplicateKey { key: String, first: String, second: String },
    #[error("min_shard_bytes must be in 1..=target_shard_bytes")]
    SizeBounds,
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Order {
    /// Seeded Fisher–Yates permutation of the index order.
    Random { seed: u64 },
    /// Lexicographic by record key.
    ByKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReshardSpec {
    pub source_bucket: String,
    pub source_prefix: String,
    pub dest_bucket: String,
    pub name_template: String,
    pub order: Order,
    pub target_shard_bytes: u64,
    /// Advisory only; the last shard may come in under it.
    pub min_shard_bytes: u64,
    #[serde(default)]
    pub grouping: Grouping,
}

impl ReshardSpec {
    pub fn validate(&self) -> Result<NameTemplate, PlanError> {
        if self.min_shard_bytes == 0 || self.min_shard_bytes > self.target_shard_bytes {
            return Err(PlanError::SizeBounds);
        }
        Ok(NameTemplate::parse(&self.name_template)?)
    }
}

/// One record of the source dataset, located without reading its payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordIndexEntry {
    /// Unique key in the output (equals `source_key` unless renamed).
    pub key: String,
    /// Key as stored in the source shard.
    pub source_key: String,
    pub shard_name: String,
    pub payload_bytes: u64,
    pub extensions: Vec<String>,
    /// Byte range `[start, end)` of the record's tar entries in its shard.
    pub start: u64,
    pub end: u64,
}

/// Enforces key uniqueness across the index. Strict mode fails on the
/// first repeat; permissive mode renames the n-th repeat to `key#n`.
pub fn resolve_duplicate_keys(entries: &mut [RecordIndexEntry], mode: Grouping) -> Result<(), PlanError> {
    let mut first_seen: BTreeMap<String, (String, u32)> = BTreeMap::new();
    for e in entries.iter_mut() {
        match first_seen.get_mut(&e.key) {
            None => {
                first_seen.insert(e.key.clone(), (e.shard_name.clone(), 0));
            }
            Some((first, repeats)) => {
                if mode == Grouping::Strict {
                    return Err(PlanError::DuplicateKey {
                        key: e.key.clone(),
                        first: first.clone(),
                        second: e.shard_name.clone(),
                    });
                }
                *repeats += 1;
                e.key = format!("{}#{}", e.key, repeats);
            }
        }
    }
    Ok(())
}

/// Greedy shard packer shared by resharding, shard creation and inflation.
#[derive(Debug, Clone)]
pub struct ShardPacker {
    target: u64,
    bytes: u64,
    records: usize,
}

impl ShardPacker {
    pub fn new(target_bytes: u64) -> Self {
        ShardPacker {
            target: target_bytes,
            bytes: 0,
            records: 0,
        }
    }

    /// Accounts one record of `payload` bytes. Returns true when the
    /// current shard must be closed before this record is added (the
    /// record then opens the next shard).
    pub fn offer(&mut self, payload: u64) -> bool {
        let close = self.records > 0 && self.bytes.saturating_add(payload) > self.target;
        if close {
            self.bytes = 0;
            self.records = 0;
        }
        self.bytes += payload;
        self.records += 1;
        close
    }

    pub fn current_bytes(&self) -> u64 {
        self.bytes
    }
}

/// Packs `sizes` (in order) and returns the number of items per shard.
pub fn pack_sizes(sizes: impl IntoIterator<Item = u64>, target_bytes: u64) -> Vec<usize> {
    let mut packer = ShardPacker::new(target_bytes);
    let mut counts: Vec<usize> = Vec::new();
    for s in sizes {
        if packer.offer(s) || counts.is_empty() {
            counts.push(0);
        }
        *counts.last_mut().unwrap() += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedShard {
    pub name: String,
    pub keys: Vec<String>,
    pub payload_bytes: u64,
}

/// Global order over `index` for `order`, as positions into `index`.
pub fn global_order(index: &[RecordIndexEntry], order: Order) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..index.len()).collect();
    match order {
        Order::Random { seed } => fisher_yates(&mut pos, &mut Prng::new(seed)),
        Order::ByKey => pos.sort_by(|&a, &b| index[a].key.cmp(&index[b].key)),
    }
    pos
}

/// Deterministic plan for `(index, spec)`: output shard names from the
/// template, numbered from 0, with their ordered record keys.
pub fn plan_reshard(index: &[RecordIndexEntry], spec: &ReshardSpec) -> Result<Vec<PlannedShard>, PlanError> {
    let template = spec.validate()?;
    let mut packer = ShardPacker::new(spec.target_shard_bytes);
    let mut plan: Vec<PlannedShard> = Vec::new();
    for i in global_order(index, spec.order) {
        let e = &index[i];
        if packer.offer(e.payload_bytes) || plan.is_empty() {
            plan.push(PlannedShard {
                name: template.format(plan.len() as u64),
                keys: Vec::new(),
                payload_bytes: 0,
            });
        }
        let cur = plan.last_mut().unwrap();
        cur.keys.push(e.key.clone());
        cur.payload_bytes += e.payload_bytes;
    }
    Ok(plan)
}
