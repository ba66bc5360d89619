//! Allocation-only building blocks for sharded deep-learning datasets.
//!
//! Everything in this crate is pure: no IO, no threads, no clocks. The std
//! companion crate (`shardstore`) wires these pieces to files, sockets and
//! processes.
//!
//! - [`record`]: record keys, [`Record`], and adjacency-preserving grouping.
//! - [`tar`]: ustar/pax header codec (512-byte blocks, octal fields).
//! - [`placement`]: cluster map types and rendezvous (HRW) placement.
//! - [`plan`]: greedy shard packing and reshard planning.
//! - [`epoch`]: per-epoch shard permutation and worker slicing.
//! - [`shuffle`] / [`batch`]: bounded shuffle buffer and batching adapters.
//! - [`rng`]: the portable seeded generator every deterministic path uses.
//! - [`throughput`]: benchmark accounting arithmetic.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod batch;
pub mod epoch;
pub mod hash;
pub mod placement;
pub mod plan;
pub mod record;
pub mod rng;
pub mod shuffle;
pub mod tar;
pub mod template;
pub mod throughput;

pub use batch::Batches;
pub use epoch::{make_epoch_plan, EpochPlan};
pub use placement::{
    hrw_mountpath, hrw_targets, BucketPolicy, ClusterMap, ObjectRef, PlacementError, TargetInfo,
};
pub use plan::{plan_reshard, Order, PlannedShard, RecordIndexEntry, ShardPacker};
pub use record::{record_key, split_entry_name, Grouping, Record, RecordError, RecordGrouper};
pub use rng::Prng;
pub use shuffle::Shuffled;
