//! Sharded dataset storage and loading.
//!
//! - [`shard`]: streaming tar shard reader/writer.
//! - [`store`]: redirecting object cluster (gateways, targets, client).
//! - [`reshard`]: distributed reshard of a dataset into new shards.
//! - [`loader`]: epoch-shuffled, batching record pipeline.
//! - [`bench`]: delivery and loop benchmarks, dataset inflation, reports.
//! - [`cli`]: the `shardstore` command line.

pub mod bench;
pub mod cli;
pub mod loader;
pub mod reshard;
pub mod shard;
pub mod size;
pub mod store;

pub use shardstore_core as core;
