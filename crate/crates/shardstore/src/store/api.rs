//! JSON bodies and header names of the HTTP API.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub const MAP_VERSION_HEADER: &str = "x-map-version";
/// Set on target-to-target copies so the receiver stores locally only.
pub const REPLICA_HEADER: &str = "x-replica";
/// Set on gateway-to-gateway broadcasts to stop re-broadcasting.
pub const BROADCAST_HEADER: &str = "x-broadcast";
pub const CHECKSUM_HEADER: &str = "x-checksum";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListItem {
    pub name: String,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListPage {
    pub items: Vec<ListItem>,
    pub next_token: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub map_version: u64,
    #[serde(default)]
    pub role: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayMetrics {
    /// Object payload bytes that passed through the gateway in either
    /// direction.
    pub payload_bytes_proxied: u64,
    pub redirects: u64,
    pub object_requests: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MountpathMetrics {
    pub bytes_read: u64,
    pub bytes_written: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub id: String,
    pub mountpaths: BTreeMap<String, MountpathMetrics>,
    pub get_requests: u64,
    pub range_requests: u64,
    pub put_requests: u64,
    pub bytes_verified: u64,
    pub checksum_failures: u64,
}

impl TargetMetrics {
    pub fn bytes_read(&self) -> u64 {
        self.mountpaths.values().map(|m| m.bytes_read).sum()
    }

    pub fn bytes_written(&self) -> u64 {
        self.mountpaths.values().map(|m| m.bytes_written).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectMeta {
    pub size: u64,
    /// XXH64 of the body, 16 lowercase hex digits.
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalObject {
    pub bucket: String,
    pub name: String,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PullRequest {
    pub bucket: String,
    pub name: String,
    /// Endpoint of a target holding a copy.
    pub from: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RebalanceReport {
    pub moved: u64,
    pub deleted: u64,
    pub map_version: u64,
}

/// A contiguous byte range of one source shard and the records it holds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildPiece {
    pub source_bucket: String,
    pub source_shard: String,
    pub start: u64,
    pub end: u64,
    /// `(source_key, output_key)` in order of appearance.
    pub records: Vec<(String, String)>,
}

/// Instruction for a target to assemble one output shard.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildTask {
    pub bucket: String,
    pub name: String,
    pub pieces: Vec<BuildPiece>,
    /// Gateway for fetching source ranges.
    pub gateway: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
