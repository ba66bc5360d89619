//! A minimal scale-out object store.
//!
//! Gateways hold the cluster map and answer every object request with a
//! `307` pointing at the object's primary target; they never carry object
//! payload. Targets own one or more mountpaths, store object bodies with a
//! checksum sidecar, mirror synchronously to the rest of the replica set,
//! and serve reads directly to clients.
//!
//! Placement is rendezvous hashing over the versioned [`ClusterMap`]
//! (see [`shardstore_core::placement`]). Targets reject requests routed
//! with an older map version than their own with `409`.

pub mod api;
pub mod client;
pub mod config;
pub mod gateway;
pub mod local;
pub mod ratelimit;
pub mod target;

pub use client::{Client, ClientError, ClientStats};
pub use config::{ClusterConfig, TargetOptions};
pub use local::{LocalCluster, LocalClusterSpec};

pub use shardstore_core::placement::{BucketPolicy, ClusterMap, ObjectRef, TargetInfo};

/// Percent-encodes an object name for use in a URL path, keeping `/`.
pub fn encode_path(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    for b in name.bytes() {
        match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' | b'/' => out.push(b as char),
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}

/// Hex encoding used for list continuation tokens.
pub(crate) fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn hex_decode(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}
