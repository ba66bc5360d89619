//! Cluster map and rendezvous (highest-random-weight) placement.
//!
//! An object's replica set is the `n` targets with the largest
//! `h64(bucket + "/" + name + "#" + target_id)`, ties broken by the smaller
//! target id. Within a target, the mountpath is the one with the largest
//! `h64(bucket + "/" + name + "@" + mountpath)`.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::hash::h64_parts;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlacementError {
    #[error("need {wanted} targets, cluster map has {available}")]
    InsufficientTargets { wanted: usize, available: usize },
    #[error("target {0:?} is already a member")]
    DuplicateTarget(String),
    #[error("no target {0:?} in the cluster map")]
    UnknownTarget(String),
    #[error("refusing to remove the last target")]
    LastTarget,
    #[error("invalid target {0:?}: {1}")]
    InvalidTarget(String, &'static str),
    #[error("invalid object reference {0:?}")]
    InvalidObject(String),
    #[error("mirror count must be at least 1")]
    ZeroMirror,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetInfo {
    pub id: String,
    /// `host:port`
    pub endpoint: String,
    pub mountpaths: Vec<String>,
}

impl TargetInfo {
    pub fn validate(&self) -> Result<(), PlacementError> {
        if self.id.is_empty() {
            return Err(PlacementError::InvalidTarget(self.id.clone(), "empty id"));
        }
        if self.mountpaths.is_empty() {
            return Err(PlacementError::InvalidTarget(self.id.clone(), "no mountpaths"));
        }
        for (i, m) in self.mountpaths.iter().enumerate() {
            if self.mountpaths[..i].contains(m) {
                return Err(PlacementError::InvalidTarget(self.id.clone(), "duplicate mountpath"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterMap {
    pub version: u64,
    pub targets: Vec<TargetInfo>,
    /// Gateway endpoints, `host:port`.
    pub gateways: Vec<String>,
}

impl ClusterMap {
    pub fn new(targets: Vec<TargetInfo>, gateways: Vec<String>) -> Result<Self, PlacementError> {
        let map = ClusterMap {
            version: 1,
            targets,
            gateways,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<(), PlacementError> {
        for (i, t) in self.targets.iter().enumerate() {
            t.validate()?;
            if self.targets[..i].iter().any(|o| o.id == t.id) {
                return Err(PlacementError::DuplicateTarget(t.id.clone()));
            }
        }
        Ok(())
    }

    pub fn target(&self, id: &str) -> Option<&TargetInfo> {
        self.targets.iter().find(|t| t.id == id)
    }

    pub fn is_operational(&self) -> bool {
        !self.targets.is_empty() && !self.gateways.is_empty()
    }

    /// New map with `target` added and the version bumped.
    pub fn join(&self, target: TargetInfo) -> Result<ClusterMap, PlacementError> {
        target.validate()?;
        if self.target(&target.id).is_some() {
            return Err(PlacementError::DuplicateTarget(target.id));
        }
        let mut next = self.clone();
        next.targets.push(target);
        next.version += 1;
        Ok(next)
    }

    /// New map without target `id` and the version bumped.
    pub fn remove(&self, id: &str) -> Result<ClusterMap, PlacementError> {
        if self.target(id).is_none() {
            return Err(PlacementError::UnknownTarget(id.to_string()));
        }
        if self.targets.len() == 1 {
            return Err(PlacementError::LastTarget);
        }
        let mut next = self.clone();
        next.targets.retain(|t| t.id != id);
        next.version += 1;
        Ok(next)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketPolicy {
    /// Number of stored copies; 1 means no mirroring.
    #[serde(rename = "mirror")]
    pub mirror_count: usize,
}

impl Default for BucketPolicy {
    fn default() -> Self {
        BucketPolicy { mirror_count: 1 }
    }
}

impl BucketPolicy {
    pub fn validate(&self, targets: usize) -> Result<(), PlacementError> {
        if self.mirror_count == 0 {
            return Err(PlacementError::ZeroMirror);
        }
        if self.mirror_count > targets {
            return Err(PlacementError::InsufficientTargets {
                wanted: self.mirror_count,
                available: targets,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObjectRef {
    pub bucket: String,
    pub name: String,
}

impl ObjectRef {
    pub fn new(bucket: impl Into<String>, name: impl Into<String>) -> Result<Self, PlacementError> {
        let obj = ObjectRef {
            bucket: bucket.into(),
            name: name.into(),
        };
        obj.validate()?;
        Ok(obj)
    }

    /// Both parts non-empty; bucket has no `/`; name has no leading `/`,
    /// empty segments, `.` or `..` segments, or NUL.
    pub fn validate(&self) -> Result<(), PlacementError> {
        let bad_bucket = self.bucket.is_empty() || self.bucket.contains(['/', '\0']) || self.bucket.starts_with('.');
        let bad_name = self.name.is_empty()
            || self.name.contains('\0')
            || self.name.split('/').any(|s| s.is_empty() || s == "." || s == "..");
        if bad_bucket || bad_name {
            let mut s = self.bucket.clone();
            s.push('/');
            s.push_str(&self.name);
            return Err(PlacementError::InvalidObject(s));
        }
        Ok(())
    }
}

/// Placement weight of `target_id` for `obj`.
pub fn target_weight(obj: &ObjectRef, target_id: &str) -> u64 {
    h64_parts(&[
        obj.bucket.as_bytes(),
        b"/",
        obj.name.as_bytes(),
        b"#",
        target_id.as_bytes(),
    ])
}

/// All targets in placement order for `obj`.
pub fn rank_targets<'m>(map: &'m ClusterMap, obj: &ObjectRef) -> Vec<&'m TargetInfo> {
    let mut ranked: Vec<(u64, &TargetInfo)> = map
        .targets
        .iter()
        .map(|t| (target_weight(obj, &t.id), t))
        .collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
    ranked.into_iter().map(|(_, t)| t).collect()
}

/// The top-`n` targets for `obj`; element 0 is the primary.
pub fn hrw_targets<'m>(map: &'m ClusterMap, obj: &ObjectRef, n: usize) -> Result<Vec<&'m TargetInfo>, PlacementError> {
    if n == 0 || n > map.targets.len() {
        return Err(PlacementError::InsufficientTargets {
            wanted: n,
            available: map.targets.len(),
        });
    }
    let mut ranked = rank_targets(map, obj);
    ranked.truncate(n);
    Ok(ranked)
}

/// The mountpath of `target` that stores `obj`.
pub fn hrw_mountpath<'t>(target: &'t TargetInfo, obj: &ObjectRef) -> &'t str {
    target
        .mountpaths
        .iter()
        .map(|m| {
            let w = h64_parts(&[obj.bucket.as_bytes(), b"/", obj.name.as_bytes(), b"@", m.as_bytes()]);
            (w, m)
        })
        .max_by(|a, b| a.0.cmp(&b.0).then_with(|| b.1.cmp(a.1)))
        .map(|(_, m)| m.as_str())
        .expect("target has at least one mountpath")
}
