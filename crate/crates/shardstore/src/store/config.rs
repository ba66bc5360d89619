//! Cluster configuration file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use shardstore_core::placement::{ClusterMap, PlacementError, TargetInfo};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetOptions {
    /// Cap on GET body bytes per second for the whole target.
    #[serde(default)]
    pub read_rate_limit: Option<u64>,
    /// Verify the stored checksum before serving a full-object GET.
    #[serde(default = "default_true")]
    pub verify_checksums: bool,
    /// Concurrent reshard build tasks per target.
    #[serde(default = "default_build_tasks")]
    pub max_build_tasks: usize,
}

fn default_true() -> bool {
    true
}

fn default_build_tasks() -> usize {
    4
}

impl Default for TargetOptions {
    fn default() -> Self {
        TargetOptions {
            read_rate_limit: None,
            verify_checksums: true,
            max_build_tasks: default_build_tasks(),
        }
    }
}

/// JSON listing every gateway and target endpoint and the targets'
/// mountpaths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub gateways: Vec<String>,
    pub targets: Vec<TargetInfo>,
    #[serde(default)]
    pub target_options: TargetOptions,
}

impl ClusterConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// The version-1 map described by this file.
    pub fn initial_map(&self) -> Result<ClusterMap, PlacementError> {
        ClusterMap::new(self.targets.clone(), self.gateways.clone())
    }
}
