//! In-process cluster on loopback ports, for tests and benchmarks.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use shardstore_core::placement::{ClusterMap, TargetInfo};
use tokio::net::TcpListener;
use tokio::sync::oneshot;

use super::client::Client;
use super::config::{ClusterConfig, TargetOptions};
use super::{gateway, target};

#[derive(Debug, Clone)]
pub struct LocalClusterSpec {
    pub targets: usize,
    pub gateways: usize,
    pub mountpaths_per_target: usize,
    pub options: TargetOptions,
    /// Data directory; a temporary one is created when `None`.
    pub root: Option<PathBuf>,
}

impl Default for LocalClusterSpec {
    fn default() -> Self {
        LocalClusterSpec {
            targets: 3,
            gateways: 1,
            mountpaths_per_target: 2,
            options: TargetOptions::default(),
            root: None,
        }
    }
}

impl LocalClusterSpec {
    pub fn new(targets: usize) -> Self {
        LocalClusterSpec {
            targets,
            ..Default::default()
        }
    }

    pub fn mountpaths(mut self, n: usize) -> Self {
        self.mountpaths_per_target = n;
        self
    }

    pub fn gateways(mut self, n: usize) -> Self {
        self.gateways = n;
        self
    }

    pub fn options(mut self, options: TargetOptions) -> Self {
        self.options = options;
        self
    }
}

pub struct LocalCluster {
    runtime: tokio::runtime::Runtime,
    config: ClusterConfig,
    root: PathBuf,
    _tmp: Option<tempfile::TempDir>,
    shutdowns: HashMap<String, oneshot::Sender<()>>,
    next_target: usize,
}

fn bind(runtime: &tokio::runtime::Runtime) -> anyhow::Result<(TcpListener, String)> {
    let listener = runtime.block_on(TcpListener::bind("127.0.0.1:0"))?;
    let addr = listener.local_addr()?.to_string();
    Ok((listener, addr))
}

fn mountpaths(root: &Path, id: &str, n: usize) -> Vec<String> {
    (0..n).map(|m| root.join(id).join(format!("mp{m}")).to_string_lossy().into_owned()).collect()
}

impl LocalCluster {
    pub fn start(spec: LocalClusterSpec) -> anyhow::Result<Self> {
        anyhow::ensure!(spec.targets > 0 && spec.gateways > 0 && spec.mountpaths_per_target > 0, "empty cluster");
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(8)
            .enable_all()
            .thread_name("local-cluster")
            .build()?;
        let (tmp, root) = match &spec.root {
            Some(r) => (None, r.clone()),
            None => {
                let t = tempfile::Builder::new().prefix("shardstore-").tempdir()?;
                let p = t.path().to_path_buf();
                (Some(t), p)
            }
        };

        let mut target_listeners = Vec::new();
        let mut targets = Vec::new();
        for i in 0..spec.targets {
            let (l, addr) = bind(&runtime)?;
            let id = format!("t{i}");
            targets.push(TargetInfo {
                mountpaths: mountpaths(&root, &id, spec.mountpaths_per_target),
                id,
                endpoint: addr,
            });
            target_listeners.push(l);
        }
        let mut gateway_listeners = Vec::new();
        let mut gateways = Vec::new();
        for _ in 0..spec.gateways {
            let (l, addr) = bind(&runtime)?;
            gateways.push(addr);
            gateway_listeners.push(l);
        }
        let config = ClusterConfig {
            gateways,
            targets,
            target_options: spec.options.clone(),
        };
        let map = config.initial_map()?;

        let mut cluster = LocalCluster {
            runtime,
            config: config.clone(),
            root,
            _tmp: tmp,
            shutdowns: HashMap::new(),
            next_target: spec.targets,
        };
        for (t, l) in config.targets.iter().zip(target_listeners) {
            cluster.spawn_target(t.clone(), map.clone(), l)?;
        }
        for (g, l) in config.gateways.iter().zip(gateway_listeners) {
            let state = gateway::GatewayState::new(g.clone(), map.clone());
            let (tx, rx) = oneshot::channel();
            cluster.runtime.spawn(gateway::serve(l, state, async {
                let _ = rx.await;
            }));
            cluster.shutdowns.insert(format!("gateway:{g}"), tx);
        }
        Ok(cluster)
    }

    fn spawn_target(&mut self, info: TargetInfo, map: ClusterMap, listener: TcpListener) -> anyhow::Result<()> {
        let state = target::TargetState::new(info.clone(), map, self.config.target_options.clone())
            .with_context(|| format!("preparing mountpaths of {}", info.id))?;
        let (tx, rx) = oneshot::channel();
        self.runtime.spawn(target::serve(listener, state, async {
            let _ = rx.await;
        }));
        self.shutdowns.insert(info.id, tx);
        Ok(())
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn gateway(&self) -> &str {
        &self.config.gateways[0]
    }

    pub fn targets(&self) -> &[TargetInfo] {
        &self.config.targets
    }

    pub fn client(&self) -> Client {
        Client::with_gateways(self.config.gateways.clone())
    }

    /// Shuts a target down without touching the cluster map.
    pub fn stop_target(&mut self, id: &str) {
        if let Some(tx) = self.shutdowns.remove(id) {
            let _ = tx.send(());
        }
        // Graceful shutdown waits for open connections; poll until the
        // port stops answering so callers see a dead target.
        if let Some(t) = self.config.targets.iter().find(|t| t.id == id) {
            let addr = t.endpoint.clone();
            for _ in 0..200 {
                if std::net::TcpStream::connect(&addr).is_err() {
                    break;
                }
                std::thread::sleep(std::time::Duration::from_millis(10));
            }
        }
    }

    /// Starts a fresh target that is not yet part of the map. Join it
    /// through [`Client::join_target`].
    pub fn spawn_new_target(&mut self, mountpaths_per_target: usize) -> anyhow::Result<TargetInfo> {
        let (l, addr) = bind(&self.runtime)?;
        let id = format!("t{}", self.next_target);
        self.next_target += 1;
        let info = TargetInfo {
            mountpaths: mountpaths(&self.root, &id, mountpaths_per_target),
            id,
            endpoint: addr,
        };
        let map = self.client().cluster_map()?;
        self.spawn_target(info.clone(), map, l)?;
        self.config.targets.push(info.clone());
        Ok(info)
    }

    pub fn runtime(&self) -> &tokio::runtime::Runtime {
        &self.runtime
    }
}

impl Drop for LocalCluster {
    fn drop(&mut self) {
        for (_, tx) in self.shutdowns.drain() {
            let _ = tx.send(());
        }
    }
}

/// Runs a single target process until `shutdown` resolves.
pub async fn run_target(
    config: Arc<ClusterConfig>,
    id: &str,
    listener: TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> anyhow::Result<()> {
    let info = config
        .targets
        .iter()
        .find(|t| t.id == id)
        .cloned()
        .with_context(|| format!("no target {id:?} in cluster config"))?;
    let state = target::TargetState::new(info, config.initial_map()?, config.target_options.clone())?;
    target::serve(listener, state, shutdown).await?;
    Ok(())
}

/// Runs a single gateway process until `shutdown` resolves.
pub async fn run_gateway(
    config: Arc<ClusterConfig>,
    endpoint: &str,
    listener: TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> anyhow::Result<()> {
    let state = gateway::GatewayState::new(endpoint, config.initial_map()?);
    gateway::serve(listener, state, shutdown).await?;
    Ok(())
}
