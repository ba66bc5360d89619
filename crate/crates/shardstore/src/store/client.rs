//! Blocking HTTP client.
//!
//! Every object operation goes to a gateway first and follows its `307` to
//! the primary target by hand, so redirects can be counted. Reads fail over
//! to mirrors when the primary is unreachable; a `409` (stale map) is retried
//! through the gateway.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, Read};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{de::DeserializeOwned, Serialize};
use shardstore_core::placement::{hrw_targets, BucketPolicy, ClusterMap, ObjectRef, TargetInfo};
use ureq::http::{Response, StatusCode};
use ureq::Body;

use super::api::*;
use super::encode_path;
use super::target::http_agent;

const STALE_RETRIES: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("HTTP {status}: {message}")]
    Http { status: u16, message: String },
    #[error("transport error talking to {endpoint}: {message}")]
    Transport { endpoint: String, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ClientError {
    fn transport(endpoint: &str, e: impl std::fmt::Display) -> Self {
        ClientError::Transport {
            endpoint: endpoint.to_string(),
            message: e.to_string(),
        }
    }

    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Http { status, .. } => Some(*status),
            ClientError::NotFound(_) => Some(404),
            _ => None,
        }
    }

    /// True when another replica might succeed.
    fn fail_over(&self) -> bool {
        match self {
            ClientError::Transport { .. } => true,
            ClientError::Http { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

/// Cumulative per-client counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClientStats {
    pub ops: u64,
    pub redirects: u64,
    pub failovers: u64,
    pub stale_retries: u64,
}

#[derive(Default)]
struct Counters {
    ops: AtomicU64,
    redirects: AtomicU64,
    failovers: AtomicU64,
    stale_retries: AtomicU64,
}

struct Inner {
    gateways: Vec<String>,
    agent: ureq::Agent,
    counters: Counters,
    policies: Mutex<HashMap<String, BucketPolicy>>,
}

/// Cheap to clone; clones share counters and the connection pool.
#[derive(Clone)]
pub struct Client {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Client {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Client").field("gateways", &self.inner.gateways).finish()
    }
}

fn error_from(resp: Response<Body>, what: &str) -> ClientError {
    let status = resp.status();
    let message = resp
        .into_body()
        .read_json::<ErrorBody>()
        .map(|b| b.error)
        .unwrap_or_else(|_| status.canonical_reason().unwrap_or("").to_string());
    if status == StatusCode::NOT_FOUND {
        ClientError::NotFound(format!("{what}: {message}"))
    } else {
        ClientError::Http {
            status: status.as_u16(),
            message: format!("{what}: {message}"),
        }
    }
}

fn json_body<T: DeserializeOwned>(resp: Response<Body>) -> Result<T, ClientError> {
    resp.into_body()
        .with_config()
        .limit(1 << 30)
        .read_json()
        .map_err(|e| ClientError::Protocol(e.to_string()))
}

/// Stands in for a body that must never be sent: the gateway answers a
/// `100-continue` request with its redirect before any byte goes out.
struct NoBody;

impl Read for NoBody {
    fn read(&mut self, _: &mut [u8]) -> io::Result<usize> {
        Err(io::Error::other("gateway accepted an object body"))
    }
}

fn object_url(endpoint: &str, obj: &ObjectRef) -> String {
    format!("http://{endpoint}/v1/objects/{}/{}", obj.bucket, encode_path(&obj.name))
}

impl Client {
    pub fn new(gateway: &str) -> Self {
        Self::with_gateways(vec![gateway.to_string()])
    }

    pub fn with_gateways(gateways: Vec<String>) -> Self {
        assert!(!gateways.is_empty(), "client needs at least one gateway");
        let gateways = gateways
            .into_iter()
            .map(|g| g.trim_start_matches("http://").trim_end_matches('/').to_string())
            .collect();
        Client {
            inner: Arc::new(Inner {
                gateways,
                agent: http_agent(),
                counters: Counters::default(),
                policies: Mutex::new(HashMap::new()),
            }),
        }
    }

    /// A client for the same gateways with its own counters.
    pub fn fresh(&self) -> Self {
        Self::with_gateways(self.inner.gateways.clone())
    }

    pub fn gateway(&self) -> &str {
        &self.inner.gateways[0]
    }

    pub fn stats(&self) -> ClientStats {
        let c = &self.inner.counters;
        ClientStats {
            ops: c.ops.load(Ordering::Relaxed),
            redirects: c.redirects.load(Ordering::Relaxed),
            failovers: c.failovers.load(Ordering::Relaxed),
            stale_retries: c.stale_retries.load(Ordering::Relaxed),
        }
    }

    fn agent(&self) -> &ureq::Agent {
        &self.inner.agent
    }

    /// Runs `f` against each gateway until one is reachable.
    fn on_gateway<T>(&self, mut f: impl FnMut(&str) -> Result<T, ClientError>) -> Result<T, ClientError> {
        let mut last = None;
        for g in &self.inner.gateways {
            match f(g) {
                Err(e @ ClientError::Transport { .. }) => last = Some(e),
                other => return other,
            }
        }
        Err(last.expect("at least one gateway"))
    }

    fn gateway_json<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        self.on_gateway(|g| {
            let resp = self
                .agent()
                .get(&format!("http://{g}{path}"))
                .call()
                .map_err(|e| ClientError::transport(g, e))?;
            if !resp.status().is_success() {
                return Err(error_from(resp, path));
            }
            json_body(resp)
        })
    }

    fn gateway_send<B: Serialize, T: DeserializeOwned>(&self, method: &str, path: &str, body: Option<&B>) -> Result<T, ClientError> {
        self.on_gateway(|g| {
            let url = format!("http://{g}{path}");
            let r = match (method, body) {
                ("PUT", Some(b)) => self.agent().put(&url).send_json(b),
                ("POST", Some(b)) => self.agent().post(&url).send_json(b),
                ("POST", None) => self.agent().post(&url).send_empty(),
                ("DELETE", _) => self.agent().delete(&url).call(),
                _ => unreachable!("unsupported admin call {method}"),
            };
            let resp = r.map_err(|e| ClientError::transport(g, e))?;
            if !resp.status().is_success() {
                return Err(error_from(resp, path));
            }
            json_body(resp)
        })
    }

    /// Asks a gateway where `obj` lives. Returns the target URL.
    fn locate(&self, method: &str, obj: &ObjectRef, size: Option<u64>) -> Result<String, ClientError> {
        obj.validate().map_err(|e| ClientError::Protocol(e.to_string()))?;
        self.on_gateway(|g| {
            let url = object_url(g, obj);
            let r = match method {
                "GET" => self.agent().get(&url).call(),
                "DELETE" => self.agent().delete(&url).call(),
                "PUT" => self
                    .agent()
                    .put(&url)
                    .header("expect", "100-continue")
                    .header("content-length", size.unwrap_or(0).to_string())
                    .send(ureq::SendBody::from_owned_reader(NoBody)),
                _ => unreachable!(),
            };
            let resp = r.map_err(|e| ClientError::transport(g, e))?;
            if resp.status() != StatusCode::TEMPORARY_REDIRECT {
                return Err(error_from(resp, &format!("{method} {}/{}", obj.bucket, obj.name)));
            }
            let loc = resp
                .headers()
                .get("location")
                .and_then(|v| v.to_str().ok())
                .ok_or_else(|| ClientError::Protocol("redirect without location".into()))?
                .to_string();
            self.inner.counters.redirects.fetch_add(1, Ordering::Relaxed);
            tracing::debug!(%method, bucket = %obj.bucket, name = %obj.name, %loc, "redirect");
            Ok(loc)
        })
    }

    pub fn bucket_policy(&self, bucket: &str) -> Result<BucketPolicy, ClientError> {
        if let Some(p) = self.inner.policies.lock().unwrap_or_else(|e| e.into_inner()).get(bucket) {
            return Ok(*p);
        }
        let p: BucketPolicy = self.gateway_json(&format!("/v1/buckets/{bucket}"))?;
        self.inner
            .policies
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(bucket.to_string(), p);
        Ok(p)
    }

    /// Mirrors of `obj` after the primary, in placement order.
    fn mirrors(&self, obj: &ObjectRef) -> Result<Vec<TargetInfo>, ClientError> {
        let policy = self.bucket_policy(&obj.bucket)?;
        let map = self.cluster_map()?;
        let set = hrw_targets(&map, obj, policy.mirror_count.min(map.targets.len()))
            .map_err(|e| ClientError::Protocol(e.to_string()))?;
        Ok(set.into_iter().skip(1).cloned().collect())
    }

    fn direct_get(&self, url: &str, range: Option<(u64, u64)>) -> Result<Response<Body>, ClientError> {
        let mut req = self.agent().get(url);
        if let Some((start, end)) = range {
            req = req.header("range", format!("bytes={}-{}", start, end - 1));
        }
        let resp = req.call().map_err(|e| ClientError::transport(url, e))?;
        let ok = if range.is_some() {
            resp.status() == StatusCode::PARTIAL_CONTENT
        } else {
            resp.status() == StatusCode::OK
        };
        if !ok {
            return Err(error_from(resp, url));
        }
        Ok(resp)
    }

    fn read_object(&self, obj: &ObjectRef, range: Option<(u64, u64)>) -> Result<Response<Body>, ClientError> {
        self.inner.counters.ops.fetch_add(1, Ordering::Relaxed);
        let mut last = None;
        for _ in 0..STALE_RETRIES {
            let loc = self.locate("GET", obj, None)?;
            match self.direct_get(&loc, range) {
                Ok(resp) => return Ok(resp),
                Err(e) if e.status() == Some(409) => {
                    self.inner.counters.stale_retries.fetch_add(1, Ordering::Relaxed);
                    last = Some(e);
                }
                Err(e) if e.fail_over() => {
                    tracing::debug!(bucket = %obj.bucket, name = %obj.name, %e, "primary failed, trying mirrors");
                    let mut err = e;
                    for m in self.mirrors(obj)? {
                        self.inner.counters.failovers.fetch_add(1, Ordering::Relaxed);
                        match self.direct_get(&object_url(&m.endpoint, obj), range) {
                            Ok(resp) => return Ok(resp),
                            Err(e) => err = e,
                        }
                    }
                    return Err(err);
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("retried at least once"))
    }

    /// Streams the whole object.
    pub fn get_reader(&self, obj: &ObjectRef) -> Result<impl Read + Send + 'static, ClientError> {
        Ok(self.read_object(obj, None)?.into_body().into_reader())
    }

    /// Streams bytes `[start, end)` of the object.
    pub fn get_range_reader(&self, obj: &ObjectRef, start: u64, end: u64) -> Result<impl Read + Send + 'static, ClientError> {
        if start >= end {
            return Err(ClientError::Protocol(format!("empty range {start}..{end}")));
        }
        Ok(self.read_object(obj, Some((start, end)))?.into_body().into_reader())
    }

    pub fn get(&self, obj: &ObjectRef) -> Result<Vec<u8>, ClientError> {
        let mut out = Vec::new();
        self.get_reader(obj)?.read_to_end(&mut out)?;
        Ok(out)
    }

    pub fn get_range(&self, obj: &ObjectRef, start: u64, end: u64) -> Result<Vec<u8>, ClientError> {
        let mut out = Vec::new();
        self.get_range_reader(obj, start, end)?.read_to_end(&mut out)?;
        Ok(out)
    }

    /// Uploads `size` bytes produced by `open`, which is called once per
    /// attempt so a stale-map retry can resend the body.
    pub fn put_with<R: Read + 'static>(
        &self,
        obj: &ObjectRef,
        size: u64,
        mut open: impl FnMut() -> io::Result<R>,
    ) -> Result<ObjectMeta, ClientError> {
        self.inner.counters.ops.fetch_add(1, Ordering::Relaxed);
        let mut last = None;
        for _ in 0..STALE_RETRIES {
            let loc = self.locate("PUT", obj, Some(size))?;
            let resp = self
                .agent()
                .put(&loc)
                .header("expect", "100-continue")
                .header("content-length", size.to_string())
                .send(ureq::SendBody::from_owned_reader(open()?))
                .map_err(|e| ClientError::transport(&loc, e))?;
            if resp.status().is_success() {
                return json_body(resp);
            }
            let err = error_from(resp, &format!("PUT {}/{}", obj.bucket, obj.name));
            if err.status() != Some(409) {
                return Err(err);
            }
            self.inner.counters.stale_retries.fetch_add(1, Ordering::Relaxed);
            last = Some(err);
        }
        Err(last.expect("retried at least once"))
    }

    pub fn put(&self, obj: &ObjectRef, data: impl Into<Arc<[u8]>>) -> Result<ObjectMeta, ClientError> {
        let data: Arc<[u8]> = data.into();
        let size = data.len() as u64;
        self.put_with(obj, size, || Ok(io::Cursor::new(ArcBytes(data.clone()))))
    }

    pub fn put_file(&self, obj: &ObjectRef, path: &Path) -> Result<ObjectMeta, ClientError> {
        let size = std::fs::metadata(path)?.len();
        self.put_with(obj, size, || File::open(path))
    }

    pub fn delete(&self, obj: &ObjectRef) -> Result<(), ClientError> {
        self.inner.counters.ops.fetch_add(1, Ordering::Relaxed);
        let loc = self.locate("DELETE", obj, None)?;
        let resp = self.agent().delete(&loc).call().map_err(|e| ClientError::transport(&loc, e))?;
        if !resp.status().is_success() {
            return Err(error_from(resp, &format!("DELETE {}/{}", obj.bucket, obj.name)));
        }
        Ok(())
    }

    pub fn list(&self, bucket: &str, prefix: &str, token: Option<&str>, limit: Option<usize>) -> Result<ListPage, ClientError> {
        self.on_gateway(|g| {
            let mut req = self
                .agent()
                .get(&format!("http://{g}/v1/buckets/{bucket}/list"))
                .query("prefix", prefix);
            if let Some(t) = token {
                req = req.query("token", t);
            }
            if let Some(l) = limit {
                req = req.query("limit", l.to_string());
            }
            let resp = req.call().map_err(|e| ClientError::transport(g, e))?;
            if !resp.status().is_success() {
                return Err(error_from(resp, &format!("list {bucket}")));
            }
            json_body(resp)
        })
    }

    /// Every object under `prefix`, following continuation tokens.
    pub fn list_all(&self, bucket: &str, prefix: &str) -> Result<Vec<ListItem>, ClientError> {
        let mut out = Vec::new();
        let mut token: Option<String> = None;
        loop {
            let page = self.list(bucket, prefix, token.as_deref(), None)?;
            out.extend(page.items);
            match page.next_token {
                Some(t) => token = Some(t),
                None => return Ok(out),
            }
        }
    }

    pub fn create_bucket(&self, bucket: &str, mirror: usize) -> Result<BucketPolicy, ClientError> {
        let policy: BucketPolicy = self.gateway_send(
            "PUT",
            &format!("/v1/buckets/{bucket}"),
            Some(&BucketPolicy { mirror_count: mirror }),
        )?;
        self.inner
            .policies
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(bucket.to_string(), policy);
        Ok(policy)
    }

    pub fn buckets(&self) -> Result<std::collections::BTreeMap<String, BucketPolicy>, ClientError> {
        self.gateway_json("/v1/buckets")
    }

    pub fn cluster_map(&self) -> Result<ClusterMap, ClientError> {
        self.gateway_json("/v1/cluster/map")
    }

    pub fn health(&self) -> Result<Health, ClientError> {
        self.gateway_json("/v1/health")
    }

    pub fn gateway_metrics(&self) -> Result<GatewayMetrics, ClientError> {
        self.gateway_json("/v1/metrics")
    }

    /// Metrics straight from one target.
    pub fn target_metrics(&self, endpoint: &str) -> Result<TargetMetrics, ClientError> {
        let url = format!("http://{endpoint}/v1/metrics");
        let resp = self.agent().get(&url).call().map_err(|e| ClientError::transport(endpoint, e))?;
        if !resp.status().is_success() {
            return Err(error_from(resp, &url));
        }
        json_body(resp)
    }

    /// Metrics of every target in the current map, by target id.
    pub fn all_target_metrics(&self) -> Result<std::collections::BTreeMap<String, TargetMetrics>, ClientError> {
        let map = self.cluster_map()?;
        map.targets
            .iter()
            .map(|t| Ok((t.id.clone(), self.target_metrics(&t.endpoint)?)))
            .collect()
    }

    pub fn join_target(&self, target: &TargetInfo) -> Result<ClusterMap, ClientError> {
        self.gateway_send("POST", "/v1/cluster/targets", Some(target))
    }

    pub fn remove_target(&self, id: &str) -> Result<ClusterMap, ClientError> {
        self.gateway_send::<(), _>("DELETE", &format!("/v1/cluster/targets/{id}"), None)
    }

    pub fn rebalance(&self) -> Result<RebalanceReport, ClientError> {
        self.gateway_send::<(), _>("POST", "/v1/cluster/rebalance", None)
    }

    /// Posts a build task to the target at `endpoint`.
    pub(crate) fn build_on(&self, endpoint: &str, task: &BuildTask) -> Result<crate::shard::ShardStats, ClientError> {
        let url = format!("http://{endpoint}/v1/reshard/build");
        let resp = self.agent().post(&url).send_json(task).map_err(|e| ClientError::transport(endpoint, e))?;
        if !resp.status().is_success() {
            return Err(error_from(resp, &format!("build {}", task.name)));
        }
        json_body(resp)
    }
}

struct ArcBytes(Arc<[u8]>);

impl AsRef<[u8]> for ArcBytes {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}
