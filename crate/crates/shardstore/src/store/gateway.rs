//! Gateway: cluster map, bucket policies, listings and redirects.
//!
//! Object requests get a `307` to the primary target and the request body is
//! never polled, so payload never crosses the gateway. A counting layer on
//! the object routes measures any bytes that do, which is how the
//! `payload_bytes_proxied` metric stays honest.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::body::Body;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{any, delete, get, post, put};
use axum::{Json, Router};
use futures::StreamExt;
use serde::Deserialize;
use shardstore_core::placement::{hrw_targets, BucketPolicy, ClusterMap, ObjectRef, TargetInfo};

use super::api::*;
use super::target::{http_agent, ApiError};
use super::{encode_path, hex_decode, hex_encode};

const DEFAULT_PAGE: usize = 1000;

pub struct GatewayState {
    endpoint: String,
    map: RwLock<ClusterMap>,
    buckets: RwLock<BTreeMap<String, BucketPolicy>>,
    departed: RwLock<Vec<TargetInfo>>,
    admin: tokio::sync::Mutex<()>,
    proxied: AtomicU64,
    redirects: AtomicU64,
    object_requests: AtomicU64,
    agent: ureq::Agent,
}

fn unavailable(msg: impl Into<String>) -> ApiError {
    ApiError::new(StatusCode::SERVICE_UNAVAILABLE, msg)
}

fn remote_error(what: &str, resp: ureq::http::Response<ureq::Body>) -> ApiError {
    let status = resp.status();
    let msg = resp
        .into_body()
        .read_json::<ErrorBody>()
        .map(|b| b.error)
        .unwrap_or_default();
    ApiError::new(
        StatusCode::from_u16(status.as_u16()).unwrap_or(StatusCode::BAD_GATEWAY),
        format!("{what}: HTTP {status} {msg}"),
    )
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

impl GatewayState {
    pub fn new(endpoint: impl Into<String>, map: ClusterMap) -> Arc<Self> {
        Arc::new(GatewayState {
            endpoint: endpoint.into(),
            map: RwLock::new(map),
            buckets: RwLock::new(BTreeMap::new()),
            departed: RwLock::new(Vec::new()),
            admin: tokio::sync::Mutex::new(()),
            proxied: AtomicU64::new(0),
            redirects: AtomicU64::new(0),
            object_requests: AtomicU64::new(0),
            agent: http_agent(),
        })
    }

    fn map(&self) -> ClusterMap {
        self.map.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn install_map(&self, map: ClusterMap) -> bool {
        let mut cur = self.map.write().unwrap_or_else(|e| e.into_inner());
        if map.version > cur.version {
            *cur = map;
            true
        } else {
            false
        }
    }

    fn policy(&self, bucket: &str) -> Option<BucketPolicy> {
        self.buckets.read().unwrap_or_else(|e| e.into_inner()).get(bucket).copied()
    }

    fn metrics(&self) -> GatewayMetrics {
        GatewayMetrics {
            payload_bytes_proxied: self.proxied.load(Ordering::Relaxed),
            redirects: self.redirects.load(Ordering::Relaxed),
            object_requests: self.object_requests.load(Ordering::Relaxed),
        }
    }

    /// Adopts the newest map and every bucket known to reachable targets.
    /// Covers gateway restarts and buckets created through another gateway.
    pub fn sync_from_targets(&self) {
        for t in self.map().targets {
            let base = format!("http://{}", t.endpoint);
            if let Ok(mut resp) = self.agent.get(&format!("{base}/v1/cluster/map")).call() {
                if resp.status().is_success() {
                    if let Ok(m) = resp.body_mut().read_json::<ClusterMap>() {
                        self.install_map(m);
                    }
                }
            }
            if let Ok(mut resp) = self.agent.get(&format!("{base}/v1/buckets")).call() {
                if resp.status().is_success() {
                    if let Ok(b) = resp.body_mut().read_json::<BTreeMap<String, BucketPolicy>>() {
                        let mut buckets = self.buckets.write().unwrap_or_else(|e| e.into_inner());
                        for (k, v) in b {
                            buckets.entry(k).or_insert(v);
                        }
                    }
                }
            }
        }
    }

    /// Sends the current map to every target and every other gateway.
    fn push_map(&self, extra: &[TargetInfo]) -> Vec<String> {
        let map = self.map();
        let mut failed = Vec::new();
        let mut endpoints: BTreeSet<String> = map.targets.iter().chain(extra).map(|t| t.endpoint.clone()).collect();
        endpoints.extend(map.gateways.iter().filter(|g| **g != self.endpoint).cloned());
        for ep in endpoints {
            let r = self
                .agent
                .put(&format!("http://{ep}/v1/cluster/map"))
                .header(BROADCAST_HEADER, "1")
                .send_json(&map);
            match r {
                Ok(resp) if resp.status().is_success() => {}
                Ok(resp) => failed.push(format!("{ep}: HTTP {}", resp.status())),
                Err(e) => failed.push(format!("{ep}: {e}")),
            }
        }
        if !failed.is_empty() {
            tracing::warn!(?failed, version = map.version, "map push incomplete");
        }
        failed
    }

    fn create_bucket(&self, bucket: &str, policy: BucketPolicy, broadcast: bool) -> Result<BucketPolicy, ApiError> {
        let map = self.map();
        policy
            .validate(map.targets.len())
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
        match self.policy(bucket) {
            Some(p) if p == policy => return Ok(p),
            Some(p) => {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    format!("bucket {bucket:?} exists with mirror={}", p.mirror_count),
                ))
            }
            None => {}
        }
        for t in &map.targets {
            let url = format!("http://{}/v1/buckets/{}", t.endpoint, bucket);
            match self.agent.put(&url).send_json(policy) {
                Ok(resp) if resp.status().is_success() => {}
                Ok(resp) => return Err(remote_error(&format!("target {}", t.id), resp)),
                Err(e) => return Err(unavailable(format!("target {} unreachable: {e}", t.id))),
            }
        }
        if broadcast {
            for g in map.gateways.iter().filter(|g| **g != self.endpoint) {
                let url = format!("http://{g}/v1/buckets/{bucket}");
                if let Err(e) = self.agent.put(&url).header(BROADCAST_HEADER, "1").send_json(policy) {
                    tracing::warn!(gateway = %g, %e, "bucket broadcast failed");
                }
            }
        }
        self.buckets
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(bucket.to_string(), policy);
        Ok(policy)
    }

    fn list(&self, bucket: &str, q: &ListQuery) -> Result<ListPage, ApiError> {
        if self.policy(bucket).is_none() {
            self.sync_from_targets();
            if self.policy(bucket).is_none() {
                return Err(ApiError::new(StatusCode::NOT_FOUND, format!("no bucket {bucket:?}")));
            }
        }
        let start_after = match &q.token {
            Some(t) => Some(
                hex_decode(t)
                    .and_then(|b| String::from_utf8(b).ok())
                    .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "invalid continuation token"))?,
            ),
            None => None,
        };
        let limit = q.limit.unwrap_or(DEFAULT_PAGE).clamp(1, 100_000);
        let mut merged: BTreeMap<String, u64> = BTreeMap::new();
        for t in self.map().targets {
            let mut req = self
                .agent
                .get(&format!("http://{}/v1/buckets/{}/list", t.endpoint, bucket))
                .query("prefix", q.prefix.as_str())
                .query("limit", (limit + 1).to_string());
            if let Some(s) = &start_after {
                req = req.query("start_after", s);
            }
            let resp = req.call().map_err(|e| unavailable(format!("target {} unreachable: {e}", t.id)))?;
            if !resp.status().is_success() {
                return Err(remote_error(&format!("list on {}", t.id), resp));
            }
            let items: Vec<ListItem> = resp
                .into_body()
                .with_config()
                .limit(1 << 30)
                .read_json()
                .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, e.to_string()))?;
            for it in items {
                merged.insert(it.name, it.size);
            }
        }
        let more = merged.len() > limit;
        let items: Vec<ListItem> = merged
            .into_iter()
            .take(limit)
            .map(|(name, size)| ListItem { name, size })
            .collect();
        let next_token = if more { items.last().map(|i| hex_encode(i.name.as_bytes())) } else { None };
        Ok(ListPage { items, next_token })
    }

    fn local_listing(&self, t: &TargetInfo) -> Option<Vec<LocalObject>> {
        let resp = self.agent.get(&format!("http://{}/v1/local/objects", t.endpoint)).call().ok()?;
        if !resp.status().is_success() {
            return None;
        }
        resp.into_body().with_config().limit(1 << 30).read_json().ok()
    }

    /// Moves every object to the holders the current map assigns it and
    /// drops copies from targets that no longer should hold one.
    fn rebalance(&self) -> Result<RebalanceReport, ApiError> {
        let map = self.map();
        let departed = self.departed.read().unwrap_or_else(|e| e.into_inner()).clone();
        let mut holders: BTreeMap<(String, String), Vec<TargetInfo>> = BTreeMap::new();
        for t in map.targets.iter().chain(&departed) {
            let Some(listing) = self.local_listing(t) else {
                if map.target(&t.id).is_some() {
                    return Err(unavailable(format!("target {} unreachable", t.id)));
                }
                continue;
            };
            for o in listing {
                holders.entry((o.bucket, o.name)).or_default().push(t.clone());
            }
        }
        let mut report = RebalanceReport {
            moved: 0,
            deleted: 0,
            map_version: map.version,
        };
        for ((bucket, name), have) in holders {
            let Some(policy) = self.policy(&bucket) else { continue };
            let obj = ObjectRef { bucket, name };
            let want = hrw_targets(&map, &obj, policy.mirror_count.min(map.targets.len()))
                .map_err(|e| unavailable(e.to_string()))?;
            let source = &have[0];
            for w in &want {
                if have.iter().any(|h| h.id == w.id) {
                    continue;
                }
                let req = PullRequest {
                    bucket: obj.bucket.clone(),
                    name: obj.name.clone(),
                    from: source.endpoint.clone(),
                };
                let resp = self
                    .agent
                    .post(&format!("http://{}/v1/local/pull", w.endpoint))
                    .send_json(&req)
                    .map_err(|e| unavailable(format!("target {} unreachable: {e}", w.id)))?;
                if !resp.status().is_success() {
                    return Err(remote_error(&format!("pull onto {}", w.id), resp));
                }
                report.moved += 1;
            }
            for h in &have {
                if want.iter().any(|w| w.id == h.id) || map.target(&h.id).is_none() {
                    continue;
                }
                let url = format!("http://{}/v1/objects/{}/{}", h.endpoint, obj.bucket, encode_path(&obj.name));
                if let Ok(resp) = self.agent.delete(&url).header(REPLICA_HEADER, "1").call() {
                    if resp.status().is_success() {
                        report.deleted += 1;
                    }
                }
            }
        }
        Ok(report)
    }
}

type St = State<Arc<GatewayState>>;

/// Counts body bytes of object requests and responses at the gateway.
async fn count_payload(State(st): St, req: Request, next: Next) -> Response {
    let (parts, body) = req.into_parts();
    let counter = st.clone();
    let body = Body::from_stream(body.into_data_stream().inspect(move |c| {
        if let Ok(b) = c {
            counter.proxied.fetch_add(b.len() as u64, Ordering::Relaxed);
        }
    }));
    let resp = next.run(Request::from_parts(parts, body)).await;
    let (parts, body) = resp.into_parts();
    let counter = st.clone();
    let body = Body::from_stream(body.into_data_stream().inspect(move |c| {
        if let Ok(b) = c {
            counter.proxied.fetch_add(b.len() as u64, Ordering::Relaxed);
        }
    }));
    Response::from_parts(parts, body)
}

async fn redirect(
    State(st): St,
    Path((bucket, name)): Path<(String, String)>,
    uri: axum::http::Uri,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    st.object_requests.fetch_add(1, Ordering::Relaxed);
    let obj = ObjectRef::new(bucket, name).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    if st.policy(&obj.bucket).is_none() {
        let st2 = st.clone();
        blocking(move || {
            st2.sync_from_targets();
            Ok(())
        })
        .await?;
        if st.policy(&obj.bucket).is_none() {
            return Err(ApiError::new(StatusCode::NOT_FOUND, format!("no bucket {:?}", obj.bucket)));
        }
    }
    let map = st.map();
    let primary = hrw_targets(&map, &obj, 1).map_err(|e| unavailable(e.to_string()))?[0];
    let mut location = format!("http://{}/v1/objects/{}/{}", primary.endpoint, obj.bucket, encode_path(&obj.name));
    if let Some(q) = uri.query() {
        location.push('?');
        location.push_str(q);
    }
    st.redirects.fetch_add(1, Ordering::Relaxed);
    let mut resp = StatusCode::TEMPORARY_REDIRECT.into_response();
    let h = resp.headers_mut();
    h.insert(header::LOCATION, HeaderValue::from_str(&location).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?);
    h.insert(MAP_VERSION_HEADER, HeaderValue::from(map.version));
    h.insert(header::CONTENT_LENGTH, HeaderValue::from(0));
    let has_body = headers.contains_key(header::TRANSFER_ENCODING)
        || headers
            .get(header::CONTENT_LENGTH)
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v != "0");
    if has_body {
        // The body is never read, so the connection cannot be reused.
        h.insert(header::CONNECTION, HeaderValue::from_static("close"));
    }
    Ok(resp)
}

async fn put_bucket(
    State(st): St,
    Path(bucket): Path<String>,
    headers: HeaderMap,
    Json(policy): Json<BucketPolicy>,
) -> Result<Json<BucketPolicy>, ApiError> {
    let broadcast = !headers.contains_key(BROADCAST_HEADER);
    let st2 = st.clone();
    blocking(move || st2.create_bucket(&bucket, policy, broadcast)).await.map(Json)
}

async fn get_bucket(State(st): St, Path(bucket): Path<String>) -> Result<Json<BucketPolicy>, ApiError> {
    if let Some(p) = st.policy(&bucket) {
        return Ok(Json(p));
    }
    let st2 = st.clone();
    blocking(move || {
        st2.sync_from_targets();
        Ok(())
    })
    .await?;
    st.policy(&bucket)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no bucket {bucket:?}")))
}

async fn get_buckets(State(st): St) -> Json<BTreeMap<String, BucketPolicy>> {
    Json(st.buckets.read().unwrap_or_else(|e| e.into_inner()).clone())
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    #[serde(default)]
    prefix: String,
    token: Option<String>,
    limit: Option<usize>,
}

async fn list_bucket(State(st): St, Path(bucket): Path<String>, Query(q): Query<ListQuery>) -> Result<Json<ListPage>, ApiError> {
    let st2 = st.clone();
    blocking(move || st2.list(&bucket, &q)).await.map(Json)
}

async fn get_map(State(st): St) -> Json<ClusterMap> {
    Json(st.map())
}

async fn put_map(State(st): St, Json(map): Json<ClusterMap>) -> Result<Json<ClusterMap>, ApiError> {
    let cur = st.map().version;
    if map.version < cur {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("refusing map v{} older than v{cur}", map.version),
        ));
    }
    st.install_map(map);
    Ok(Json(st.map()))
}

async fn join_target(State(st): St, Json(target): Json<TargetInfo>) -> Result<Json<ClusterMap>, ApiError> {
    let _admin = st.admin.lock().await;
    let st2 = st.clone();
    blocking(move || {
        let next = st2.map().join(target.clone()).map_err(|e| ApiError::new(StatusCode::CONFLICT, e.to_string()))?;
        // The new target must know every bucket before it can accept writes.
        let buckets = st2.buckets.read().unwrap_or_else(|e| e.into_inner()).clone();
        for (b, p) in &buckets {
            let url = format!("http://{}/v1/buckets/{b}", target.endpoint);
            match st2.agent.put(&url).send_json(p) {
                Ok(resp) if resp.status().is_success() => {}
                Ok(resp) => return Err(remote_error("new target", resp)),
                Err(e) => return Err(unavailable(format!("new target unreachable: {e}"))),
            }
        }
        st2.install_map(next);
        st2.departed.write().unwrap_or_else(|e| e.into_inner()).retain(|d| d.id != target.id);
        st2.push_map(&[]);
        Ok(Json(st2.map()))
    })
    .await
}

async fn remove_target(State(st): St, Path(id): Path<String>) -> Result<Json<ClusterMap>, ApiError> {
    let _admin = st.admin.lock().await;
    let st2 = st.clone();
    blocking(move || {
        let cur = st2.map();
        let gone = cur.target(&id).cloned();
        let next = cur.remove(&id).map_err(|e| ApiError::new(StatusCode::CONFLICT, e.to_string()))?;
        st2.install_map(next);
        if let Some(g) = gone.clone() {
            st2.departed.write().unwrap_or_else(|e| e.into_inner()).push(g);
        }
        st2.push_map(gone.as_slice());
        Ok(Json(st2.map()))
    })
    .await
}

async fn rebalance(State(st): St) -> Result<Json<RebalanceReport>, ApiError> {
    let _admin = st.admin.lock().await;
    let st2 = st.clone();
    blocking(move || st2.rebalance()).await.map(Json)
}

async fn health(State(st): St) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        map_version: st.map().version,
        role: "gateway".into(),
        id: None,
    })
}

async fn metrics(State(st): St) -> Json<GatewayMetrics> {
    Json(st.metrics())
}

pub fn router(state: Arc<GatewayState>) -> Router {
    let objects = Router::new()
        .route("/v1/objects/{bucket}/{*name}", any(redirect))
        .layer(middleware::from_fn_with_state(state.clone(), count_payload));
    Router::new()
        .merge(objects)
        .route("/v1/buckets", get(get_buckets))
        .route("/v1/buckets/{bucket}", put(put_bucket).get(get_bucket))
        .route("/v1/buckets/{bucket}/list", get(list_bucket))
        .route("/v1/cluster/map", get(get_map).put(put_map))
        .route("/v1/cluster/targets", post(join_target))
        .route("/v1/cluster/targets/{id}", delete(remove_target))
        .route("/v1/cluster/rebalance", post(rebalance))
        .route("/v1/health", get(health))
        .route("/v1/metrics", get(metrics))
        .with_state(state)
}

/// Serves a gateway until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<GatewayState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> io::Result<()> {
    tracing::info!(endpoint = %state.endpoint, "gateway listening");
    let st = state.clone();
    tokio::task::spawn_blocking(move || st.sync_from_targets());
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
