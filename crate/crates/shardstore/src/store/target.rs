//! Storage target: owns mountpaths, stores and serves object bodies.
//!
//! On-disk layout per mountpath:
//!
//! ```text
//! {mountpath}/objects/{bucket}/{name}        object body
//! {mountpath}/meta/{bucket}/{name}.json      {"size", "checksum"} sidecar
//! {mountpath}/.tmp/                          in-flight writes
//! ```
//!
//! Writes land in `.tmp` and are renamed into place only after the body is
//! complete and every mirror has acknowledged, so an interrupted PUT never
//! becomes visible.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path as FsPath, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::body::Body;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use futures::StreamExt;
use serde::Deserialize;
use shardstore_core::hash;
use shardstore_core::placement::{hrw_mountpath, hrw_targets, BucketPolicy, ClusterMap, ObjectRef, TargetInfo};
use tokio::io::{AsyncReadExt, AsyncSeekExt, AsyncWriteExt};
use tokio_util::io::ReaderStream;

use super::api::*;
use super::config::TargetOptions;
use super::encode_path;
use super::ratelimit::RateLimiter;
use crate::shard::{ShardReader, ShardStats, ShardWriter};

const STREAM_CHUNK: usize = 256 * 1024;

/// Error response: status plus a JSON `{"error": ...}` body.
#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl ApiError {
    pub fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        ApiError(status, msg.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError::new(StatusCode::BAD_REQUEST, msg)
}

fn not_found(msg: impl Into<String>) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, msg)
}

fn disk_error(e: io::Error) -> ApiError {
    ApiError::new(StatusCode::INSUFFICIENT_STORAGE, format!("disk error: {e}"))
}

#[derive(Debug, Default)]
struct MountpathCounters {
    read: AtomicU64,
    written: AtomicU64,
}

pub struct TargetState {
    me: TargetInfo,
    map: RwLock<ClusterMap>,
    buckets: RwLock<BTreeMap<String, BucketPolicy>>,
    options: TargetOptions,
    limiter: Option<RateLimiter>,
    counters: BTreeMap<String, MountpathCounters>,
    get_requests: AtomicU64,
    range_requests: AtomicU64,
    put_requests: AtomicU64,
    bytes_verified: AtomicU64,
    checksum_failures: AtomicU64,
    tmp_seq: AtomicU64,
    agent: ureq::Agent,
    build_slots: tokio::sync::Semaphore,
}

pub(crate) fn http_agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .max_redirects(0)
        .http_status_as_error(false)
        .timeout_connect(Some(std::time::Duration::from_secs(5)))
        .build()
        .into()
}

fn read_meta(path: &FsPath) -> Option<ObjectMeta> {
    serde_json::from_slice(&fs::read(path).ok()?).ok()
}

fn write_atomic(path: &FsPath, tmp_dir: &FsPath, data: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut tmp = tempfile::NamedTempFile::new_in(tmp_dir)?;
    tmp.write_all(data)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Writer that hashes and counts what passes through it.
pub(crate) struct HashingWriter<W> {
    inner: W,
    hasher: hash::StreamingHash,
    written: u64,
}

impl<W: Write> HashingWriter<W> {
    pub(crate) fn new(inner: W) -> Self {
        HashingWriter {
            inner,
            hasher: hash::streaming(),
            written: 0,
        }
    }

    pub(crate) fn finish(self) -> (W, u64, u64) {
        (self.inner, self.written, self.hasher.digest())
    }
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        self.written += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

fn checksum_hex(sum: u64) -> String {
    format!("{sum:016x}")
}

/// `Range: bytes=...` against an object of `size` bytes, as `[start, end)`.
fn parse_range(value: &str, size: u64) -> Option<(u64, u64)> {
    let spec = value.trim().strip_prefix("bytes=")?;
    if spec.contains(',') {
        return None;
    }
    let (a, b) = spec.split_once('-')?;
    let (start, end) = if a.is_empty() {
        let n: u64 = b.parse().ok()?;
        (size.saturating_sub(n), size)
    } else {
        let start: u64 = a.parse().ok()?;
        let end = if b.is_empty() { size } else { b.parse::<u64>().ok()?.saturating_add(1).min(size) };
        (start, end)
    };
    (start < end && start < size).then_some((start, end))
}

impl TargetState {
    pub fn new(me: TargetInfo, map: ClusterMap, options: TargetOptions) -> io::Result<Arc<Self>> {
        let mut counters = BTreeMap::new();
        for mp in &me.mountpaths {
            for sub in ["objects", "meta", ".tmp"] {
                fs::create_dir_all(FsPath::new(mp).join(sub))?;
            }
            counters.insert(mp.clone(), MountpathCounters::default());
        }
        let buckets = fs::read(FsPath::new(&me.mountpaths[0]).join("buckets.json"))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default();
        let limiter = options.read_rate_limit.map(RateLimiter::new);
        let slots = options.max_build_tasks.max(1);
        Ok(Arc::new(TargetState {
            me,
            map: RwLock::new(map),
            buckets: RwLock::new(buckets),
            options,
            limiter,
            counters,
            get_requests: AtomicU64::new(0),
            range_requests: AtomicU64::new(0),
            put_requests: AtomicU64::new(0),
            bytes_verified: AtomicU64::new(0),
            checksum_failures: AtomicU64::new(0),
            tmp_seq: AtomicU64::new(0),
            agent: http_agent(),
            build_slots: tokio::sync::Semaphore::new(slots),
        }))
    }

    pub fn id(&self) -> &str {
        &self.me.id
    }

    fn map(&self) -> ClusterMap {
        self.map.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn map_version(&self) -> u64 {
        self.map.read().unwrap_or_else(|e| e.into_inner()).version
    }

    fn policy(&self, bucket: &str) -> Option<BucketPolicy> {
        self.buckets.read().unwrap_or_else(|e| e.into_inner()).get(bucket).copied()
    }

    fn check_version(&self, headers: &HeaderMap) -> Result<(), ApiError> {
        let Some(v) = headers.get(MAP_VERSION_HEADER) else {
            return Ok(());
        };
        let v: u64 = v
            .to_str()
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad_request("bad map version header"))?;
        let mine = self.map_version();
        if v < mine {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("stale cluster map: request routed with v{v}, target has v{mine}"),
            ));
        }
        Ok(())
    }

    fn object_path(mp: &str, obj: &ObjectRef) -> PathBuf {
        FsPath::new(mp).join("objects").join(&obj.bucket).join(&obj.name)
    }

    fn meta_path(mp: &str, obj: &ObjectRef) -> PathBuf {
        FsPath::new(mp).join("meta").join(&obj.bucket).join(format!("{}.json", obj.name))
    }

    fn tmp_path(&self, mp: &str) -> PathBuf {
        let seq = self.tmp_seq.fetch_add(1, Ordering::Relaxed);
        FsPath::new(mp).join(".tmp").join(format!("put-{}-{seq}", std::process::id()))
    }

    /// Mountpath holding `obj`, checking the placed one first.
    fn find(&self, obj: &ObjectRef) -> Option<(String, PathBuf)> {
        let placed = hrw_mountpath(&self.me, obj).to_string();
        std::iter::once(placed.clone())
            .chain(self.me.mountpaths.iter().filter(|m| **m != placed).cloned())
            .map(|mp| {
                let p = Self::object_path(&mp, obj);
                (mp, p)
            })
            .find(|(_, p)| p.is_file())
    }

    fn replica_set(&self, obj: &ObjectRef) -> Result<(BucketPolicy, Vec<TargetInfo>), ApiError> {
        let policy = self.policy(&obj.bucket).ok_or_else(|| not_found(format!("no bucket {:?}", obj.bucket)))?;
        let map = self.map();
        let set = hrw_targets(&map, obj, policy.mirror_count.min(map.targets.len()).max(1))
            .map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, e.to_string()))?
            .into_iter()
            .cloned()
            .collect();
        Ok((policy, set))
    }

    fn add_written(&self, mp: &str, n: u64) {
        if let Some(c) = self.counters.get(mp) {
            c.written.fetch_add(n, Ordering::Relaxed);
        }
    }

    /// Pushes a committed-to-be body to each mirror. On failure every
    /// mirror that already accepted it is told to drop it.
    fn replicate(&self, obj: &ObjectRef, body: &FsPath, size: u64, mirrors: &[TargetInfo]) -> Result<(), ApiError> {
        let version = self.map_version().to_string();
        let mut done: Vec<&TargetInfo> = Vec::new();
        for t in mirrors {
            let url = format!("http://{}/v1/objects/{}/{}", t.endpoint, obj.bucket, encode_path(&obj.name));
            let result = fs::File::open(body).map_err(|e| e.to_string()).and_then(|f| {
                self.agent
                    .put(&url)
                    .header(REPLICA_HEADER, "1")
                    .header(MAP_VERSION_HEADER, &version)
                    .header("content-length", size.to_string())
                    .send(ureq::SendBody::from_owned_reader(f))
                    .map_err(|e| e.to_string())
            });
            match result {
                Ok(resp) if resp.status().is_success() => done.push(t),
                Ok(resp) => {
                    self.rollback(obj, &done);
                    return Err(ApiError::new(
                        StatusCode::SERVICE_UNAVAILABLE,
                        format!("mirror {} refused copy: HTTP {}", t.id, resp.status()),
                    ));
                }
                Err(e) => {
                    self.rollback(obj, &done);
                    return Err(ApiError::new(
                        StatusCode::SERVICE_UNAVAILABLE,
                        format!("mirror {} unreachable: {e}", t.id),
                    ));
                }
            }
        }
        Ok(())
    }

    fn rollback(&self, obj: &ObjectRef, mirrors: &[&TargetInfo]) {
        for t in mirrors {
            let url = format!("http://{}/v1/objects/{}/{}", t.endpoint, obj.bucket, encode_path(&obj.name));
            if let Err(e) = self.agent.delete(&url).header(REPLICA_HEADER, "1").call() {
                tracing::warn!(target_id = %t.id, %e, "rollback of mirror copy failed");
            }
        }
    }

    /// Renames a complete temp file into place with its sidecar.
    fn commit(&self, obj: &ObjectRef, mp: &str, tmp: &FsPath, meta: &ObjectMeta) -> io::Result<()> {
        let tmp_dir = FsPath::new(mp).join(".tmp");
        write_atomic(&Self::meta_path(mp, obj), &tmp_dir, &serde_json::to_vec(meta)?)?;
        let dst = Self::object_path(mp, obj);
        if let Some(parent) = dst.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::rename(tmp, &dst)?;
        // A stale copy on another mountpath would shadow nothing but waste space.
        for other in self.me.mountpaths.iter().filter(|m| *m != mp) {
            let _ = fs::remove_file(Self::object_path(other, obj));
            let _ = fs::remove_file(Self::meta_path(other, obj));
        }
        self.add_written(mp, meta.size);
        Ok(())
    }

    fn remove_local(&self, obj: &ObjectRef) -> bool {
        let mut found = false;
        for mp in &self.me.mountpaths {
            if fs::remove_file(Self::object_path(mp, obj)).is_ok() {
                found = true;
            }
            let _ = fs::remove_file(Self::meta_path(mp, obj));
        }
        found
    }

    fn persist_buckets(&self) -> io::Result<()> {
        let mp0 = &self.me.mountpaths[0];
        let data = serde_json::to_vec_pretty(&*self.buckets.read().unwrap_or_else(|e| e.into_inner()))?;
        write_atomic(&FsPath::new(mp0).join("buckets.json"), &FsPath::new(mp0).join(".tmp"), &data)
    }

    fn list_local(&self, bucket: &str) -> io::Result<BTreeMap<String, u64>> {
        fn walk(dir: &FsPath, rel: &str, out: &mut BTreeMap<String, u64>) -> io::Result<()> {
            let entries = match fs::read_dir(dir) {
                Ok(e) => e,
                Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
                Err(e) => return Err(e),
            };
            for entry in entries {
                let entry = entry?;
                let name = entry.file_name().to_string_lossy().into_owned();
                let rel_name = if rel.is_empty() { name } else { format!("{rel}/{name}") };
                let ft = entry.file_type()?;
                if ft.is_dir() {
                    walk(&entry.path(), &rel_name, out)?;
                } else if ft.is_file() {
                    out.insert(rel_name, entry.metadata()?.len());
                }
            }
            Ok(())
        }
        let mut out = BTreeMap::new();
        for mp in &self.me.mountpaths {
            walk(&FsPath::new(mp).join("objects").join(bucket), "", &mut out)?;
        }
        Ok(out)
    }

    fn metrics(&self) -> TargetMetrics {
        TargetMetrics {
            id: self.me.id.clone(),
            mountpaths: self
                .counters
                .iter()
                .map(|(mp, c)| {
                    (
                        mp.clone(),
                        MountpathMetrics {
                            bytes_read: c.read.load(Ordering::Relaxed),
                            bytes_written: c.written.load(Ordering::Relaxed),
                        },
                    )
                })
                .collect(),
            get_requests: self.get_requests.load(Ordering::Relaxed),
            range_requests: self.range_requests.load(Ordering::Relaxed),
            put_requests: self.put_requests.load(Ordering::Relaxed),
            bytes_verified: self.bytes_verified.load(Ordering::Relaxed),
            checksum_failures: self.checksum_failures.load(Ordering::Relaxed),
        }
    }

    /// Copies `obj` from another target and stores it locally (no mirroring).
    fn pull(&self, req: &PullRequest) -> Result<ObjectMeta, ApiError> {
        let obj = ObjectRef::new(&req.bucket, &req.name).map_err(|e| bad_request(e.to_string()))?;
        let url = format!("http://{}/v1/objects/{}/{}", req.from, obj.bucket, encode_path(&obj.name));
        let resp = self
            .agent
            .get(&url)
            .header(REPLICA_HEADER, "1")
            .call()
            .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, format!("pull from {}: {e}", req.from)))?;
        if !resp.status().is_success() {
            return Err(ApiError::new(
                StatusCode::BAD_GATEWAY,
                format!("pull from {}: HTTP {}", req.from, resp.status()),
            ));
        }
        let mp = hrw_mountpath(&self.me, &obj).to_string();
        let tmp = self.tmp_path(&mp);
        let result = (|| -> io::Result<ObjectMeta> {
            let mut w = HashingWriter::new(BufWriter::new(fs::File::create(&tmp)?));
            io::copy(&mut resp.into_body().into_reader(), &mut w)?;
            let (mut f, size, sum) = w.finish();
            f.flush()?;
            Ok(ObjectMeta {
                size,
                checksum: checksum_hex(sum),
            })
        })();
        let meta = match result {
            Ok(m) => m,
            Err(e) => {
                let _ = fs::remove_file(&tmp);
                return Err(ApiError::new(StatusCode::BAD_GATEWAY, format!("pull body: {e}")));
            }
        };
        self.commit(&obj, &mp, &tmp, &meta).map_err(|e| {
            let _ = fs::remove_file(&tmp);
            disk_error(e)
        })?;
        Ok(meta)
    }

    /// Assembles one reshard output shard from source byte ranges and
    /// stores it with mirroring.
    fn build(&self, task: &BuildTask) -> Result<ShardStats, ApiError> {
        let obj = ObjectRef::new(&task.bucket, &task.name).map_err(|e| bad_request(e.to_string()))?;
        let (_, set) = self.replica_set(&obj)?;
        if set[0].id != self.me.id {
            return Err(ApiError::new(StatusCode::CONFLICT, "not the primary target for this shard"));
        }
        let client = super::Client::new(&task.gateway);
        let mp = hrw_mountpath(&self.me, &obj).to_string();
        let tmp = self.tmp_path(&mp);
        let built = (|| -> Result<(ShardStats, u64, u64), ApiError> {
            let file = fs::File::create(&tmp).map_err(disk_error)?;
            let mut writer = ShardWriter::new(HashingWriter::new(BufWriter::new(file))).named(task.name.clone());
            for piece in &task.pieces {
                let src = ObjectRef::new(&piece.source_bucket, &piece.source_shard).map_err(|e| bad_request(e.to_string()))?;
                let body = client.get_range_reader(&src, piece.start, piece.end).map_err(|e| {
                    ApiError::new(StatusCode::BAD_GATEWAY, format!("fetch {}/{}: {e}", src.bucket, src.name))
                })?;
                let mut records = ShardReader::fragment(body);
                for (src_key, out_key) in &piece.records {
                    let rec = records
                        .next()
                        .ok_or_else(|| ApiError::new(StatusCode::BAD_GATEWAY, format!("record {src_key:?} missing from range")))?
                        .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, e.to_string()))?;
                    if rec.key() != src_key {
                        return Err(ApiError::new(
                            StatusCode::BAD_GATEWAY,
                            format!("expected record {src_key:?}, found {:?}", rec.key()),
                        ));
                    }
                    let rec = if src_key == out_key {
                        rec
                    } else {
                        rec.rekeyed(out_key.clone()).map_err(|e| bad_request(e.to_string()))?
                    };
                    writer
                        .write_record(&rec)
                        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
                }
            }
            let (stats, hashing) = writer
                .finish()
                .map_err(|e| ApiError::new(StatusCode::INSUFFICIENT_STORAGE, e.to_string()))?;
            let (mut f, size, sum) = hashing.finish();
            f.flush().map_err(disk_error)?;
            Ok((stats, size, sum))
        })();
        let (stats, size, sum) = match built {
            Ok(b) => b,
            Err(e) => {
                let _ = fs::remove_file(&tmp);
                return Err(e);
            }
        };
        let meta = ObjectMeta {
            size,
            checksum: checksum_hex(sum),
        };
        if let Err(e) = self.replicate(&obj, &tmp, size, &set[1..]) {
            let _ = fs::remove_file(&tmp);
            return Err(e);
        }
        self.commit(&obj, &mp, &tmp, &meta).map_err(|e| {
            let _ = fs::remove_file(&tmp);
            disk_error(e)
        })?;
        self.put_requests.fetch_add(1, Ordering::Relaxed);
        Ok(stats)
    }
}

type St = State<Arc<TargetState>>;

fn with_version(state: &TargetState, mut resp: Response) -> Response {
    if let Ok(v) = HeaderValue::from_str(&state.map_version().to_string()) {
        resp.headers_mut().insert(MAP_VERSION_HEADER, v);
    }
    resp
}

fn obj_ref(bucket: String, name: String) -> Result<ObjectRef, ApiError> {
    ObjectRef::new(bucket, name).map_err(|e| bad_request(e.to_string()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn get_object(State(st): St, Path((bucket, name)): Path<(String, String)>, headers: HeaderMap) -> Result<Response, ApiError> {
    st.check_version(&headers)?;
    let obj = obj_ref(bucket, name)?;
    st.get_requests.fetch_add(1, Ordering::Relaxed);
    let (mp, path) = st.find(&obj).ok_or_else(|| not_found(format!("no object {}/{}", obj.bucket, obj.name)))?;
    let size = tokio::fs::metadata(&path).await.map_err(disk_error)?.len();
    let meta = read_meta(&TargetState::meta_path(&mp, &obj));
    let range = match headers.get(header::RANGE).and_then(|v| v.to_str().ok()) {
        Some(r) => Some(parse_range(r, size).ok_or_else(|| ApiError::new(StatusCode::RANGE_NOT_SATISFIABLE, format!("bad range {r:?}")))?),
        None => None,
    };
    if range.is_some() {
        st.range_requests.fetch_add(1, Ordering::Relaxed);
    } else if st.options.verify_checksums {
        if let Some(meta) = &meta {
            let p = path.clone();
            let sum = blocking(move || {
                let mut f = fs::File::open(&p).map_err(disk_error)?;
                let mut h = hash::streaming();
                let mut buf = vec![0u8; STREAM_CHUNK];
                loop {
                    let n = f.read(&mut buf).map_err(disk_error)?;
                    if n == 0 {
                        break;
                    }
                    h.update(&buf[..n]);
                }
                Ok(h.digest())
            })
            .await?;
            st.bytes_verified.fetch_add(size, Ordering::Relaxed);
            if checksum_hex(sum) != meta.checksum {
                st.checksum_failures.fetch_add(1, Ordering::Relaxed);
                return Err(ApiError::new(
                    StatusCode::BAD_GATEWAY,
                    format!("corrupt object {}/{}: checksum mismatch", obj.bucket, obj.name),
                ));
            }
        }
    }
    let (start, end) = range.unwrap_or((0, size));
    let mut file = tokio::fs::File::open(&path).await.map_err(disk_error)?;
    if start > 0 {
        file.seek(io::SeekFrom::Start(start)).await.map_err(disk_error)?;
    }
    let stream = ReaderStream::with_capacity(file.take(end - start), STREAM_CHUNK);
    let pacer = st.clone();
    let stream = stream.then(move |chunk| {
        let st = pacer.clone();
        let mp = mp.clone();
        async move {
            if let Ok(bytes) = &chunk {
                if let Some(l) = &st.limiter {
                    l.acquire(bytes.len()).await;
                }
                if let Some(c) = st.counters.get(&mp) {
                    c.read.fetch_add(bytes.len() as u64, Ordering::Relaxed);
                }
            }
            chunk
        }
    });
    let mut resp = Response::new(Body::from_stream(stream));
    let h = resp.headers_mut();
    h.insert(header::CONTENT_LENGTH, HeaderValue::from(end - start));
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/octet-stream"));
    h.insert(header::ACCEPT_RANGES, HeaderValue::from_static("bytes"));
    if let Some(meta) = &meta {
        if let Ok(v) = HeaderValue::from_str(&meta.checksum) {
            h.insert(CHECKSUM_HEADER, v);
        }
    }
    if range.is_some() {
        *resp.status_mut() = StatusCode::PARTIAL_CONTENT;
        let cr = format!("bytes {}-{}/{}", start, end - 1, size);
        resp.headers_mut().insert(header::CONTENT_RANGE, HeaderValue::from_str(&cr).expect("ascii"));
    }
    Ok(with_version(&st, resp))
}

async fn put_object(
    State(st): St,
    Path((bucket, name)): Path<(String, String)>,
    headers: HeaderMap,
    body: Body,
) -> Result<Response, ApiError> {
    st.check_version(&headers)?;
    let obj = obj_ref(bucket, name)?;
    let replica = headers.contains_key(REPLICA_HEADER);
    let (_, set) = st.replica_set(&obj)?;
    let is_primary = set[0].id == st.me.id;
    if (!replica && !is_primary) || !set.iter().any(|t| t.id == st.me.id) {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("target {} does not own {}/{} under map v{}", st.me.id, obj.bucket, obj.name, st.map_version()),
        ));
    }
    let expected_len: Option<u64> = headers
        .get(header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse().ok());

    let mp = hrw_mountpath(&st.me, &obj).to_string();
    let tmp = st.tmp_path(&mp);
    let mut file = tokio::fs::File::create(&tmp).await.map_err(disk_error)?;
    let mut hasher = hash::streaming();
    let mut size = 0u64;
    let mut stream = body.into_data_stream();
    while let Some(chunk) = stream.next().await {
        let chunk = match chunk {
            Ok(c) => c,
            Err(e) => {
                drop(file);
                let _ = tokio::fs::remove_file(&tmp).await;
                return Err(bad_request(format!("request body aborted: {e}")));
            }
        };
        if let Err(e) = file.write_all(&chunk).await {
            drop(file);
            let _ = tokio::fs::remove_file(&tmp).await;
            return Err(disk_error(e));
        }
        hasher.update(&chunk);
        size += chunk.len() as u64;
    }
    if let Err(e) = file.flush().await {
        let _ = tokio::fs::remove_file(&tmp).await;
        return Err(disk_error(e));
    }
    drop(file);
    if expected_len.is_some_and(|n| n != size) {
        let _ = tokio::fs::remove_file(&tmp).await;
        return Err(bad_request("request body shorter than content-length"));
    }
    let meta = ObjectMeta {
        size,
        checksum: checksum_hex(hasher.digest()),
    };
    let st2 = st.clone();
    let meta2 = meta.clone();
    blocking(move || {
        let mirrors = if replica { &[][..] } else { &set[1..] };
        if let Err(e) = st2.replicate(&obj, &tmp, size, mirrors) {
            let _ = fs::remove_file(&tmp);
            return Err(e);
        }
        st2.commit(&obj, &mp, &tmp, &meta2).map_err(|e| {
            let _ = fs::remove_file(&tmp);
            disk_error(e)
        })
    })
    .await?;
    st.put_requests.fetch_add(1, Ordering::Relaxed);
    Ok(with_version(&st, Json(meta).into_response()))
}

async fn delete_object(State(st): St, Path((bucket, name)): Path<(String, String)>, headers: HeaderMap) -> Result<Response, ApiError> {
    st.check_version(&headers)?;
    let obj = obj_ref(bucket, name)?;
    let replica = headers.contains_key(REPLICA_HEADER);
    let st2 = st.clone();
    let found = blocking(move || {
        let found = st2.remove_local(&obj);
        if !replica {
            if let Ok((_, set)) = st2.replica_set(&obj) {
                let others: Vec<&TargetInfo> = set.iter().filter(|t| t.id != st2.me.id).collect();
                st2.rollback(&obj, &others);
            }
        }
        Ok(found)
    })
    .await?;
    if found {
        Ok(with_version(&st, StatusCode::NO_CONTENT.into_response()))
    } else {
        Err(not_found("no such object"))
    }
}

async fn put_bucket(State(st): St, Path(bucket): Path<String>, Json(policy): Json<BucketPolicy>) -> Result<Response, ApiError> {
    if policy.mirror_count == 0 {
        return Err(bad_request("mirror must be at least 1"));
    }
    {
        let mut buckets = st.buckets.write().unwrap_or_else(|e| e.into_inner());
        match buckets.get(&bucket) {
            Some(p) if *p == policy => return Ok(Json(policy).into_response()),
            Some(p) => {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    format!("bucket {bucket:?} exists with mirror={}", p.mirror_count),
                ))
            }
            None => {
                buckets.insert(bucket, policy);
            }
        }
    }
    st.persist_buckets().map_err(disk_error)?;
    Ok(Json(policy).into_response())
}

async fn get_bucket(State(st): St, Path(bucket): Path<String>) -> Result<Json<BucketPolicy>, ApiError> {
    st.policy(&bucket).map(Json).ok_or_else(|| not_found(format!("no bucket {bucket:?}")))
}

async fn get_buckets(State(st): St) -> Json<BTreeMap<String, BucketPolicy>> {
    Json(st.buckets.read().unwrap_or_else(|e| e.into_inner()).clone())
}

#[derive(Debug, Deserialize)]
pub(crate) struct LocalListQuery {
    #[serde(default)]
    pub prefix: String,
    #[serde(default)]
    pub start_after: Option<String>,
    #[serde(default)]
    pub limit: Option<usize>,
}

async fn list_bucket(State(st): St, Path(bucket): Path<String>, Query(q): Query<LocalListQuery>) -> Result<Json<Vec<ListItem>>, ApiError> {
    if st.policy(&bucket).is_none() {
        return Err(not_found(format!("no bucket {bucket:?}")));
    }
    let st2 = st.clone();
    let all = blocking(move || st2.list_local(&bucket).map_err(disk_error)).await?;
    let items = all
        .into_iter()
        .filter(|(n, _)| n.starts_with(&q.prefix))
        .filter(|(n, _)| q.start_after.as_ref().is_none_or(|s| n > s))
        .take(q.limit.unwrap_or(usize::MAX))
        .map(|(name, size)| ListItem { name, size })
        .collect();
    Ok(Json(items))
}

async fn local_objects(State(st): St) -> Result<Json<Vec<LocalObject>>, ApiError> {
    let st2 = st.clone();
    blocking(move || {
        let buckets: Vec<String> = st2.buckets.read().unwrap_or_else(|e| e.into_inner()).keys().cloned().collect();
        let mut out = Vec::new();
        for b in buckets {
            for (name, size) in st2.list_local(&b).map_err(disk_error)? {
                out.push(LocalObject {
                    bucket: b.clone(),
                    name,
                    size,
                });
            }
        }
        Ok(Json(out))
    })
    .await
}

async fn get_map(State(st): St) -> Json<ClusterMap> {
    Json(st.map())
}

async fn put_map(State(st): St, Json(map): Json<ClusterMap>) -> Result<Json<ClusterMap>, ApiError> {
    let mut cur = st.map.write().unwrap_or_else(|e| e.into_inner());
    if map.version < cur.version {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("refusing map v{} older than v{}", map.version, cur.version),
        ));
    }
    if map.version > cur.version {
        *cur = map;
    }
    Ok(Json(cur.clone()))
}

async fn health(State(st): St) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        map_version: st.map_version(),
        role: "target".into(),
        id: Some(st.me.id.clone()),
    })
}

async fn metrics(State(st): St) -> Json<TargetMetrics> {
    Json(st.metrics())
}

async fn pull(State(st): St, Json(req): Json<PullRequest>) -> Result<Json<ObjectMeta>, ApiError> {
    let st2 = st.clone();
    blocking(move || st2.pull(&req)).await.map(Json)
}

async fn build(State(st): St, Json(task): Json<BuildTask>) -> Result<Json<ShardStats>, ApiError> {
    let _slot = st
        .build_slots
        .acquire()
        .await
        .map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, e.to_string()))?;
    let st2 = st.clone();
    blocking(move || st2.build(&task)).await.map(Json)
}

pub fn router(state: Arc<TargetState>) -> Router {
    Router::new()
        .route("/v1/objects/{bucket}/{*name}", get(get_object).put(put_object).delete(delete_object))
        .route("/v1/buckets", get(get_buckets))
        .route("/v1/buckets/{bucket}", put(put_bucket).get(get_bucket))
        .route("/v1/buckets/{bucket}/list", get(list_bucket))
        .route("/v1/cluster/map", get(get_map).put(put_map))
        .route("/v1/health", get(health))
        .route("/v1/metrics", get(metrics))
        .route("/v1/local/objects", get(local_objects))
        .route("/v1/local/pull", post(pull))
        .route("/v1/reshard/build", post(build))
        .with_state(state)
}

/// Serves a target until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<TargetState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> io::Result<()> {
    tracing::info!(id = %state.me.id, addr = ?listener.local_addr().ok(), "target listening");
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
