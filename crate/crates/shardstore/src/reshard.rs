//! Resharding: index source shards, plan centrally, build in parallel on
//! the targets that will own each output shard.
//!
//! The index holds metadata only (key, byte range, payload size), so the
//! plan is cheap to compute in one place. Every output shard becomes one
//! [`BuildTask`] sent to its primary target, which fetches the needed byte
//! ranges, assembles the tar and stores it with mirroring.
//!
//! Progress is kept in a job manifest `.reshard/{job}.json` in the
//! destination bucket; rerunning the same job skips completed shards.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use shardstore_core::placement::{hrw_targets, ObjectRef};
use shardstore_core::plan::{plan_reshard, resolve_duplicate_keys, PlanError, PlannedShard, RecordIndexEntry, ReshardSpec};
use shardstore_core::{hash, Grouping, RecordGrouper};

use crate::shard::{list_shard, ShardError, ShardStats};
use crate::store::api::{BuildPiece, BuildTask};
use crate::store::{Client, ClientError};

/// Object name prefix reserved for job manifests.
pub const MANIFEST_PREFIX: &str = ".reshard/";

#[derive(Debug, thiserror::Error)]
pub enum ReshardError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("{shard}: {source}")]
    Shard { shard: String, source: ShardError },
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("destination bucket {0:?} does not exist")]
    NoDestination(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{} output shard(s) failed; first: {}: {}", failed.len(), failed[0].0, failed[0].1)]
    Build { failed: Vec<(String, String)> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: ReshardSpec,
    pub planned: usize,
    pub completed: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ReshardOptions {
    /// Concurrent build tasks sent to any one target.
    pub max_in_flight_per_target: usize,
    /// Parallel streams used while indexing sources.
    pub index_parallelism: usize,
}

impl Default for ReshardOptions {
    fn default() -> Self {
        ReshardOptions {
            max_in_flight_per_target: 2,
            index_parallelism: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReshardReport {
    pub job: String,
    pub source_records: usize,
    pub planned: usize,
    /// Shards built by this run, in plan order.
    pub built: Vec<ShardStats>,
    /// Shards found complete in the manifest and skipped.
    pub skipped: usize,
    pub elapsed_secs: f64,
}

/// Shard objects under `prefix`, excluding reshard manifests.
pub fn list_shards(client: &Client, bucket: &str, prefix: &str) -> Result<Vec<String>, ClientError> {
    Ok(client
        .list_all(bucket, prefix)?
        .into_iter()
        .map(|i| i.name)
        .filter(|n| !n.starts_with(MANIFEST_PREFIX))
        .collect())
}

/// Index entries of one shard read from `src`, in archive order.
pub fn index_shard(shard_name: &str, src: impl std::io::Read, mode: Grouping) -> Result<Vec<RecordIndexEntry>, ShardError> {
    let mut out: Vec<RecordIndexEntry> = Vec::new();
    let mut grouper = RecordGrouper::new(mode);
    let mut open: Option<RecordIndexEntry> = None;
    for meta in list_shard(src) {
        let meta = meta?;
        // Payloads are not needed; the grouper only checks naming rules.
        if grouper.push(&meta.path, Vec::new())?.is_some() {
            out.extend(open.take());
        }
        let (_, ext) = shardstore_core::split_entry_name(&meta.path)?;
        match open.as_mut() {
            Some(e) => {
                e.payload_bytes += meta.size;
                e.extensions.push(ext.to_string());
                e.end = meta.end;
            }
            None => {
                let key = grouper.current_key().expect("entry just pushed").to_string();
                open = Some(RecordIndexEntry {
                    key: key.clone(),
                    source_key: key,
                    shard_name: shard_name.to_string(),
                    payload_bytes: meta.size,
                    extensions: vec![ext.to_string()],
                    start: meta.offset,
                    end: meta.end,
                });
            }
        }
    }
    out.extend(open);
    Ok(out)
}

/// Index of every record under `bucket/prefix`, ordered by shard name and
/// then position. Keys are not yet deduplicated.
pub fn build_record_index(
    client: &Client,
    bucket: &str,
    prefix: &str,
    mode: Grouping,
    parallelism: usize,
) -> Result<Vec<RecordIndexEntry>, ReshardError> {
    let shards = list_shards(client, bucket, prefix)?;
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<Option<Result<Vec<RecordIndexEntry>, ReshardError>>>> =
        Mutex::new((0..shards.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..parallelism.clamp(1, shards.len().max(1)) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().unwrap();
                    if *n >= shards.len() {
                        return;
                    }
                    *n += 1;
                    *n - 1
                };
                let name = &shards[i];
                let r = (|| {
                    let obj = ObjectRef::new(bucket, name.as_str()).map_err(|e| ReshardError::Invalid(e.to_string()))?;
                    let body = client.get_reader(&obj)?;
                    index_shard(name, body, mode).map_err(|source| ReshardError::Shard {
                        shard: name.clone(),
                        source,
                    })
                })();
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    let mut index = Vec::new();
    for r in results.into_inner().unwrap() {
        index.extend(r.expect("every shard indexed")?);
    }
    Ok(index)
}

/// Build task for one planned shard. Consecutive records that are
/// contiguous in the same source shard share one ranged read.
pub fn build_task(
    planned: &PlannedShard,
    by_key: &HashMap<&str, &RecordIndexEntry>,
    spec: &ReshardSpec,
    gateway: &str,
) -> BuildTask {
    let mut pieces: Vec<BuildPiece> = Vec::new();
    for key in &planned.keys {
        let e = by_key[key.as_str()];
        match pieces.last_mut() {
            Some(p) if p.source_shard == e.shard_name && p.end == e.start => {
                p.end = e.end;
                p.records.push((e.source_key.clone(), e.key.clone()));
            }
            _ => pieces.push(BuildPiece {
                source_bucket: spec.source_bucket.clone(),
                source_shard: e.shard_name.clone(),
                start: e.start,
                end: e.end,
                records: vec![(e.source_key.clone(), e.key.clone())],
            }),
        }
    }
    BuildTask {
        bucket: spec.dest_bucket.clone(),
        name: planned.name.clone(),
        pieces,
        gateway: gateway.to_string(),
    }
}

/// Job id derived from the spec and the index, so the same job against
/// changed sources gets a fresh manifest.
pub fn job_id(spec: &ReshardSpec, index: &[RecordIndexEntry]) -> String {
    let mut h = hash::streaming();
    h.update(&serde_json::to_vec(spec).expect("spec serializes"));
    for e in index {
        h.update(e.shard_name.as_bytes());
        h.update(e.key.as_bytes());
        h.update(&e.start.to_le_bytes());
        h.update(&e.end.to_le_bytes());
    }
    format!("{:016x}", h.digest())
}

fn manifest_ref(spec: &ReshardSpec, job: &str) -> ObjectRef {
    ObjectRef {
        bucket: spec.dest_bucket.clone(),
        name: format!("{MANIFEST_PREFIX}{job}.json"),
    }
}

fn load_manifest(client: &Client, obj: &ObjectRef) -> Result<Option<Manifest>, ClientError> {
    match client.get(obj) {
        Ok(bytes) => Ok(serde_json::from_slice(&bytes).ok()),
        Err(ClientError::NotFound(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn save_manifest(client: &Client, obj: &ObjectRef, m: &Manifest) -> Result<(), ClientError> {
    client.put(obj, serde_json::to_vec_pretty(m).expect("manifest serializes"))?;
    Ok(())
}

/// Plans `spec` against the current source contents without building.
pub fn plan(client: &Client, spec: &ReshardSpec, opts: &ReshardOptions) -> Result<(Vec<RecordIndexEntry>, Vec<PlannedShard>), ReshardError> {
    spec.validate()?;
    let mut index = build_record_index(client, &spec.source_bucket, &spec.source_prefix, spec.grouping, opts.index_parallelism)?;
    resolve_duplicate_keys(&mut index, spec.grouping)?;
    let planned = plan_reshard(&index, spec)?;
    Ok((index, planned))
}

pub fn run_reshard(client: &Client, spec: &ReshardSpec, opts: &ReshardOptions) -> Result<ReshardReport, ReshardError> {
    let t0 = Instant::now();
    spec.validate()?;
    match client.bucket_policy(&spec.dest_bucket) {
        Ok(_) => {}
        Err(ClientError::NotFound(_)) => return Err(ReshardError::NoDestination(spec.dest_bucket.clone())),
        Err(e) => return Err(e.into()),
    }
    if spec.source_bucket == spec.dest_bucket {
        return Err(ReshardError::Invalid("source and destination bucket must differ".into()));
    }
    let (index, planned) = plan(client, spec, opts)?;
    let job = job_id(spec, &index);
    let manifest_obj = manifest_ref(spec, &job);
    let mut manifest = match load_manifest(client, &manifest_obj)? {
        Some(m) if m.spec == *spec && m.planned == planned.len() => m,
        _ => Manifest {
            spec: spec.clone(),
            planned: planned.len(),
            completed: Vec::new(),
        },
    };
    save_manifest(client, &manifest_obj, &manifest)?;
    let done: BTreeSet<String> = manifest.completed.iter().cloned().collect();
    let skipped = planned.iter().filter(|p| done.contains(&p.name)).count();

    let by_key: HashMap<&str, &RecordIndexEntry> = index.iter().map(|e| (e.key.as_str(), e)).collect();
    let map = client.cluster_map()?;
    let mut queues: HashMap<String, VecDeque<(usize, BuildTask)>> = HashMap::new();
    for (i, p) in planned.iter().enumerate() {
        if done.contains(&p.name) {
            continue;
        }
        let obj = ObjectRef::new(&spec.dest_bucket, &p.name).map_err(|e| ReshardError::Invalid(e.to_string()))?;
        let primary = hrw_targets(&map, &obj, 1).map_err(|e| ReshardError::Invalid(e.to_string()))?[0];
        queues
            .entry(primary.endpoint.clone())
            .or_default()
            .push_back((i, build_task(p, &by_key, spec, client.gateway())));
    }

    let results: Mutex<Vec<(usize, Result<ShardStats, String>)>> = Mutex::new(Vec::new());
    let progress = Mutex::new((std::mem::take(&mut manifest.completed), Instant::now()));
    let abort = AtomicBool::new(false);
    let shared_queues: HashMap<String, Mutex<VecDeque<(usize, BuildTask)>>> =
        queues.into_iter().map(|(k, v)| (k, Mutex::new(v))).collect();
    std::thread::scope(|s| {
        for (endpoint, queue) in &shared_queues {
            for _ in 0..opts.max_in_flight_per_target.max(1) {
                s.spawn(|| loop {
                    if abort.load(Ordering::Relaxed) {
                        return;
                    }
                    let Some((i, task)) = queue.lock().unwrap().pop_front() else { return };
                    let r = client.build_on(endpoint, &task).map_err(|e| e.to_string());
                    match &r {
                        Ok(_) => {
                            let mut p = progress.lock().unwrap();
                            p.0.push(task.name.clone());
                            if p.1.elapsed() > Duration::from_secs(1) {
                                p.1 = Instant::now();
                                let snapshot = Manifest {
                                    spec: spec.clone(),
                                    planned: planned.len(),
                                    completed: p.0.clone(),
                                };
                                if let Err(e) = save_manifest(client, &manifest_obj, &snapshot) {
                                    tracing::warn!(%e, "manifest update failed");
                                }
                            }
                        }
                        Err(e) => {
                            tracing::error!(shard = %task.name, %e, "build failed");
                            abort.store(true, Ordering::Relaxed);
                        }
                    }
                    results.lock().unwrap().push((i, r));
                });
            }
        }
    });

    manifest.completed = progress.into_inner().unwrap().0;
    manifest.completed.sort();
    save_manifest(client, &manifest_obj, &manifest)?;

    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(i, _)| *i);
    let mut built = Vec::new();
    let mut failed = Vec::new();
    for (i, r) in results {
        match r {
            Ok(stats) => built.push(stats),
            Err(e) => failed.push((planned[i].name.clone(), e)),
        }
    }
    if !failed.is_empty() {
        return Err(ReshardError::Build { failed });
    }
    if manifest.completed.len() != planned.len() {
        return Err(ReshardError::Invalid(format!(
            "{} of {} shards completed",
            manifest.completed.len(),
            planned.len()
        )));
    }
    Ok(ReshardReport {
        job,
        source_records: index.len(),
        planned: planned.len(),
        built,
        skipped,
        elapsed_secs: t0.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shard::write_shard;
    use shardstore_core::Record;

    #[test]
    fn index_ranges_cover_records() {
        let recs = vec![
            Record::new("A").unwrap().with("jpg", vec![1u8; 700]).unwrap().with("cls", b"3".to_vec()).unwrap(),
            Record::new("B").unwrap().with("jpg", vec![2u8; 10]).unwrap(),
            Record::new(format!("long/{}", "x".repeat(120))).unwrap().with("txt", b"hi".to_vec()).unwrap(),
        ];
        let mut buf = Vec::new();
        write_shard(&recs, &mut buf).unwrap();
        let idx = index_shard("s0.tar", &buf[..], Grouping::Strict).unwrap();
        assert_eq!(idx.len(), 3);
        assert_eq!(idx[0].payload_bytes, 701);
        assert_eq!(idx[0].extensions, ["jpg", "cls"]);
        assert_eq!(idx[0].start, 0);
        assert_eq!(idx[0].end, idx[1].start);
        assert_eq!(idx[1].end, idx[2].start);
        // Each range alone reads back as exactly its record.
        for (e, r) in idx.iter().zip(&recs) {
            let frag = &buf[e.start as usize..e.end as usize];
            let got: Vec<Record> = crate::shard::ShardReader::fragment(frag).collect::<Result<_, _>>().unwrap();
            assert_eq!(got, [r.clone()]);
        }
    }

    #[test]
    fn tasks_coalesce_contiguous_ranges() {
        let mk = |k: &str, shard: &str, start, end| RecordIndexEntry {
            key: k.into(),
            source_key: k.into(),
            shard_name: shard.into(),
            payload_bytes: 1,
            extensions: vec!["x".into()],
            start,
            end,
        };
        let idx = vec![mk("a", "s0", 0, 1024), mk("b", "s0", 1024, 2048), mk("c", "s1", 0, 512), mk("d", "s0", 3072, 4096)];
        let by_key: HashMap<&str, &RecordIndexEntry> = idx.iter().map(|e| (e.key.as_str(), e)).collect();
        let spec = ReshardSpec {
            source_bucket: "src".into(),
            source_prefix: String::new(),
            dest_bucket: "dst".into(),
            name_template: "o-%d.tar".into(),
            order: shardstore_core::Order::ByKey,
            target_shard_bytes: 10,
            min_shard_bytes: 1,
            grouping: Grouping::Strict,
        };
        let planned = PlannedShard {
            name: "o-0.tar".into(),
            keys: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            payload_bytes: 4,
        };
        let task = build_task(&planned, &by_key, &spec, "gw");
        let ranges: Vec<(&str, u64, u64, usize)> = task
            .pieces
            .iter()
            .map(|p| (p.source_shard.as_str(), p.start, p.end, p.records.len()))
            .collect();
        assert_eq!(ranges, [("s0", 0, 2048, 2), ("s1", 0, 512, 1), ("s0", 3072, 4096, 1)]);
    }
}
