//! Benchmarks and dataset inflation.
//!
//! * Delivery: workers repeatedly fetch a random whole shard through the
//!   gateway and discard it. Client byte counts are cross-checked against
//!   per-mountpath counters on the targets.
//! * Loop: consumers pull batches from the full loader pipeline; only the
//!   steady-state loop is timed and MB/s is accounted as
//!   `samples * avg_sample_bytes / seconds`.
//! * Inflation: duplicate every record `factor` times under fresh random
//!   keys and repack.

use std::collections::{BTreeMap, HashSet};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Barrier, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use shardstore_core::placement::ObjectRef;
use shardstore_core::rng::{fisher_yates, Prng};
use shardstore_core::template::NameTemplate;
use shardstore_core::throughput::{mb_per_s, mib_per_s};
use shardstore_core::{Record, ShardPacker};

use crate::loader::{Dataset, LoaderError, PipelineConfig, ShardLocation};
use crate::shard::{ShardError, ShardReader, ShardStats, ShardWriter};
use crate::store::api::TargetMetrics;
use crate::store::ratelimit::RateLimiter;
use crate::store::{Client, ClientError};

pub const REPORT_SCHEMA: &str = "v1";
const READ_CHUNK: usize = 256 * 1024;
const FETCH_ATTEMPTS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Loader(#[from] LoaderError),
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopCondition {
    Seconds(f64),
    /// Total shard fetches across all workers.
    Shards(u64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeliveryConfig {
    pub bucket: String,
    pub prefix: String,
    pub consumers: usize,
    pub workers_per_consumer: usize,
    pub stop: StopCondition,
    /// Pick shards with replacement (default) or walk one shuffled pass.
    pub with_replacement: bool,
    pub seed: u64,
    /// Bytes per second per consumer, emulating a bounded training rate.
    pub consumer_rate_limit: Option<u64>,
}

impl Default for DeliveryConfig {
    fn default() -> Self {
        DeliveryConfig {
            bucket: String::new(),
            prefix: String::new(),
            consumers: 1,
            workers_per_consumer: 5,
            stop: StopCondition::Seconds(10.0),
            with_replacement: true,
            seed: 0,
            consumer_rate_limit: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopConfig {
    pub consumers: usize,
    pub workers_per_consumer: usize,
    pub batch_size: usize,
    pub iterations: usize,
    /// Overrides the dataset's payload / record count average.
    pub avg_sample_bytes: Option<f64>,
    pub seed: u64,
    pub shuffle_capacity: usize,
    pub consumer_rate_limit: Option<u64>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            consumers: 1,
            workers_per_consumer: 5,
            batch_size: 256,
            iterations: 200,
            avg_sample_bytes: None,
            seed: 0,
            shuffle_capacity: 1000,
            consumer_rate_limit: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkerReport {
    pub worker: usize,
    pub consumer: usize,
    pub bytes: u64,
    pub seconds: f64,
    pub ops: u64,
    pub redirects: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema: String,
    pub mode: String,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub wall_seconds: f64,
    pub total_bytes: u64,
    pub aggregate_mb_per_s: f64,
    pub aggregate_mib_per_s: f64,
    pub ops: u64,
    pub redirects: u64,
    pub per_worker: Vec<WorkerReport>,
    pub per_target_mb_per_s: BTreeMap<String, f64>,
    pub per_mountpath_mb_per_s: BTreeMap<String, f64>,
    /// Target-side bytes read during the run, by target and by
    /// `target:mountpath`.
    pub target_bytes: BTreeMap<String, u64>,
    pub mountpath_bytes: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_consumed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_sample_bytes: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batches: Option<u64>,
}

impl BenchReport {
    fn new(mode: &str) -> Self {
        BenchReport {
            schema: REPORT_SCHEMA.into(),
            mode: mode.into(),
            ..Default::default()
        }
    }

    /// Sets totals and derived rates.
    pub fn set_totals(&mut self, total_bytes: u64, wall_seconds: f64) {
        self.total_bytes = total_bytes;
        self.wall_seconds = wall_seconds;
        self.aggregate_mb_per_s = mb_per_s(total_bytes, wall_seconds);
        self.aggregate_mib_per_s = mib_per_s(total_bytes, wall_seconds);
    }

    fn set_target_deltas(&mut self, before: &BTreeMap<String, TargetMetrics>, after: &BTreeMap<String, TargetMetrics>) {
        for (id, a) in after {
            let b = before.get(id);
            let read = a.bytes_read() - b.map_or(0, |b| b.bytes_read());
            self.target_bytes.insert(id.clone(), read);
            self.per_target_mb_per_s.insert(id.clone(), mb_per_s(read, self.wall_seconds));
            for (mp, m) in &a.mountpaths {
                let prev = b.and_then(|b| b.mountpaths.get(mp)).map_or(0, |m| m.bytes_read);
                let key = format!("{id}:{mp}");
                self.mountpath_bytes.insert(key.clone(), m.bytes_read - prev);
                self.per_mountpath_mb_per_s.insert(key, mb_per_s(m.bytes_read - prev, self.wall_seconds));
            }
        }
    }
}

/// Worker `i` of consumer `c` in a delivery or loop run.
fn worker_layout(consumers: usize, per: usize) -> Vec<(usize, usize)> {
    (0..consumers).flat_map(|c| (0..per).map(move |w| (c, c * per + w))).collect()
}

/// Reads `obj` to the end, adding to `bytes` as data arrives.
fn drain_object(client: &Client, obj: &ObjectRef, bytes: &AtomicU64, limiter: Option<&RateLimiter>) -> Result<u64, ClientError> {
    let mut body = client.get_reader(obj)?;
    let mut buf = vec![0u8; READ_CHUNK];
    let mut total = 0u64;
    loop {
        let n = body.read(&mut buf)?;
        if n == 0 {
            return Ok(total);
        }
        if let Some(l) = limiter {
            l.acquire_blocking(n);
        }
        bytes.fetch_add(n as u64, Ordering::Relaxed);
        total += n as u64;
    }
}

enum Picker {
    Random(Prng),
    Queue(Arc<Mutex<Vec<usize>>>),
}

impl Picker {
    fn pick(&mut self, n: usize) -> Option<usize> {
        match self {
            Picker::Random(rng) => Some(rng.below(n as u64) as usize),
            Picker::Queue(q) => q.lock().unwrap().pop(),
        }
    }
}

pub fn run_delivery_bench(client: &Client, cfg: &DeliveryConfig) -> Result<BenchReport, BenchError> {
    if cfg.consumers == 0 || cfg.workers_per_consumer == 0 {
        return Err(BenchError::Config("consumers and workers must be at least 1".into()));
    }
    let shards = crate::reshard::list_shards(client, &cfg.bucket, &cfg.prefix)?;
    let mut report = BenchReport::new("delivery");
    if shards.is_empty() {
        report.error = Some(format!("no shards under {}/{}", cfg.bucket, cfg.prefix));
        return Ok(report);
    }
    let objects: Vec<ObjectRef> = shards
        .iter()
        .map(|n| ObjectRef {
            bucket: cfg.bucket.clone(),
            name: n.clone(),
        })
        .collect();
    let layout = worker_layout(cfg.consumers, cfg.workers_per_consumer);
    let limiters: Vec<Option<RateLimiter>> = (0..cfg.consumers).map(|_| cfg.consumer_rate_limit.map(RateLimiter::new)).collect();
    let queue = (!cfg.with_replacement).then(|| {
        let mut order: Vec<usize> = (0..objects.len()).collect();
        fisher_yates(&mut order, &mut Prng::new(cfg.seed));
        order.reverse();
        Arc::new(Mutex::new(order))
    });
    let counters: Vec<AtomicU64> = layout.iter().map(|_| AtomicU64::new(0)).collect();
    let budget = AtomicU64::new(match cfg.stop {
        StopCondition::Shards(n) => n,
        StopCondition::Seconds(_) => u64::MAX,
    });
    let abort = AtomicBool::new(false);
    let failure: Mutex<Option<String>> = Mutex::new(None);
    let barrier = Barrier::new(layout.len() + 1);

    let before = client.all_target_metrics()?;
    let results: Vec<(Instant, Instant, crate::store::ClientStats)> = std::thread::scope(|s| {
        let handles: Vec<_> = layout
            .iter()
            .enumerate()
            .map(|(slot, &(consumer, worker))| {
                let client = client.fresh();
                let mut picker = match &queue {
                    Some(q) => Picker::Queue(q.clone()),
                    None => Picker::Random(Prng::derived(cfg.seed, worker as u64)),
                };
                let (objects, counters, budget, abort, failure, barrier, limiters) =
                    (&objects, &counters, &budget, &abort, &failure, &barrier, &limiters);
                s.spawn(move || {
                    barrier.wait();
                    let start = Instant::now();
                    let deadline = match cfg.stop {
                        StopCondition::Seconds(secs) => Some(start + Duration::from_secs_f64(secs)),
                        StopCondition::Shards(_) => None,
                    };
                    while !abort.load(Ordering::Relaxed) {
                        if deadline.is_some_and(|d| Instant::now() >= d) {
                            break;
                        }
                        if budget.fetch_update(Ordering::Relaxed, Ordering::Relaxed, |b| b.checked_sub(1)).is_err() {
                            break;
                        }
                        let Some(i) = picker.pick(objects.len()) else { break };
                        let mut attempt = 0;
                        loop {
                            attempt += 1;
                            match drain_object(&client, &objects[i], &counters[slot], limiters[consumer].as_ref()) {
                                Ok(_) => break,
                                Err(e) if attempt < FETCH_ATTEMPTS => {
                                    tracing::warn!(%e, shard = %objects[i].name, "fetch failed, retrying");
                                }
                                Err(e) => {
                                    *failure.lock().unwrap() = Some(format!("{}: {e}", objects[i].name));
                                    abort.store(true, Ordering::Relaxed);
                                    break;
                                }
                            }
                        }
                    }
                    (start, Instant::now(), client.stats())
                })
            })
            .collect();
        barrier.wait();
        handles.into_iter().map(|h| h.join().expect("bench worker panicked")).collect()
    });
    let after = client.all_target_metrics()?;

    let first = results.iter().map(|r| r.0).min().expect("at least one worker");
    let last = results.iter().map(|r| r.1).max().expect("at least one worker");
    let mut total = 0;
    for ((slot, &(consumer, worker)), (start, end, stats)) in layout.iter().enumerate().zip(&results) {
        let bytes = counters[slot].load(Ordering::Relaxed);
        total += bytes;
        report.ops += stats.ops;
        report.redirects += stats.redirects;
        report.per_worker.push(WorkerReport {
            worker,
            consumer,
            bytes,
            seconds: (*end - *start).as_secs_f64(),
            ops: stats.ops,
            redirects: stats.redirects,
            samples: None,
        });
    }
    report.set_totals(total, (last - first).as_secs_f64());
    report.set_target_deltas(&before, &after);
    report.error = failure.into_inner().unwrap();
    report.valid = report.error.is_none() && total > 0;
    Ok(report)
}

/// Record count and payload bytes of a dataset, read without keeping data.
pub fn dataset_stats(dataset: &Dataset) -> Result<(u64, u64), BenchError> {
    let mut records = 0u64;
    let mut payload = 0u64;
    for name in dataset.names() {
        let loc = dataset.location(&name).expect("listed");
        let src = dataset.open(loc)?;
        let idx = crate::reshard::index_shard(&name, src, shardstore_core::Grouping::Permissive)?;
        records += idx.len() as u64;
        payload += idx.iter().map(|e| e.payload_bytes).sum::<u64>();
    }
    Ok((records, payload))
}

/// Hooks around the timed part of a loop run, e.g. an external stopwatch.
pub trait LoopObserver: Sync {
    fn timed_start(&self, _consumer: usize) {}
    fn batch(&self, _consumer: usize, _iteration: usize, _samples: usize) {}
    fn timed_end(&self, _consumer: usize) {}
}

impl LoopObserver for () {}

pub fn run_loop_bench(dataset: &Dataset, cfg: &LoopConfig, observer: &dyn LoopObserver) -> Result<BenchReport, BenchError> {
    if cfg.consumers == 0 || cfg.workers_per_consumer == 0 || cfg.batch_size == 0 || cfg.iterations == 0 {
        return Err(BenchError::Config("consumers, workers, batch size and iterations must be at least 1".into()));
    }
    let avg = match cfg.avg_sample_bytes {
        Some(a) => a,
        None => {
            let (records, payload) = dataset_stats(dataset)?;
            if records == 0 {
                return Err(BenchError::Config("dataset has no records".into()));
            }
            payload as f64 / records as f64
        }
    };
    let mut report = BenchReport::new("loop");
    let client = dataset.client();
    let before = match client {
        Some(c) => c.all_target_metrics()?,
        None => BTreeMap::new(),
    };
    let barrier = Barrier::new(cfg.consumers);
    let results: Vec<Result<(Instant, Instant, u64, u64), BenchError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.consumers)
            .map(|consumer| {
                let barrier = &barrier;
                s.spawn(move || -> Result<(Instant, Instant, u64, u64), BenchError> {
                    let config = PipelineConfig {
                        shuffle_capacity: cfg.shuffle_capacity,
                        batch_size: cfg.batch_size,
                        num_workers: cfg.workers_per_consumer,
                        // Every timed batch is full so the sample count is exact.
                        drop_last: true,
                        seed: shardstore_core::rng::mix(cfg.seed, consumer as u64),
                        ..PipelineConfig::default()
                    };
                    let loader = crate::loader::Loader::records(dataset.clone(), config)?;
                    let limiter = cfg.consumer_rate_limit.map(RateLimiter::new);
                    let mut stream = loader.epochs_from(0);
                    let warm = stream.next();
                    barrier.wait();
                    if let Some(w) = warm {
                        w?;
                    }
                    observer.timed_start(consumer);
                    let start = Instant::now();
                    let mut samples = 0u64;
                    let mut bytes = 0u64;
                    for it in 0..cfg.iterations {
                        let batch = stream
                            .next()
                            .ok_or_else(|| BenchError::Config("loader ended unexpectedly".into()))??;
                        let b: u64 = batch.samples.iter().map(Record::payload_bytes).sum();
                        if let Some(l) = &limiter {
                            l.acquire_blocking(b as usize);
                        }
                        samples += batch.samples.len() as u64;
                        bytes += b;
                        observer.batch(consumer, it, batch.samples.len());
                    }
                    let end = Instant::now();
                    observer.timed_end(consumer);
                    Ok((start, end, samples, bytes))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("loop consumer panicked")).collect()
    });

    let mut ok = Vec::new();
    for (consumer, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => ok.push((consumer, v)),
            Err(e) => {
                report.error.get_or_insert(format!("consumer {consumer}: {e}"));
            }
        }
    }
    let mut samples_total = 0u64;
    for (consumer, (start, end, samples, bytes)) in &ok {
        samples_total += samples;
        report.per_worker.push(WorkerReport {
            worker: *consumer,
            consumer: *consumer,
            bytes: *bytes,
            seconds: (*end - *start).as_secs_f64(),
            ops: 0,
            redirects: 0,
            samples: Some(*samples),
        });
    }
    let wall = match (ok.iter().map(|r| r.1 .0).min(), ok.iter().map(|r| r.1 .1).max()) {
        (Some(a), Some(b)) => (b - a).as_secs_f64(),
        _ => 0.0,
    };
    report.set_totals(shardstore_core::throughput::accounted_bytes(samples_total, avg), wall);
    report.samples_consumed = Some(samples_total);
    report.avg_sample_bytes = Some(avg);
    report.batches = Some((ok.len() * cfg.iterations) as u64);
    if let Some(c) = client {
        let after = c.all_target_metrics()?;
        report.set_target_deltas(&before, &after);
    }
    report.valid = report.error.is_none() && samples_total > 0;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

pub fn report_json(report: &BenchReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

pub fn report_csv(report: &BenchReport, out: impl Write) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    let io_err = |e: csv::Error| BenchError::Io(io::Error::other(e));
    w.write_record(["row", "worker", "consumer", "bytes", "seconds", "mb_per_s", "ops", "redirects", "samples"])
        .map_err(io_err)?;
    for p in &report.per_worker {
        w.write_record([
            "worker".to_string(),
            p.worker.to_string(),
            p.consumer.to_string(),
            p.bytes.to_string(),
            format!("{:.6}", p.seconds),
            format!("{:.3}", mb_per_s(p.bytes, p.seconds)),
            p.ops.to_string(),
            p.redirects.to_string(),
            p.samples.map(|s| s.to_string()).unwrap_or_default(),
        ])
        .map_err(io_err)?;
    }
    w.write_record([
        "summary".to_string(),
        String::new(),
        String::new(),
        report.total_bytes.to_string(),
        format!("{:.6}", report.wall_seconds),
        format!("{:.3}", report.aggregate_mb_per_s),
        report.ops.to_string(),
        report.redirects.to_string(),
        report.samples_consumed.map(|s| s.to_string()).unwrap_or_default(),
    ])
    .map_err(io_err)?;
    w.flush()?;
    Ok(())
}

pub fn emit_report(report: &BenchReport, format: ReportFormat, path: &Path) -> Result<(), BenchError> {
    match format {
        ReportFormat::Json => std::fs::write(path, report_json(report) + "\n")?,
        ReportFormat::Csv => report_csv(report, std::fs::File::create(path)?)?,
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InflateConfig {
    pub factor: u32,
    pub seed: u64,
    pub target_shard_bytes: u64,
    pub name_template: String,
}

impl Default for InflateConfig {
    fn default() -> Self {
        InflateConfig {
            factor: 2,
            seed: 0,
            target_shard_bytes: 256 * 1024 * 1024,
            name_template: "inflated-%06d.tar".into(),
        }
    }
}

pub enum InflateSink<'a> {
    Dir(PathBuf),
    Bucket { client: &'a Client, bucket: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct InflateReport {
    pub source_records: u64,
    pub records: u64,
    pub shards: Vec<ShardStats>,
}

const KEY_ATTEMPTS: usize = 16;

fn fresh_key(rng: &mut Prng, used: &mut HashSet<u128>) -> Result<String, BenchError> {
    for _ in 0..KEY_ATTEMPTS {
        let k = rng.next_u128();
        if used.insert(k) {
            return Ok(format!("{k:032x}"));
        }
    }
    Err(BenchError::Config("random key collision persisted; giving up".into()))
}

struct OpenShard {
    name: String,
    writer: ShardWriter<io::BufWriter<tempfile::NamedTempFile>>,
}

pub fn inflate_dataset(dataset: &Dataset, cfg: &InflateConfig, sink: &InflateSink) -> Result<InflateReport, BenchError> {
    if cfg.factor == 0 {
        return Err(BenchError::Config("factor must be at least 1".into()));
    }
    let template = NameTemplate::parse(&cfg.name_template).map_err(|e| BenchError::Config(e.to_string()))?;
    let tmp_dir = match sink {
        InflateSink::Dir(d) => {
            std::fs::create_dir_all(d)?;
            d.clone()
        }
        InflateSink::Bucket { .. } => std::env::temp_dir(),
    };
    let mut rng = Prng::new(cfg.seed);
    let mut used: HashSet<u128> = HashSet::new();
    let mut packer = ShardPacker::new(cfg.target_shard_bytes);
    let mut current: Option<OpenShard> = None;
    let mut report = InflateReport {
        source_records: 0,
        records: 0,
        shards: Vec::new(),
    };

    let finish = |shard: OpenShard, report: &mut InflateReport| -> Result<(), BenchError> {
        let (stats, buf) = shard.writer.finish()?;
        let tmp = buf.into_inner().map_err(|e| e.into_error())?;
        match sink {
            InflateSink::Dir(d) => {
                tmp.persist(d.join(&shard.name)).map_err(|e| e.error)?;
            }
            InflateSink::Bucket { client, bucket } => {
                let obj = ObjectRef::new(bucket.as_str(), shard.name.as_str()).map_err(|e| BenchError::Config(e.to_string()))?;
                client.put_file(&obj, tmp.path())?;
            }
        }
        report.shards.push(stats);
        Ok(())
    };

    for pass in 0..cfg.factor {
        for name in dataset.names() {
            let loc: &ShardLocation = dataset.location(&name).expect("listed");
            for rec in ShardReader::new(dataset.open(loc)?) {
                let rec = rec?;
                if pass == 0 {
                    report.source_records += 1;
                }
                let rec = rec
                    .rekeyed(fresh_key(&mut rng, &mut used)?)
                    .map_err(|e| BenchError::Config(e.to_string()))?;
                if packer.offer(rec.payload_bytes()) {
                    if let Some(s) = current.take() {
                        finish(s, &mut report)?;
                    }
                }
                let shard = match current.as_mut() {
                    Some(s) => s,
                    None => {
                        let name = template.format(report.shards.len() as u64);
                        let file = tempfile::NamedTempFile::new_in(&tmp_dir)?;
                        current.insert(OpenShard {
                            writer: ShardWriter::new(io::BufWriter::new(file)).named(name.clone()),
                            name,
                        })
                    }
                };
                shard.writer.write_record(&rec)?;
                report.records += 1;
            }
        }
    }
    if let Some(s) = current.take() {
        finish(s, &mut report)?;
    }
    Ok(report)
}
