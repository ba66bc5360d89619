//! Streaming data loader.
//!
//! Per worker and epoch the pipeline is
//!
//! ```text
//! shard slice -> record stream -> shuffle buffer -> map -> batches
//! ```
//!
//! Each shard is read with exactly one sequential request. Workers run on
//! their own threads and hand batches to the consumer through bounded
//! channels; the consumer takes one batch from each live worker in turn.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::PathBuf;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam_channel::{bounded, Receiver, Sender};
use serde::{Deserialize, Serialize};
use shardstore_core::placement::ObjectRef;
use shardstore_core::{make_epoch_plan, Record, Shuffled};

use crate::shard::{open_shard_file, ShardError, ShardReader};
use crate::store::{Client, ClientError};

#[derive(Debug, thiserror::Error)]
pub enum LoaderError {
    #[error("opening {shard}: {message}")]
    Open { shard: String, message: String },
    #[error("reading {shard}: {source}")]
    Shard { shard: String, source: ShardError },
    #[error("transform failed: {0}")]
    Transform(String),
    #[error("loader worker {0} panicked")]
    Worker(usize),
    #[error("{0}")]
    Config(String),
}

/// Where a shard's bytes come from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum ShardLocation {
    File(PathBuf),
    Object(ObjectRef),
}

impl fmt::Display for ShardLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShardLocation::File(p) => write!(f, "{}", p.display()),
            ShardLocation::Object(o) => write!(f, "{}/{}", o.bucket, o.name),
        }
    }
}

/// What to do when a shard cannot be read or a transform fails.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnError {
    #[default]
    Abort,
    /// Log, count and continue.
    Skip,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub shuffle_capacity: usize,
    pub batch_size: usize,
    pub num_workers: usize,
    pub drop_last: bool,
    pub seed: u64,
    pub on_shard_error: OnError,
    pub on_transform_error: OnError,
    /// Threads applying the transform inside each worker.
    pub map_parallelism: usize,
    /// Keep input order through the map stage (otherwise completion order).
    pub ordered: bool,
    /// Batches buffered per worker.
    pub queue_depth: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            shuffle_capacity: 1000,
            batch_size: 256,
            num_workers: 1,
            drop_last: false,
            seed: 0,
            on_shard_error: OnError::Abort,
            on_transform_error: OnError::Abort,
            map_parallelism: 1,
            ordered: true,
            queue_depth: 4,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), LoaderError> {
        if self.shuffle_capacity == 0 || self.batch_size == 0 || self.num_workers == 0 || self.map_parallelism == 0 {
            return Err(LoaderError::Config(
                "shuffle_capacity, batch_size, num_workers and map_parallelism must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Counters of skipped input, shared by all workers of a loader.
#[derive(Debug, Default)]
pub struct SkipCounts {
    pub shards: AtomicU64,
    pub records: AtomicU64,
}

/// A named set of shards plus the client needed to fetch object shards.
#[derive(Debug, Clone)]
pub struct Dataset {
    shards: BTreeMap<String, ShardLocation>,
    client: Option<Client>,
}

impl Dataset {
    pub fn from_files(paths: impl IntoIterator<Item = impl Into<PathBuf>>) -> Self {
        let shards = paths
            .into_iter()
            .map(|p| ShardLocation::File(p.into()))
            .map(|l| (l.to_string(), l))
            .collect();
        Dataset { shards, client: None }
    }

    /// Every shard under `bucket/prefix`.
    pub fn from_bucket(client: &Client, bucket: &str, prefix: &str) -> Result<Self, ClientError> {
        let shards = crate::reshard::list_shards(client, bucket, prefix)?
            .into_iter()
            .map(|name| {
                let l = ShardLocation::Object(ObjectRef {
                    bucket: bucket.to_string(),
                    name,
                });
                (l.to_string(), l)
            })
            .collect();
        Ok(Dataset {
            shards,
            client: Some(client.clone()),
        })
    }

    /// Shards given as local paths or `http://gateway/bucket/name` URLs.
    pub fn from_urls(urls: &[String]) -> Result<Self, LoaderError> {
        let mut shards = BTreeMap::new();
        let mut gateway: Option<String> = None;
        for u in urls {
            let loc = match u.strip_prefix("http://") {
                Some(rest) => {
                    let (host, path) = rest
                        .split_once('/')
                        .ok_or_else(|| LoaderError::Config(format!("bad shard URL {u:?}")))?;
                    let path = path.strip_prefix("v1/objects/").unwrap_or(path);
                    let (bucket, name) = path
                        .split_once('/')
                        .ok_or_else(|| LoaderError::Config(format!("shard URL {u:?} lacks bucket/name")))?;
                    if gateway.as_deref().is_some_and(|g| g != host) {
                        return Err(LoaderError::Config("all shard URLs must use one gateway".into()));
                    }
                    gateway = Some(host.to_string());
                    ShardLocation::Object(ObjectRef::new(bucket, name).map_err(|e| LoaderError::Config(e.to_string()))?)
                }
                None => ShardLocation::File(PathBuf::from(u)),
            };
            shards.insert(loc.to_string(), loc);
        }
        Ok(Dataset {
            shards,
            client: gateway.map(|g| Client::new(&g)),
        })
    }

    pub fn len(&self) -> usize {
        self.shards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shards.is_empty()
    }

    /// Shard names in sorted order.
    pub fn names(&self) -> Vec<String> {
        self.shards.keys().cloned().collect()
    }

    pub fn location(&self, name: &str) -> Option<&ShardLocation> {
        self.shards.get(name)
    }

    pub fn client(&self) -> Option<&Client> {
        self.client.as_ref()
    }

    /// Opens one shard as a single sequential stream.
    pub fn open(&self, loc: &ShardLocation) -> Result<Box<dyn Read + Send>, LoaderError> {
        let err = |message: String| LoaderError::Open {
            shard: loc.to_string(),
            message,
        };
        match loc {
            ShardLocation::File(p) => open_shard_file(p).map_err(|e| err(e.to_string())),
            ShardLocation::Object(o) => {
                let client = self.client.as_ref().ok_or_else(|| err("no cluster client configured".into()))?;
                let body = client.get_reader(o).map_err(|e| err(e.to_string()))?;
                crate::shard::decompressing(body).map_err(|e| err(e.to_string()))
            }
        }
    }
}

/// Records of `shards` in the given order, one stream per shard.
pub fn open_record_stream<'a>(
    dataset: &'a Dataset,
    shards: Vec<ShardLocation>,
    on_error: OnError,
    skips: Arc<SkipCounts>,
) -> impl Iterator<Item = Result<Record, LoaderError>> + 'a {
    let mut queue = shards.into_iter();
    let mut current: Option<(String, ShardReader<Box<dyn Read + Send>>)> = None;
    let mut failed = false;
    std::iter::from_fn(move || loop {
        if failed {
            return None;
        }
        if let Some((name, reader)) = current.as_mut() {
            match reader.next() {
                Some(Ok(r)) => return Some(Ok(r)),
                None => current = None,
                Some(Err(source)) => {
                    let e = LoaderError::Shard {
                        shard: name.clone(),
                        source,
                    };
                    current = None;
                    if on_error == OnError::Abort {
                        failed = true;
                        return Some(Err(e));
                    }
                    tracing::warn!(%e, "skipping rest of shard");
                    skips.shards.fetch_add(1, Ordering::Relaxed);
                }
            }
            continue;
        }
        let loc = queue.next()?;
        match dataset.open(&loc) {
            Ok(src) => current = Some((loc.to_string(), ShardReader::new(src))),
            Err(e) if on_error == OnError::Abort => {
                failed = true;
                return Some(Err(e));
            }
            Err(e) => {
                tracing::warn!(%e, "skipping shard");
                skips.shards.fetch_add(1, Ordering::Relaxed);
            }
        }
    })
}

/// Bounded-buffer shuffle of a fallible stream. An error is passed on as
/// soon as it is seen instead of being shuffled into the output.
pub fn shuffle_stream<T, E>(inner: impl Iterator<Item = Result<T, E>>, capacity: usize, seed: u64) -> impl Iterator<Item = Result<T, E>> {
    let slot: Rc<RefCell<Option<E>>> = Rc::new(RefCell::new(None));
    let tap_slot = slot.clone();
    let mut inner = inner;
    let oks = std::iter::from_fn(move || match inner.next()? {
        Ok(v) => Some(v),
        Err(e) => {
            *tap_slot.borrow_mut() = Some(e);
            None
        }
    });
    let mut shuffled = Shuffled::new(oks, capacity, seed);
    let mut done = false;
    std::iter::from_fn(move || {
        if done {
            return None;
        }
        let next = shuffled.next();
        if let Some(e) = slot.borrow_mut().take() {
            done = true;
            return Some(Err(e));
        }
        next.map(Ok)
    })
}

pub type Transform<S> = Arc<dyn Fn(Record) -> anyhow::Result<S> + Send + Sync>;

/// The identity transform.
pub fn identity() -> Transform<Record> {
    Arc::new(Ok)
}

/// Applies `transform` with `parallelism` threads. With `ordered`, output
/// follows input order; otherwise results come out as they complete.
pub fn map_stream<'a, S: Send + 'static>(
    inner: impl Iterator<Item = Result<Record, LoaderError>> + 'a,
    transform: Transform<S>,
    parallelism: usize,
    ordered: bool,
    on_error: OnError,
    skips: Arc<SkipCounts>,
) -> Box<dyn Iterator<Item = Result<S, LoaderError>> + 'a> {
    let handle = move |r: anyhow::Result<S>| -> Option<Result<S, LoaderError>> {
        match r {
            Ok(s) => Some(Ok(s)),
            Err(e) if on_error == OnError::Skip => {
                tracing::warn!(%e, "skipping record");
                skips.records.fetch_add(1, Ordering::Relaxed);
                None
            }
            Err(e) => Some(Err(LoaderError::Transform(format!("{e:#}")))),
        }
    };
    let inner: Box<dyn Iterator<Item = Result<Record, LoaderError>> + 'a> = Box::new(inner);
    if parallelism <= 1 {
        let mut inner = inner;
        let t = transform;
        let mut failed = false;
        return Box::new(std::iter::from_fn(move || loop {
            if failed {
                return None;
            }
            let r = match inner.next()? {
                Ok(rec) => t(rec),
                Err(e) => {
                    failed = true;
                    return Some(Err(e));
                }
            };
            if let Some(out) = handle(r) {
                failed = out.is_err();
                return Some(out);
            }
        }));
    }
    Box::new(Pool::new(inner, transform, parallelism, ordered, Box::new(handle)))
}

type Handler<S> = Box<dyn FnMut(anyhow::Result<S>) -> Option<Result<S, LoaderError>>>;

/// Transform threads fed from the consumer side; only records and results
/// cross threads, so the input iterator may borrow.
struct Pool<'a, S> {
    inner: Box<dyn Iterator<Item = Result<Record, LoaderError>> + 'a>,
    jobs: Option<Sender<(u64, Record)>>,
    results: Receiver<(u64, anyhow::Result<S>)>,
    threads: Vec<JoinHandle<()>>,
    handle: Handler<S>,
    ordered: bool,
    window: usize,
    sent: u64,
    next_out: u64,
    reorder: BTreeMap<u64, anyhow::Result<S>>,
    exhausted: bool,
    failed: bool,
    pending_err: Option<LoaderError>,
}

impl<'a, S: Send + 'static> Pool<'a, S> {
    fn new(
        inner: Box<dyn Iterator<Item = Result<Record, LoaderError>> + 'a>,
        transform: Transform<S>,
        parallelism: usize,
        ordered: bool,
        handle: Handler<S>,
    ) -> Self {
        let window = parallelism * 2;
        let (jtx, jrx) = bounded::<(u64, Record)>(window);
        let (rtx, rrx) = bounded::<(u64, anyhow::Result<S>)>(window);
        let threads = (0..parallelism)
            .map(|_| {
                let jrx = jrx.clone();
                let rtx = rtx.clone();
                let t = transform.clone();
                std::thread::spawn(move || {
                    for (seq, rec) in jrx {
                        if rtx.send((seq, t(rec))).is_err() {
                            return;
                        }
                    }
                })
            })
            .collect();
        Pool {
            inner,
            jobs: Some(jtx),
            results: rrx,
            threads,
            handle,
            ordered,
            window,
            sent: 0,
            next_out: 0,
            reorder: BTreeMap::new(),
            exhausted: false,
            failed: false,
            pending_err: None,
        }
    }

    fn in_flight(&self) -> u64 {
        self.sent - self.next_out
    }

    fn fill(&mut self) {
        while !self.exhausted && self.in_flight() < self.window as u64 {
            match self.inner.next() {
                Some(Ok(rec)) => {
                    let seq = self.sent;
                    self.sent += 1;
                    if let Some(j) = &self.jobs {
                        let _ = j.send((seq, rec));
                    }
                }
                Some(Err(e)) => {
                    self.pending_err = Some(e);
                    self.exhausted = true;
                }
                None => self.exhausted = true,
            }
        }
        if self.exhausted {
            self.jobs = None;
        }
    }
}

impl<S: Send + 'static> Iterator for Pool<'_, S> {
    type Item = Result<S, LoaderError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if self.failed {
                return None;
            }
            self.fill();
            if self.in_flight() == 0 {
                self.failed = true;
                return self.pending_err.take().map(Err);
            }
            let r = if self.ordered {
                loop {
                    if let Some(r) = self.reorder.remove(&self.next_out) {
                        break r;
                    }
                    let (seq, r) = self.results.recv().ok()?;
                    self.reorder.insert(seq, r);
                }
            } else {
                self.results.recv().ok()?.1
            };
            self.next_out += 1;
            if let Some(out) = (self.handle)(r) {
                self.failed = out.is_err();
                return Some(out);
            }
        }
    }
}

impl<S> Drop for Pool<'_, S> {
    fn drop(&mut self) {
        self.jobs = None;
        // Unblock workers waiting to send, then wait for them.
        while self.results.try_recv().is_ok() {}
        for t in self.threads.drain(..) {
            while !t.is_finished() {
                while self.results.try_recv().is_ok() {}
                std::thread::yield_now();
            }
            let _ = t.join();
        }
    }
}

/// Groups a fallible stream into batches of `size`.
pub fn batch_stream<S>(
    inner: impl Iterator<Item = Result<S, LoaderError>>,
    size: usize,
    drop_last: bool,
) -> impl Iterator<Item = Result<Vec<S>, LoaderError>> {
    let mut inner = inner;
    let mut done = false;
    std::iter::from_fn(move || {
        if done {
            return None;
        }
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            match inner.next() {
                Some(Ok(s)) => batch.push(s),
                Some(Err(e)) => {
                    done = true;
                    return Some(Err(e));
                }
                None => {
                    done = true;
                    break;
                }
            }
        }
        if batch.is_empty() || (drop_last && batch.len() < size) {
            None
        } else {
            Some(Ok(batch))
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<S> {
    pub epoch: u64,
    pub worker: usize,
    /// Position of this batch within the worker's epoch output.
    pub index: usize,
    pub samples: Vec<S>,
}

pub struct Loader<S> {
    dataset: Arc<Dataset>,
    config: PipelineConfig,
    transform: Transform<S>,
    skips: Arc<SkipCounts>,
}

impl Loader<Record> {
    pub fn records(dataset: Dataset, config: PipelineConfig) -> Result<Self, LoaderError> {
        Loader::new(dataset, config, identity())
    }
}

impl<S: Send + 'static> Loader<S> {
    pub fn new(dataset: Dataset, config: PipelineConfig, transform: Transform<S>) -> Result<Self, LoaderError> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(LoaderError::Config("dataset has no shards".into()));
        }
        Ok(Loader {
            dataset: Arc::new(dataset),
            config,
            transform,
            skips: Arc::new(SkipCounts::default()),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn skips(&self) -> &SkipCounts {
        &self.skips
    }

    /// Shard slice of `worker` in `epoch`.
    pub fn worker_shards(&self, epoch: u64, worker: usize) -> Vec<ShardLocation> {
        let plan = make_epoch_plan(&self.dataset.names(), self.config.seed, epoch, self.config.num_workers);
        plan.worker_slices[worker]
            .iter()
            .map(|n| self.dataset.location(n).expect("planned from dataset").clone())
            .collect()
    }

    /// Batches of one worker for one epoch, computed on the calling thread.
    pub fn worker_batches(&self, epoch: u64, worker: usize) -> impl Iterator<Item = Result<Vec<S>, LoaderError>> + '_ {
        worker_pipeline(&self.dataset, &self.config, &self.transform, &self.skips, epoch, worker)
    }

    /// All workers of one epoch on background threads. Batches are taken
    /// from the workers in rotation.
    pub fn epoch(&self, epoch: u64) -> EpochStream<S> {
        let mut receivers = Vec::new();
        let mut threads = Vec::new();
        for w in 0..self.config.num_workers {
            let (tx, rx) = bounded(self.config.queue_depth.max(1));
            let dataset = self.dataset.clone();
            let config = self.config.clone();
            let transform = self.transform.clone();
            let skips = self.skips.clone();
            threads.push(Some(std::thread::spawn(move || {
                for (index, b) in worker_pipeline(&dataset, &config, &transform, &skips, epoch, w).enumerate() {
                    let item = b.map(|samples| Batch {
                        epoch,
                        worker: w,
                        index,
                        samples,
                    });
                    if tx.send(item).is_err() {
                        return;
                    }
                }
            })));
            receivers.push(Some(rx));
        }
        EpochStream {
            receivers,
            threads,
            turn: 0,
        }
    }

    /// Epochs `first, first + 1, ...` back to back, without end.
    pub fn epochs_from(&self, first: u64) -> impl Iterator<Item = Result<Batch<S>, LoaderError>> + '_ {
        let mut epoch = first;
        let mut current = self.epoch(epoch);
        std::iter::from_fn(move || loop {
            match current.next() {
                Some(b) => return Some(b),
                None => {
                    epoch += 1;
                    current = self.epoch(epoch);
                }
            }
        })
    }
}

fn worker_pipeline<'a, S: Send + 'static>(
    dataset: &'a Dataset,
    config: &PipelineConfig,
    transform: &Transform<S>,
    skips: &Arc<SkipCounts>,
    epoch: u64,
    worker: usize,
) -> impl Iterator<Item = Result<Vec<S>, LoaderError>> + 'a {
    let plan = make_epoch_plan(&dataset.names(), config.seed, epoch, config.num_workers);
    let shards = plan.worker_slices[worker]
        .iter()
        .map(|n| dataset.location(n).expect("planned from dataset").clone())
        .collect();
    let stream = open_record_stream(dataset, shards, config.on_shard_error, skips.clone());
    let shuffled = shuffle_stream(stream, config.shuffle_capacity, plan.worker_seed(worker));
    let mapped = map_stream(
        shuffled,
        transform.clone(),
        config.map_parallelism,
        config.ordered,
        config.on_transform_error,
        skips.clone(),
    );
    batch_stream(mapped, config.batch_size, config.drop_last)
}

pub struct EpochStream<S> {
    receivers: Vec<Option<Receiver<Result<Batch<S>, LoaderError>>>>,
    threads: Vec<Option<JoinHandle<()>>>,
    turn: usize,
}

impl<S> Iterator for EpochStream<S> {
    type Item = Result<Batch<S>, LoaderError>;

    fn next(&mut self) -> Option<Self::Item> {
        let n = self.receivers.len();
        for _ in 0..n {
            let w = self.turn;
            self.turn = (self.turn + 1) % n;
            let Some(rx) = &self.receivers[w] else { continue };
            match rx.recv() {
                Ok(item) => return Some(item),
                Err(_) => {
                    // The sender only drops when the worker returns.
                    self.receivers[w] = None;
                    if self.threads[w].take().is_some_and(|t| t.join().is_err()) {
                        return Some(Err(LoaderError::Worker(w)));
                    }
                }
            }
        }
        None
    }
}

impl<S> Drop for EpochStream<S> {
    fn drop(&mut self) {
        // Closing the channels stops workers at their next send.
        self.receivers.clear();
        for t in self.threads.drain(..).flatten() {
            let _ = t.join();
        }
    }
}
