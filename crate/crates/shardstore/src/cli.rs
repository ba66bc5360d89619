//! `shardstore` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 operational failure.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use shardstore_core::plan::{Order, ReshardSpec};
use shardstore_core::template::NameTemplate;
use shardstore_core::{record_key, Grouping, ObjectRef, Record, ShardPacker, TargetInfo};

use crate::bench::{self, DeliveryConfig, InflateConfig, InflateSink, LoopConfig, ReportFormat, StopCondition};
use crate::loader::Dataset;
use crate::reshard::{self, ReshardOptions};
use crate::shard::{open_shard_file, ShardReader, ShardWriter};
use crate::size::parse_size;
use crate::store::{Client, ClusterConfig, TargetOptions};

pub const ENDPOINT_ENV: &str = "SHARDSTORE_ENDPOINT";

#[derive(Debug, Parser)]
#[command(name = "shardstore", version, about = "Sharded dataset storage, resharding and I/O benchmarks")]
struct Cli {
    /// Gateway address (host:port). Overrides the config file.
    #[arg(long, global = true, env = ENDPOINT_ENV)]
    endpoint: Option<String>,
    /// Config file (default ~/.shardstore.json).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More logging; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Create and inspect shard files.
    #[command(subcommand)]
    Shard(ShardCmd),
    /// Local cluster lifecycle.
    #[command(subcommand)]
    Cluster(ClusterCmd),
    /// Bucket management.
    #[command(subcommand)]
    Bucket(BucketCmd),
    /// Upload a local file as an object.
    Put { file: PathBuf, object: String },
    /// Download an object to a file, or stdout with `-` or no argument.
    Get { object: String, out: Option<PathBuf> },
    /// List objects under bucket[/prefix].
    Ls {
        path: String,
        #[arg(long)]
        json: bool,
    },
    /// Delete an object.
    Rm { object: String },
    /// Rewrite a sharded dataset into new shards.
    Reshard(ReshardArgs),
    /// Throughput benchmarks.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Duplicate every record under fresh random keys.
    Inflate(InflateArgs),
    #[command(hide = true, subcommand)]
    Daemon(DaemonCmd),
}

#[derive(Debug, Subcommand)]
enum ShardCmd {
    /// Pack a directory of files into shards.
    Create {
        #[arg(long)]
        src: PathBuf,
        /// Output name template, e.g. out/train-%06d.tar
        #[arg(long)]
        dst: String,
        #[arg(long, default_value = "1GiB")]
        target_size: String,
        #[arg(long, value_enum, default_value_t = GroupingArg::Strict)]
        grouping: GroupingArg,
    },
    /// List the records of a shard.
    Ls {
        file: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Write one component (KEY.EXT) to stdout.
    Cat { file: PathBuf, entry: String },
    /// Unpack every entry under DST.
    Extract {
        file: PathBuf,
        #[arg(long)]
        dst: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GroupingArg {
    Strict,
    Permissive,
}

impl From<GroupingArg> for Grouping {
    fn from(g: GroupingArg) -> Self {
        match g {
            GroupingArg::Strict => Grouping::Strict,
            GroupingArg::Permissive => Grouping::Permissive,
        }
    }
}

#[derive(Debug, Subcommand)]
enum ClusterCmd {
    /// Start gateway and target daemons on localhost.
    Start(StartArgs),
    /// Stop the daemons of a cluster root.
    Stop {
        #[arg(long)]
        root: PathBuf,
    },
    /// Health of every node.
    Status {
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Move objects to the holders the current map assigns.
    Rebalance,
}

#[derive(Debug, Args)]
struct StartArgs {
    #[arg(long, default_value_t = 3)]
    targets: usize,
    #[arg(long, default_value_t = 1)]
    gateways: usize,
    #[arg(long, default_value_t = 2)]
    mountpaths_per_target: usize,
    #[arg(long)]
    root: PathBuf,
    /// First port; nodes take consecutive ports. Free ports are picked
    /// when omitted.
    #[arg(long)]
    base_port: Option<u16>,
    /// Per-target GET rate cap, e.g. 150MB.
    #[arg(long)]
    read_rate_limit: Option<String>,
    /// Skip checksum verification on full reads.
    #[arg(long)]
    no_verify: bool,
    #[arg(long, default_value_t = 4)]
    max_build_tasks: usize,
}

#[derive(Debug, Subcommand)]
enum BucketCmd {
    Create {
        name: String,
        #[arg(long, default_value_t = 1)]
        mirror: usize,
    },
    Ls {
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Args)]
struct ReshardArgs {
    /// Source bucket[/prefix].
    #[arg(long)]
    src: String,
    #[arg(long)]
    dst: String,
    /// random:SEED or key
    #[arg(long, default_value = "key")]
    order: String,
    #[arg(long, default_value = "1GiB")]
    target_size: String,
    #[arg(long, default_value = "128MiB")]
    min_size: String,
    #[arg(long, default_value = "shard-%06d.tar")]
    template: String,
    #[arg(long, value_enum, default_value_t = GroupingArg::Strict)]
    grouping: GroupingArg,
    #[arg(long, default_value_t = 2)]
    max_in_flight: usize,
    /// Print the plan without building.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Debug, Subcommand)]
enum BenchCmd {
    /// Random whole-shard reads, data discarded.
    Delivery(DeliveryArgs),
    /// Timed consumption of the loader pipeline.
    Loop(LoopArgs),
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long, default_value = "report.json")]
    report: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DeliveryArgs {
    #[arg(long)]
    bucket: String,
    #[arg(long, default_value = "")]
    prefix: String,
    #[arg(long, default_value_t = 1)]
    consumers: usize,
    #[arg(long, default_value_t = 5)]
    workers: usize,
    #[arg(long, conflicts_with = "shards")]
    seconds: Option<f64>,
    /// Stop after this many shard reads in total.
    #[arg(long)]
    shards: Option<u64>,
    #[arg(long)]
    without_replacement: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-consumer byte rate cap, e.g. 54MB.
    #[arg(long)]
    consumer_rate_limit: Option<String>,
    #[command(flatten)]
    out: ReportArgs,
}

#[derive(Debug, Args)]
struct LoopArgs {
    #[arg(long, required_unless_present = "paths")]
    bucket: Option<String>,
    #[arg(long, default_value = "")]
    prefix: String,
    /// Local shard files instead of a bucket.
    #[arg(long, num_args = 1..)]
    paths: Vec<PathBuf>,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    #[arg(long, default_value_t = 5)]
    workers: usize,
    #[arg(long, default_value_t = 1)]
    consumers: usize,
    #[arg(long, default_value_t = 1000)]
    shuffle_capacity: usize,
    #[arg(long)]
    avg_sample_bytes: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    consumer_rate_limit: Option<String>,
    #[command(flatten)]
    out: ReportArgs,
}

#[derive(Debug, Args)]
struct InflateArgs {
    /// Directory of shard files, or bucket[/prefix].
    #[arg(long)]
    src: String,
    #[arg(long, default_value_t = 2)]
    factor: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "256MiB")]
    target_size: String,
    /// Destination bucket.
    #[arg(long, required_unless_present = "dst_dir")]
    dst: Option<String>,
    /// Destination directory instead of a bucket.
    #[arg(long, conflicts_with = "dst")]
    dst_dir: Option<PathBuf>,
    #[arg(long, default_value = "inflated-%06d.tar")]
    template: String,
}

#[derive(Debug, Subcommand)]
enum DaemonCmd {
    Gateway {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        endpoint: String,
    },
    Target {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        id: String,
    },
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct CliConfig {
    #[serde(default)]
    endpoint: Option<String>,
    #[serde(default)]
    default_bucket: Option<String>,
}

struct Ctx {
    endpoint: Option<String>,
    default_bucket: Option<String>,
}

impl Ctx {
    fn client(&self) -> Result<Client> {
        let ep = self.endpoint.as_deref().with_context(|| {
            format!("no gateway endpoint: pass --endpoint, set {ENDPOINT_ENV} or add \"endpoint\" to ~/.shardstore.json")
        })?;
        Ok(Client::new(ep))
    }

    /// `bucket/name`, or `name` in the default bucket.
    fn object(&self, path: &str) -> Result<ObjectRef> {
        let (bucket, name) = match path.split_once('/') {
            Some((b, n)) => (b.to_string(), n.to_string()),
            None => match &self.default_bucket {
                Some(b) => (b.clone(), path.to_string()),
                None => bail!("object path {path:?} must be bucket/name"),
            },
        };
        Ok(ObjectRef::new(bucket, name)?)
    }
}

fn split_bucket(path: &str) -> (String, String) {
    match path.split_once('/') {
        Some((b, p)) => (b.to_string(), p.to_string()),
        None => (path.to_string(), String::new()),
    }
}

fn load_config(path: Option<&Path>) -> Result<CliConfig> {
    let path = match path {
        Some(p) => p.to_path_buf(),
        None => match std::env::var_os("HOME") {
            Some(h) => Path::new(&h).join(".shardstore.json"),
            None => return Ok(CliConfig::default()),
        },
    };
    match fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display())),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(CliConfig::default()),
        Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
    }
}

fn init_logging(verbose: u8, daemon: bool) {
    let default = match (verbose, daemon) {
        (0, false) => "warn",
        (0, true) | (1, _) => "info,shardstore=debug",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(io::stderr).try_init();
}

/// Parses arguments, runs the command, returns the exit code.
pub fn main() -> i32 {
    run(std::env::args_os())
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    init_logging(cli.verbose, matches!(cli.cmd, Cmd::Daemon(_)));
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    let ctx = Ctx {
        endpoint: cli.endpoint.or(cfg.endpoint),
        default_bucket: cfg.default_bucket,
    };
    match cli.cmd {
        Cmd::Shard(c) => shard_cmd(c),
        Cmd::Cluster(c) => cluster_cmd(&ctx, c),
        Cmd::Bucket(c) => bucket_cmd(&ctx, c),
        Cmd::Put { file, object } => {
            let obj = ctx.object(&object)?;
            let meta = ctx.client()?.put_file(&obj, &file)?;
            println!("{}/{} {} bytes xxh64:{}", obj.bucket, obj.name, meta.size, meta.checksum);
            Ok(())
        }
        Cmd::Get { object, out } => {
            let obj = ctx.object(&object)?;
            let mut body = ctx.client()?.get_reader(&obj)?;
            match out.filter(|p| p.as_os_str() != "-") {
                Some(p) => {
                    // Write beside the destination and rename, so a failed
                    // download leaves no partial file.
                    let dir = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
                    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
                    io::copy(&mut body, &mut tmp)?;
                    tmp.persist(&p)?;
                }
                None => {
                    let mut stdout = io::stdout().lock();
                    io::copy(&mut body, &mut stdout)?;
                    stdout.flush()?;
                }
            }
            Ok(())
        }
        Cmd::Ls { path, json } => {
            let (bucket, prefix) = split_bucket(&path);
            let items = ctx.client()?.list_all(&bucket, &prefix)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&items)?);
            } else {
                for i in items {
                    println!("{:>14}  {}", i.size, i.name);
                }
            }
            Ok(())
        }
        Cmd::Rm { object } => {
            let obj = ctx.object(&object)?;
            ctx.client()?.delete(&obj)?;
            Ok(())
        }
        Cmd::Reshard(a) => reshard_cmd(&ctx, a),
        Cmd::Bench(BenchCmd::Delivery(a)) => delivery_cmd(&ctx, a),
        Cmd::Bench(BenchCmd::Loop(a)) => loop_cmd(&ctx, a),
        Cmd::Inflate(a) => inflate_cmd(&ctx, a),
        Cmd::Daemon(d) => daemon_cmd(d),
    }
}

fn size_arg(s: &str) -> Result<u64> {
    parse_size(s).with_context(|| format!("bad size {s:?}"))
}

/// Every regular file under `root` as (relative path with `/`, absolute).
fn walk_files(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    fn walk(dir: &Path, rel: &str, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
        for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
            let entry = entry?;
            let name = entry
                .file_name()
                .into_string()
                .map_err(|n| anyhow::anyhow!("non-UTF-8 file name {n:?}"))?;
            let rel_name = if rel.is_empty() { name } else { format!("{rel}/{name}") };
            let ft = entry.file_type()?;
            if ft.is_dir() {
                walk(&entry.path(), &rel_name, out)?;
            } else if ft.is_file() {
                out.push((rel_name, entry.path()));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, "", &mut out)?;
    Ok(out)
}

/// Packs the files of `src` into shards named by `template`. Returns the
/// written shard paths.
pub fn create_shards(src: &Path, template: &str, target_bytes: u64, mode: Grouping) -> Result<Vec<PathBuf>> {
    let template = NameTemplate::parse(template)?;
    let mut files = walk_files(src)?;
    // Sorting by key first keeps every record's files adjacent even when a
    // directory name contains a dot.
    let mut keyed = Vec::with_capacity(files.len());
    for (rel, abs) in files.drain(..) {
        let key = record_key(&rel).with_context(|| format!("file {rel:?}"))?.to_string();
        keyed.push((key, rel, abs));
    }
    keyed.sort();
    let mut grouper = shardstore_core::RecordGrouper::new(mode);
    let mut records: Vec<Record> = Vec::new();
    let mut written = Vec::new();
    let mut packer = ShardPacker::new(target_bytes);
    let mut writer: Option<(PathBuf, ShardWriter<io::BufWriter<fs::File>>)> = None;

    let mut emit = |rec: Record, writer: &mut Option<(PathBuf, ShardWriter<io::BufWriter<fs::File>>)>, written: &mut Vec<PathBuf>| -> Result<()> {
        if packer.offer(rec.payload_bytes()) {
            if let Some((path, w)) = writer.take() {
                w.finish()?.1.flush()?;
                written.push(path);
            }
        }
        if writer.is_none() {
            let path = PathBuf::from(template.format(written.len() as u64));
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            let f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            *writer = Some((path, ShardWriter::new(io::BufWriter::new(f))));
        }
        writer.as_mut().expect("opened above").1.write_record(&rec)?;
        Ok(())
    };
    for (_, rel, abs) in keyed {
        let data = fs::read(&abs).with_context(|| format!("reading {}", abs.display()))?;
        if let Some(done) = grouper.push(&rel, data)? {
            records.push(done);
        }
        for rec in records.drain(..) {
            emit(rec, &mut writer, &mut written)?;
        }
    }
    if let Some(rec) = grouper.finish() {
        emit(rec, &mut writer, &mut written)?;
    }
    if let Some((path, w)) = writer.take() {
        w.finish()?.1.flush()?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Serialize)]
struct RecordListing {
    key: String,
    extensions: Vec<String>,
    payload_bytes: u64,
}

fn shard_cmd(cmd: ShardCmd) -> Result<()> {
    match cmd {
        ShardCmd::Create {
            src,
            dst,
            target_size,
            grouping,
        } => {
            let shards = create_shards(&src, &dst, size_arg(&target_size)?, grouping.into())?;
            for s in &shards {
                println!("{}", s.display());
            }
            Ok(())
        }
        ShardCmd::Ls { file, json } => {
            let mut listing = Vec::new();
            for rec in ShardReader::new(open_shard_file(&file)?) {
                let rec = rec?;
                listing.push(RecordListing {
                    key: rec.key().to_string(),
                    extensions: rec.extensions().map(str::to_string).collect(),
                    payload_bytes: rec.payload_bytes(),
                });
            }
            if json {
                println!("{}", serde_json::to_string_pretty(&listing)?);
            } else {
                for r in listing {
                    println!("{}\t{}\t{}", r.key, r.extensions.join(","), r.payload_bytes);
                }
            }
            Ok(())
        }
        ShardCmd::Cat { file, entry } => {
            let (key, ext) = shardstore_core::split_entry_name(&entry)?;
            for rec in ShardReader::new(open_shard_file(&file)?) {
                let rec = rec?;
                if rec.key() == key {
                    let data = rec.get(ext).with_context(|| format!("record {key:?} has no component {ext:?}"))?;
                    let mut out = io::stdout().lock();
                    out.write_all(data)?;
                    out.flush()?;
                    return Ok(());
                }
            }
            bail!("no record {key:?} in {}", file.display())
        }
        ShardCmd::Extract { file, dst } => {
            for rec in ShardReader::new(open_shard_file(&file)?) {
                let rec = rec?;
                for (ext, data) in rec.components() {
                    let path = dst.join(rec.entry_name(ext));
                    if let Some(parent) = path.parent() {
                        fs::create_dir_all(parent)?;
                    }
                    fs::write(&path, data).with_context(|| format!("writing {}", path.display()))?;
                }
            }
            Ok(())
        }
    }
}

fn bucket_cmd(ctx: &Ctx, cmd: BucketCmd) -> Result<()> {
    let client = ctx.client()?;
    match cmd {
        BucketCmd::Create { name, mirror } => {
            let p = client.create_bucket(&name, mirror)?;
            println!("{name} mirror={}", p.mirror_count);
        }
        BucketCmd::Ls { json } => {
            let b = client.buckets()?;
            if json {
                println!("{}", serde_json::to_string_pretty(&b)?);
            } else {
                for (name, p) in b {
                    println!("{name}\tmirror={}", p.mirror_count);
                }
            }
        }
    }
    Ok(())
}

fn parse_order(s: &str) -> Result<Order> {
    if s == "key" {
        return Ok(Order::ByKey);
    }
    match s.strip_prefix("random:") {
        Some(seed) => Ok(Order::Random {
            seed: seed.parse().with_context(|| format!("bad seed in {s:?}"))?,
        }),
        None if s == "random" => Ok(Order::Random { seed: 0 }),
        None => bail!("order must be random:SEED or key, got {s:?}"),
    }
}

fn reshard_cmd(ctx: &Ctx, a: ReshardArgs) -> Result<()> {
    let (source_bucket, source_prefix) = split_bucket(&a.src);
    let spec = ReshardSpec {
        source_bucket,
        source_prefix,
        dest_bucket: a.dst,
        name_template: a.template,
        order: parse_order(&a.order)?,
        target_shard_bytes: size_arg(&a.target_size)?,
        min_shard_bytes: size_arg(&a.min_size)?,
        grouping: a.grouping.into(),
    };
    let opts = ReshardOptions {
        max_in_flight_per_target: a.max_in_flight.max(1),
        ..Default::default()
    };
    let client = ctx.client()?;
    if a.dry_run {
        let (_, planned) = reshard::plan(&client, &spec, &opts)?;
        println!("{}", serde_json::to_string_pretty(&planned)?);
        return Ok(());
    }
    let report = reshard::run_reshard(&client, &spec, &opts)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn write_reports(report: &bench::BenchReport, out: &ReportArgs) -> Result<()> {
    bench::emit_report(report, ReportFormat::Json, &out.report)?;
    if let Some(csv) = &out.csv {
        bench::emit_report(report, ReportFormat::Csv, csv)?;
    }
    println!(
        "{} {:.1} MB/s over {:.2} s, {} bytes{}",
        report.mode,
        report.aggregate_mb_per_s,
        report.wall_seconds,
        report.total_bytes,
        if report.valid { "" } else { " (INVALID)" }
    );
    if let Some(e) = &report.error {
        bail!("benchmark aborted: {e}");
    }
    if !report.valid {
        bail!("benchmark produced no data");
    }
    Ok(())
}

fn delivery_cmd(ctx: &Ctx, a: DeliveryArgs) -> Result<()> {
    let stop = match (a.seconds, a.shards) {
        (_, Some(n)) => StopCondition::Shards(n),
        (Some(s), None) => StopCondition::Seconds(s),
        (None, None) => StopCondition::Seconds(60.0),
    };
    let cfg = DeliveryConfig {
        bucket: a.bucket,
        prefix: a.prefix,
        consumers: a.consumers,
        workers_per_consumer: a.workers,
        stop,
        with_replacement: !a.without_replacement,
        seed: a.seed,
        consumer_rate_limit: a.consumer_rate_limit.as_deref().map(size_arg).transpose()?,
    };
    let report = bench::run_delivery_bench(&ctx.client()?, &cfg)?;
    write_reports(&report, &a.out)
}

fn loop_cmd(ctx: &Ctx, a: LoopArgs) -> Result<()> {
    let dataset = match &a.bucket {
        Some(b) => Dataset::from_bucket(&ctx.client()?, b, &a.prefix)?,
        None => Dataset::from_files(a.paths.clone()),
    };
    let cfg = LoopConfig {
        consumers: a.consumers,
        workers_per_consumer: a.workers,
        batch_size: a.batch,
        iterations: a.iters,
        avg_sample_bytes: a.avg_sample_bytes,
        seed: a.seed,
        shuffle_capacity: a.shuffle_capacity,
        consumer_rate_limit: a.consumer_rate_limit.as_deref().map(size_arg).transpose()?,
    };
    let report = bench::run_loop_bench(&dataset, &cfg, &())?;
    write_reports(&report, &a.out)
}

fn inflate_cmd(ctx: &Ctx, a: InflateArgs) -> Result<()> {
    let src = Path::new(&a.src);
    let dataset = if src.is_dir() {
        let mut files: Vec<PathBuf> = walk_files(src)?
            .into_iter()
            .map(|(_, p)| p)
            .filter(|p| p.to_string_lossy().ends_with(".tar") || p.to_string_lossy().ends_with(".tar.gz") || p.to_string_lossy().ends_with(".tgz"))
            .collect();
        files.sort();
        Dataset::from_files(files)
    } else {
        let (b, p) = split_bucket(&a.src);
        Dataset::from_bucket(&ctx.client()?, &b, &p)?
    };
    let cfg = InflateConfig {
        factor: a.factor,
        seed: a.seed,
        target_shard_bytes: size_arg(&a.target_size)?,
        name_template: a.template,
    };
    let client;
    let sink = match (&a.dst, &a.dst_dir) {
        (_, Some(d)) => InflateSink::Dir(d.clone()),
        (Some(b), None) => {
            client = ctx.client()?;
            InflateSink::Bucket {
                client: &client,
                bucket: b.clone(),
            }
        }
        (None, None) => bail!("pass --dst BUCKET or --dst-dir DIR"),
    };
    let report = bench::inflate_dataset(&dataset, &cfg, &sink)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

// ---- local cluster -------------------------------------------------------

const LOCK_FILE: &str = "cluster.lock";
const CONFIG_FILE: &str = "cluster.json";

fn pid_dir(root: &Path) -> PathBuf {
    root.join("pids")
}

fn pid_alive(pid: i32) -> bool {
    Path::new(&format!("/proc/{pid}")).exists()
        && fs::read_to_string(format!("/proc/{pid}/stat"))
            .map(|s| !s.contains(") Z "))
            .unwrap_or(false)
}

fn read_pids(root: &Path) -> Vec<(String, i32)> {
    let Ok(dir) = fs::read_dir(pid_dir(root)) else { return Vec::new() };
    let mut out: Vec<(String, i32)> = dir
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().trim_end_matches(".pid").to_string();
            let pid = fs::read_to_string(e.path()).ok()?.trim().parse().ok()?;
            Some((name, pid))
        })
        .collect();
    out.sort();
    out
}

fn signal(pid: i32, sig: i32) {
    // SAFETY: kill(2) has no memory-safety preconditions.
    unsafe {
        libc::kill(pid, sig);
    }
}

fn stop_pids(pids: &[(String, i32)]) {
    for (_, pid) in pids {
        signal(*pid, libc::SIGTERM);
    }
    let deadline = Instant::now() + Duration::from_secs(5);
    while Instant::now() < deadline && pids.iter().any(|(_, p)| pid_alive(*p)) {
        std::thread::sleep(Duration::from_millis(50));
    }
    for (_, pid) in pids {
        if pid_alive(*pid) {
            signal(*pid, libc::SIGKILL);
        }
    }
}

fn free_port() -> Result<u16> {
    Ok(std::net::TcpListener::bind("127.0.0.1:0")?.local_addr()?.port())
}

fn wait_healthy(root: &Path, config: &ClusterConfig, timeout: Duration) -> Result<()> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(2)))
        .build()
        .into();
    let deadline = Instant::now() + timeout;
    let endpoints: Vec<&String> = config.gateways.iter().chain(config.targets.iter().map(|t| &t.endpoint)).collect();
    for ep in endpoints {
        loop {
            let ok = agent
                .get(&format!("http://{ep}/v1/health"))
                .call()
                .map(|r| r.status().is_success())
                .unwrap_or(false);
            if ok {
                break;
            }
            if Instant::now() > deadline {
                bail!("node {ep} did not become healthy");
            }
            if let Some((name, _)) = read_pids(root).into_iter().find(|(_, p)| !pid_alive(*p)) {
                bail!("{name} exited during startup; see {}", root.join("logs").join(format!("{name}.log")).display());
            }
            std::thread::sleep(Duration::from_millis(50));
        }
    }
    for g in &config.gateways {
        let map = Client::new(g).cluster_map()?;
        if map.targets.len() != config.targets.len() {
            bail!("gateway {g} sees {} of {} targets", map.targets.len(), config.targets.len());
        }
    }
    Ok(())
}

fn start_cluster(a: StartArgs) -> Result<ClusterConfig> {
    if a.targets == 0 || a.gateways == 0 || a.mountpaths_per_target == 0 {
        bail!("targets, gateways and mountpaths-per-target must be at least 1");
    }
    fs::create_dir_all(&a.root)?;
    let root = a.root.canonicalize()?;
    let lock = root.join(LOCK_FILE);
    if lock.exists() {
        let live: Vec<_> = read_pids(&root).into_iter().filter(|(_, p)| pid_alive(*p)).collect();
        if !live.is_empty() {
            bail!("cluster at {} is already running (lock {}); stop it first", root.display(), lock.display());
        }
        tracing::warn!("removing stale lock {}", lock.display());
        fs::remove_file(&lock)?;
    }
    fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&lock)
        .with_context(|| format!("cluster at {} is already starting", root.display()))?
        .write_all(std::process::id().to_string().as_bytes())?;

    let result = (|| -> Result<ClusterConfig> {
        let _ = fs::remove_dir_all(pid_dir(&root));
        fs::create_dir_all(pid_dir(&root))?;
        fs::create_dir_all(root.join("logs"))?;
        let mut next = a.base_port;
        let mut port = || -> Result<u16> {
            match next.as_mut() {
                Some(p) => {
                    let v = *p;
                    *p = p.checked_add(1).context("ran out of ports")?;
                    Ok(v)
                }
                None => free_port(),
            }
        };
        let mut gateways = Vec::new();
        for _ in 0..a.gateways {
            gateways.push(format!("127.0.0.1:{}", port()?));
        }
        let mut targets = Vec::new();
        for i in 0..a.targets {
            let id = format!("t{i}");
            let mountpaths = (0..a.mountpaths_per_target)
                .map(|m| root.join("data").join(&id).join(format!("mp{m}")).to_string_lossy().into_owned())
                .collect();
            targets.push(TargetInfo {
                id,
                endpoint: format!("127.0.0.1:{}", port()?),
                mountpaths,
            });
        }
        let config = ClusterConfig {
            gateways,
            targets,
            target_options: TargetOptions {
                read_rate_limit: a.read_rate_limit.as_deref().map(size_arg).transpose()?,
                verify_checksums: !a.no_verify,
                max_build_tasks: a.max_build_tasks,
            },
        };
        config.initial_map()?;
        let cfg_path = root.join(CONFIG_FILE);
        config.save(&cfg_path)?;

        let exe = std::env::current_exe()?;
        let spawn = |name: &str, args: &[&str]| -> Result<()> {
            let log = fs::File::create(root.join("logs").join(format!("{name}.log")))?;
            let mut cmd = Command::new(&exe);
            cmd.arg("daemon").args(args).stdin(Stdio::null()).stdout(log.try_clone()?).stderr(log);
            std::os::unix::process::CommandExt::process_group(&mut cmd, 0);
            let child = cmd.spawn().with_context(|| format!("spawning {name}"))?;
            fs::write(pid_dir(&root).join(format!("{name}.pid")), child.id().to_string())?;
            Ok(())
        };
        let cfg_arg = cfg_path.to_string_lossy().into_owned();
        for t in &config.targets {
            spawn(&t.id, &["target", "--config", &cfg_arg, "--id", &t.id])?;
        }
        for (i, g) in config.gateways.iter().enumerate() {
            spawn(&format!("gw{i}"), &["gateway", "--config", &cfg_arg, "--endpoint", g])?;
        }
        wait_healthy(&root, &config, Duration::from_secs(20))?;
        Ok(config)
    })();
    if result.is_err() {
        stop_pids(&read_pids(&root));
        let _ = fs::remove_dir_all(pid_dir(&root));
        let _ = fs::remove_file(&lock);
    }
    result
}

#[derive(Debug, Serialize)]
struct NodeStatus {
    role: String,
    id: String,
    endpoint: String,
    healthy: bool,
    map_version: Option<u64>,
}

fn cluster_cmd(ctx: &Ctx, cmd: ClusterCmd) -> Result<()> {
    match cmd {
        ClusterCmd::Start(a) => {
            let root = a.root.clone();
            let config = start_cluster(a)?;
            println!("cluster running at {}", root.display());
            for g in &config.gateways {
                println!("gateway {g}");
            }
            for t in &config.targets {
                println!("target  {} {} ({} mountpaths)", t.id, t.endpoint, t.mountpaths.len());
            }
            println!("export {ENDPOINT_ENV}={}", config.gateways[0]);
            Ok(())
        }
        ClusterCmd::Stop { root } => {
            let pids = read_pids(&root);
            if pids.is_empty() && !root.join(LOCK_FILE).exists() {
                bail!("no cluster running at {}", root.display());
            }
            stop_pids(&pids);
            let _ = fs::remove_dir_all(pid_dir(&root));
            let _ = fs::remove_file(root.join(LOCK_FILE));
            println!("stopped {} processes", pids.len());
            Ok(())
        }
        ClusterCmd::Status { root, json } => {
            let (gateways, targets): (Vec<String>, Vec<(String, String)>) = match &root {
                Some(r) => {
                    let c = ClusterConfig::load(&r.join(CONFIG_FILE)).with_context(|| format!("no cluster config in {}", r.display()))?;
                    (c.gateways, c.targets.into_iter().map(|t| (t.id, t.endpoint)).collect())
                }
                None => {
                    let client = ctx.client()?;
                    let map = client.cluster_map()?;
                    (map.gateways, map.targets.into_iter().map(|t| (t.id, t.endpoint)).collect())
                }
            };
            let agent: ureq::Agent = ureq::Agent::config_builder()
                .http_status_as_error(false)
                .timeout_global(Some(Duration::from_secs(2)))
                .build()
                .into();
            let probe = |ep: &str| -> Option<u64> {
                let mut r = agent.get(&format!("http://{ep}/v1/health")).call().ok()?;
                if !r.status().is_success() {
                    return None;
                }
                r.body_mut().read_json::<crate::store::api::Health>().ok().map(|h| h.map_version)
            };
            let mut nodes = Vec::new();
            for (i, g) in gateways.iter().enumerate() {
                let v = probe(g);
                nodes.push(NodeStatus {
                    role: "gateway".into(),
                    id: format!("gw{i}"),
                    endpoint: g.clone(),
                    healthy: v.is_some(),
                    map_version: v,
                });
            }
            for (id, ep) in &targets {
                let v = probe(ep);
                nodes.push(NodeStatus {
                    role: "target".into(),
                    id: id.clone(),
                    endpoint: ep.clone(),
                    healthy: v.is_some(),
                    map_version: v,
                });
            }
            if json {
                println!("{}", serde_json::to_string_pretty(&nodes)?);
            } else {
                for n in &nodes {
                    let v = n.map_version.map(|v| format!("v{v}")).unwrap_or_else(|| "-".into());
                    println!("{:<8} {:<4} {:<22} {:<5} {}", n.role, n.id, n.endpoint, if n.healthy { "up" } else { "DOWN" }, v);
                }
            }
            let down = nodes.iter().filter(|n| !n.healthy).count();
            if down > 0 {
                bail!("{down} of {} nodes unreachable", nodes.len());
            }
            Ok(())
        }
        ClusterCmd::Rebalance => {
            let r = ctx.client()?.rebalance()?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            Ok(())
        }
    }
}

fn daemon_cmd(cmd: DaemonCmd) -> Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let shutdown = async {
            let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()).expect("signal handler");
            tokio::select! {
                _ = term.recv() => {}
                _ = tokio::signal::ctrl_c() => {}
            }
        };
        match cmd {
            DaemonCmd::Gateway { config, endpoint } => {
                let cfg = Arc::new(ClusterConfig::load(&config)?);
                let listener = tokio::net::TcpListener::bind(&endpoint).await.with_context(|| format!("binding {endpoint}"))?;
                crate::store::local::run_gateway(cfg, &endpoint, listener, shutdown).await
            }
            DaemonCmd::Target { config, id } => {
                let cfg = Arc::new(ClusterConfig::load(&config)?);
                let ep = cfg
                    .targets
                    .iter()
                    .find(|t| t.id == id)
                    .map(|t| t.endpoint.clone())
                    .with_context(|| format!("no target {id:?}"))?;
                let listener = tokio::net::TcpListener::bind(&ep).await.with_context(|| format!("binding {ep}"))?;
                crate::store::local::run_target(cfg, &id, listener, shutdown).await
            }
        }
    })
}

/// Record listings of a shard keyed by record key; used by tests.
pub fn shard_keys(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let mut out = BTreeMap::new();
    for rec in ShardReader::new(open_shard_file(path)?) {
        let rec = rec?;
        out.insert(rec.key().to_string(), rec.extensions().map(str::to_string).collect());
    }
    Ok(out)
}
