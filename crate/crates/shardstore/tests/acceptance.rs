//! Acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 4 9`.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Cursor;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use common::*;
use shardstore::bench::{
    inflate_dataset, run_delivery_bench, run_loop_bench, DeliveryConfig, InflateConfig, InflateSink, LoopConfig, LoopObserver, StopCondition,
};
use shardstore::loader::{shuffle_stream, Batch, Dataset, Loader, PipelineConfig};
use shardstore::reshard::{run_reshard, ReshardOptions};
use shardstore::shard::{list_shard, read_shard, write_shard};
use shardstore::store::{LocalCluster, LocalClusterSpec, ObjectRef, TargetOptions};
use shardstore_core::placement::{hrw_targets, ClusterMap, TargetInfo};
use shardstore_core::plan::{Order, ReshardSpec};
use shardstore_core::{record_key, Grouping, Record};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const MIB: u64 = 1 << 20;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            name: "tar interoperability with system tar",
            budget: Duration::from_secs(60),
            run: tar_interop,
        },
        Criterion {
            id: 2,
            name: "record semantics",
            budget: Duration::from_secs(60),
            run: record_semantics,
        },
        Criterion {
            id: 3,
            name: "placement balance and minimal relocation",
            budget: Duration::from_secs(60),
            run: placement,
        },
        Criterion {
            id: 4,
            name: "redirect datapath",
            budget: Duration::from_secs(300),
            run: redirect_datapath,
        },
        Criterion {
            id: 5,
            name: "mirror durability",
            budget: Duration::from_secs(300),
            run: mirror_durability,
        },
        Criterion {
            id: 6,
            name: "reshard oracle equivalence",
            budget: Duration::from_secs(300),
            run: reshard_equivalence,
        },
        Criterion {
            id: 7,
            name: "loader determinism and coverage",
            budget: Duration::from_secs(120),
            run: loader_determinism,
        },
        Criterion {
            id: 8,
            name: "loop-bench accounting",
            budget: Duration::from_secs(300),
            run: loop_accounting,
        },
        Criterion {
            id: 9,
            name: "rate-limited scaling",
            budget: Duration::from_secs(600),
            run: scaling,
        },
        Criterion {
            id: 10,
            name: "inflation correctness",
            budget: Duration::from_secs(120),
            run: inflation,
        },
    ];
    let selected: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for c in &criteria {
        if !selected.is_empty() && !selected.contains(&c.id) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(c.run)) {
            Ok(r) => r,
            Err(p) => Err(format!(
                "panicked: {}",
                p.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            )),
        };
        let elapsed = t0.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > c.budget => Err(format!("{d}; exceeded the {}s budget", c.budget.as_secs())),
            o => o,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d.as_str()),
            Err(e) => {
                failed += 1;
                ("FAIL", e.as_str())
            }
        };
        println!("criterion {:>2} {tag}: {} [{:.1}s] {detail}", c.id, c.name, elapsed.as_secs_f64());
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

/// Component sizes over the full 0..=1 MiB range, weighted to small files so
/// a hundred datasets fit the time budget.
fn interop_size(rng: &mut OracleRng) -> usize {
    match rng.below(1000) {
        0..=4 => 0,
        5..=9 => MIB as usize,
        10..=19 => rng.below(MIB + 1) as usize,
        _ => {
            let bits = rng.below(13);
            rng.below(1 << bits) as usize
        }
    }
}

fn interop_dataset(rng: &mut OracleRng, long_names: bool) -> Vec<Record> {
    let n = rng.range(1, 500) as usize;
    let mut recs = random_records(rng, n, 4, 1, long_names);
    for r in &mut recs {
        let exts: Vec<String> = r.extensions().map(str::to_string).collect();
        let mut fresh = Record::new(r.key()).unwrap();
        for e in exts {
            let size = interop_size(rng);
            fresh.push(e, bytes(rng, size)).unwrap();
        }
        *r = fresh;
    }
    recs
}

fn tar_create_from(dir: &Path, names: &[String], format: &str, archive: &Path) -> Result<(), String> {
    let list = archive.with_extension("list");
    fs::write(&list, names.join("\n") + "\n").unwrap();
    let out = Command::new(system_tar())
        .arg(format!("--format={format}"))
        .arg("--no-recursion")
        .arg("-C")
        .arg(dir)
        .arg("-cf")
        .arg(archive)
        .arg("-T")
        .arg(&list)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "system tar failed: {}", String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn tar_interop() -> Check {
    let formats = ["ustar", "pax", "gnu"];
    let mut rng = OracleRng::new(0xACCE_0001);
    let mut entries = 0usize;
    let mut bytes_total = 0u64;
    for ds in 0..100 {
        let format = formats[ds % 3];
        let records = interop_dataset(&mut rng, format != "ustar");
        let dir = tempfile::tempdir().unwrap();
        let ours = dir.path().join("ours.tar");
        let f = fs::File::create(&ours).unwrap();
        write_shard(&records, std::io::BufWriter::new(f)).unwrap();
        let extracted = dir.path().join("x");
        tar_extract(&ours, &extracted).map_err(|e| format!("dataset {ds}: system tar rejected our shard: {e}"))?;
        let want = flatten(&records);
        ensure!(read_tree(&extracted) == want, "dataset {ds}: extracted tree differs");

        let names: Vec<String> = records
            .iter()
            .flat_map(|r| r.extensions().map(|e| r.entry_name(e)).collect::<Vec<_>>())
            .collect();
        let foreign = dir.path().join("foreign.tar");
        tar_create_from(&extracted, &names, format, &foreign)?;
        let back = read_shard(fs::File::open(&foreign).unwrap()).map_err(|e| format!("dataset {ds} ({format}): {e}"))?;
        ensure!(back == records, "dataset {ds} ({format}): records read from system tar differ");
        entries += want.len();
        bytes_total += want.values().map(|v| v.len() as u64).sum::<u64>();
    }
    Ok(format!("100 datasets, {entries} entries, {:.0} MB each way, ustar/pax/gnu", bytes_total as f64 / 1e6))
}

fn record_semantics() -> Check {
    let mut rng = OracleRng::new(0xACCE_0002);
    let mut shards = 0;
    for ds in 0..100 {
        let records = interop_dataset(&mut rng, true);
        let mut buf = Vec::new();
        write_shard(&records, &mut buf).unwrap();
        let mut seen = BTreeSet::new();
        let mut last = String::new();
        for e in list_shard(Cursor::new(&buf)) {
            let e = e.map_err(|e| e.to_string())?;
            let key = record_key(&e.path).unwrap().to_string();
            if key != last {
                ensure!(seen.insert(key.clone()), "dataset {ds}: components of {key:?} are not contiguous");
                last = key;
            }
        }
        ensure!(seen.len() == records.len(), "dataset {ds}: {} keys for {} records", seen.len(), records.len());
        let back = read_shard(Cursor::new(&buf)).map_err(|e| e.to_string())?;
        ensure!(back == records, "dataset {ds}: read_shard(write_shard(R)) != R");
        shards += 1;
    }
    Ok(format!("{shards} shards round-trip with contiguous records"))
}

fn placement() -> Check {
    let targets: Vec<TargetInfo> = (0..8)
        .map(|i| TargetInfo {
            id: format!("t{i}"),
            endpoint: format!("127.0.0.1:{}", 9000 + i),
            mountpaths: vec![format!("/mp{i}")],
        })
        .collect();
    let map = ClusterMap::new(targets, vec!["127.0.0.1:8999".into()]).unwrap();
    let mut rng = OracleRng::new(0xACCE_0003);
    let objects: Vec<ObjectRef> = (0..100_000)
        .map(|i| ObjectRef::new("bench", format!("train/{:016x}-{i}.tar", rng.next_u64())).unwrap())
        .collect();
    let top: Vec<String> = objects.iter().map(|o| hrw_targets(&map, o, 1).unwrap()[0].id.clone()).collect();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &top {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mean = objects.len() as f64 / 8.0;
    let worst = counts.values().map(|&c| (c as f64 - mean).abs() / mean).fold(0.0, f64::max);
    ensure!(counts.len() == 8 && worst <= 0.10, "per-target counts {counts:?} deviate {:.1}% from the mean", worst * 100.0);

    let removed = "t3";
    let smaller = map.remove(removed).unwrap();
    let mut moved_from_removed = 0;
    let mut other_moves = 0;
    for (o, before) in objects.iter().zip(&top) {
        let after = &hrw_targets(&smaller, o, 1).unwrap()[0].id;
        if before == removed {
            moved_from_removed += 1;
        } else if after != before {
            other_moves += 1;
        }
    }
    ensure!(other_moves == 0, "{other_moves} objects moved although their target stayed");
    Ok(format!(
        "max deviation {:.2}% over 8 targets; removing {removed} relocated {moved_from_removed} objects, 0 others",
        worst * 100.0
    ))
}

/// Uploads `count` single-record tar shards of about `size` bytes each.
fn upload_blobs(c: &shardstore::store::Client, bucket: &str, count: usize, size: usize, seed: u64) -> u64 {
    let mut rng = OracleRng::new(seed);
    let mut total = 0;
    for i in 0..count {
        let rec = Record::new(format!("blob{i:05}")).unwrap().with("bin", bytes(&mut rng, size)).unwrap();
        let mut buf = Vec::new();
        write_shard(std::slice::from_ref(&rec), &mut buf).unwrap();
        total += buf.len() as u64;
        c.put(&ObjectRef::new(bucket, format!("shard-{i:05}.tar")).unwrap(), buf).unwrap();
    }
    total
}

fn redirect_datapath() -> Check {
    let cluster = LocalCluster::start(LocalClusterSpec::new(4)).map_err(|e| e.to_string())?;
    let c = cluster.client();
    c.create_bucket("bench", 1).map_err(|e| e.to_string())?;
    let shard_size = 4 * MIB as usize;
    let stored = upload_blobs(&c, "bench", 64, shard_size, 0xACCE_0004);
    let per_shard = stored / 64;
    let reads = (1u64 << 30).div_ceil(per_shard) + 8;
    let g0 = c.gateway_metrics().map_err(|e| e.to_string())?;
    let cfg = DeliveryConfig {
        bucket: "bench".into(),
        workers_per_consumer: 8,
        stop: StopCondition::Shards(reads),
        seed: 4,
        ..DeliveryConfig::default()
    };
    let r = run_delivery_bench(&c, &cfg).map_err(|e| e.to_string())?;
    let g1 = c.gateway_metrics().map_err(|e| e.to_string())?;
    ensure!(r.valid, "bench invalid: {:?}", r.error);
    ensure!(r.total_bytes >= 1 << 30, "only {} bytes delivered", r.total_bytes);
    let proxied = g1.payload_bytes_proxied - g0.payload_bytes_proxied;
    ensure!(proxied == 0, "gateway proxied {proxied} payload bytes");
    ensure!(r.ops == reads, "{} ops for {reads} reads", r.ops);
    for w in &r.per_worker {
        ensure!(w.ops == w.redirects, "worker {} made {} ops with {} redirects", w.worker, w.ops, w.redirects);
    }
    let issued = g1.redirects - g0.redirects;
    ensure!(issued == r.ops, "gateway issued {issued} redirects for {} ops", r.ops);
    Ok(format!(
        "{:.2} GiB in {} ops at {:.0} MB/s; proxied 0 bytes; {issued} redirects issued, 1 per op",
        r.total_bytes as f64 / (1u64 << 30) as f64,
        r.ops,
        r.aggregate_mb_per_s
    ))
}

fn mirror_durability() -> Check {
    let mut details = Vec::new();
    for victim in ["t0", "t1", "t2"] {
        let mut cluster = LocalCluster::start(LocalClusterSpec::new(3)).map_err(|e| e.to_string())?;
        let c = cluster.client();
        c.create_bucket("mirrored", 2).map_err(|e| e.to_string())?;
        let mut rng = OracleRng::new(0xACCE_0005);
        let mut data = Vec::new();
        for i in 0..1000 {
            let len = rng.range(1, 4096) as usize;
            let body = bytes(&mut rng, len);
            c.put(&ObjectRef::new("mirrored", format!("obj/{i:04}")).unwrap(), body.clone())
                .map_err(|e| e.to_string())?;
            data.push(body);
        }
        cluster.stop_target(victim);
        let reader = cluster.client();
        let mut ok = 0;
        for (i, body) in data.iter().enumerate() {
            match reader.get(&ObjectRef::new("mirrored", format!("obj/{i:04}")).unwrap()) {
                Ok(b) if &b == body => ok += 1,
                Ok(_) => return Err(format!("obj/{i:04} came back corrupted with {victim} down")),
                Err(e) => return Err(format!("obj/{i:04} unreadable with {victim} down: {e}")),
            }
        }
        details.push(format!("{victim} down: {ok}/1000 ({} failovers)", reader.stats().failovers));
    }
    Ok(details.join(", "))
}

fn reshard_equivalence() -> Check {
    let cluster = LocalCluster::start(LocalClusterSpec::new(4)).map_err(|e| e.to_string())?;
    let c = cluster.client();
    c.create_bucket("src", 1).map_err(|e| e.to_string())?;
    let mut rng = OracleRng::new(0xACCE_0006);
    let mut records = random_records(&mut rng, 10_000, 3, 1, false);
    for r in &mut records {
        let exts: Vec<String> = r.extensions().map(str::to_string).collect();
        let mut fresh = Record::new(r.key()).unwrap();
        for e in exts {
            let n = rng.range(1, 2048) as usize;
            fresh.push(e, bytes(&mut rng, n)).unwrap();
        }
        *r = fresh;
    }
    let sources = upload_shards(&c, "src", "in/", &records, 500);
    ensure!(sources.len() == 20, "{} source shards", sources.len());
    let mut src_sorted = records.clone();
    src_sorted.sort_by(|a, b| a.key().cmp(b.key()));

    let mut details = Vec::new();
    for (dest, order) in [("random7", Order::Random { seed: 7 }), ("bykey", Order::ByKey)] {
        c.create_bucket(dest, 1).map_err(|e| e.to_string())?;
        let spec = ReshardSpec {
            source_bucket: "src".into(),
            source_prefix: "in/".into(),
            dest_bucket: dest.into(),
            name_template: "part-%06d.tar".into(),
            order,
            target_shard_bytes: MIB,
            min_shard_bytes: 1,
            grouping: Grouping::Strict,
        };
        let report = run_reshard(&c, &spec, &ReshardOptions::default()).map_err(|e| e.to_string())?;
        let seed = match order {
            Order::Random { seed } => Some(seed),
            Order::ByKey => None,
        };
        let expect = oracle_reshard(&sources, seed, MIB);
        let got = download_shards(&c, dest);
        ensure!(got.len() == expect.len(), "{dest}: {} shards, reference has {}", got.len(), expect.len());
        let mut all = Vec::new();
        for (i, ((name, recs), want)) in got.iter().zip(&expect).enumerate() {
            ensure!(name == &format!("part-{i:06}.tar"), "{dest}: unexpected shard name {name}");
            let got_keys: Vec<&str> = recs.iter().map(Record::key).collect();
            let want_keys: Vec<&str> = want.iter().map(Record::key).collect();
            ensure!(got_keys == want_keys, "{dest}/{name}: membership or order differs from the reference");
            ensure!(recs == want, "{dest}/{name}: record bytes differ from the reference");
            let body = c.get(&ObjectRef::new(dest, name.as_str()).unwrap()).map_err(|e| e.to_string())?;
            let mut seen = BTreeSet::new();
            let mut last = String::new();
            for e in list_shard(Cursor::new(body)) {
                let key = record_key(&e.map_err(|e| e.to_string())?.path).unwrap().to_string();
                if key != last {
                    ensure!(seen.insert(key.clone()), "{dest}/{name}: record {key} split");
                    last = key;
                }
            }
            all.extend(recs.iter().cloned());
        }
        all.sort_by(|a, b| a.key().cmp(b.key()));
        ensure!(all == src_sorted, "{dest}: destination record multiset differs from the source");
        details.push(format!("{dest}: {} shards in {:.1}s", report.planned, report.elapsed_secs));
    }
    Ok(format!("10000 records from 20 shards; {}; equal to the reference, conserved, indivisible", details.join(", ")))
}

fn loader_determinism() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = OracleRng::new(0xACCE_0007);
    let records = random_records(&mut rng, 1000, 3, 600, false);
    let ds = Dataset::from_files(write_shards(dir.path(), &records, 100));
    let mut want: Vec<&Record> = records.iter().collect();
    want.sort_by(|a, b| a.key().cmp(b.key()));

    let mut runs = 0;
    for seed in [1u64, 2, 3] {
        for workers in [1usize, 2, 4] {
            let config = PipelineConfig {
                seed,
                num_workers: workers,
                batch_size: 32,
                shuffle_capacity: 100,
                ..PipelineConfig::default()
            };
            for epoch in 0..3u64 {
                let run = || -> Result<Vec<Batch<Record>>, String> {
                    let loader = Loader::records(ds.clone(), config.clone()).map_err(|e| e.to_string())?;
                    loader.epoch(epoch).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())
                };
                let a = run()?;
                let b = run()?;
                ensure!(a == b, "seed {seed}, {workers} workers, epoch {epoch}: repeated runs differ");
                let mut got: Vec<&Record> = a.iter().flat_map(|b| &b.samples).collect();
                got.sort_by(|a, b| a.key().cmp(b.key()));
                ensure!(got == want, "seed {seed}, {workers} workers, epoch {epoch}: emitted multiset is not the dataset once");
                runs += 1;
            }
        }
        let n = records.len();
        let shuffled: Vec<Record> = shuffle_stream(records.iter().cloned().map(Ok::<_, ()>), n, seed)
            .map(Result::unwrap)
            .collect();
        let reference: Vec<Record> = oracle_permutation(n, seed).into_iter().map(|i| records[i].clone()).collect();
        ensure!(shuffled == reference, "seed {seed}: full-buffer shuffle differs from the reference permutation");
    }
    Ok(format!("{runs} seed/worker/epoch runs reproduced and covered 1000 records exactly once; full-buffer shuffle = reference"))
}

#[derive(Default)]
struct Stopwatch {
    start: Mutex<Option<Instant>>,
    end: Mutex<Option<Instant>>,
    samples: Mutex<u64>,
    batches: Mutex<u64>,
}

impl LoopObserver for Stopwatch {
    fn timed_start(&self, _: usize) {
        self.start.lock().unwrap().get_or_insert_with(Instant::now);
    }
    fn batch(&self, _: usize, _: usize, n: usize) {
        *self.samples.lock().unwrap() += n as u64;
        *self.batches.lock().unwrap() += 1;
    }
    fn timed_end(&self, _: usize) {
        *self.end.lock().unwrap() = Some(Instant::now());
    }
}

fn loop_accounting() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = OracleRng::new(0xACCE_0008);
    let records = random_records(&mut rng, 40_000, 2, 2000, false);
    let ds = Dataset::from_files(write_shards(dir.path(), &records, 1000));
    let watch = Stopwatch::default();
    let cfg = LoopConfig {
        batch_size: 256,
        iterations: 200,
        workers_per_consumer: 5,
        seed: 8,
        ..LoopConfig::default()
    };
    let r = run_loop_bench(&ds, &cfg, &watch).map_err(|e| e.to_string())?;
    ensure!(r.valid, "report invalid: {:?}", r.error);
    let samples = r.samples_consumed.unwrap_or(0);
    ensure!(samples == 51_200, "{samples} samples consumed");
    ensure!(*watch.samples.lock().unwrap() == 51_200, "stopwatch saw {} samples", watch.samples.lock().unwrap());
    ensure!(r.batches == Some(200) && *watch.batches.lock().unwrap() == 200, "batch count {:?}", r.batches);
    let avg = records.iter().map(Record::payload_bytes).sum::<u64>() as f64 / records.len() as f64;
    let expect_bytes = (51_200.0 * avg).round() as u64;
    ensure!(r.total_bytes == expect_bytes, "accounted {} bytes, expected {expect_bytes}", r.total_bytes);
    let secs = (watch.end.lock().unwrap().unwrap() - watch.start.lock().unwrap().unwrap()).as_secs_f64();
    let external = r.total_bytes as f64 / 1e6 / secs;
    let rel = (r.aggregate_mb_per_s - external).abs() / external;
    ensure!(rel <= 0.001, "reported {:.3} MB/s vs stopwatch {external:.3} MB/s ({:.3}%)", r.aggregate_mb_per_s, rel * 100.0);
    Ok(format!(
        "51200 samples in 200 batches; {:.3} MB/s reported vs {external:.3} MB/s stopwatch ({:.4}% apart)",
        r.aggregate_mb_per_s,
        rel * 100.0
    ))
}

/// Per-target read cap for the scaling run, in bytes per second.
const RATE_PER_TARGET: u64 = 150_000_000;

fn scaling() -> Check {
    let mut lines = Vec::new();
    for targets in [1usize, 2, 4] {
        let options = TargetOptions {
            read_rate_limit: Some(RATE_PER_TARGET),
            ..TargetOptions::default()
        };
        let cluster = LocalCluster::start(LocalClusterSpec::new(targets).mountpaths(2).options(options)).map_err(|e| e.to_string())?;
        let c = cluster.client();
        c.create_bucket("scale", 1).map_err(|e| e.to_string())?;
        upload_blobs(&c, "scale", 2400, 512 * 1024, 0xACCE_0009);
        let cfg = DeliveryConfig {
            bucket: "scale".into(),
            workers_per_consumer: 8 * targets,
            stop: StopCondition::Seconds(5.0),
            seed: 9,
            ..DeliveryConfig::default()
        };
        let r = run_delivery_bench(&c, &cfg).map_err(|e| e.to_string())?;
        ensure!(r.valid, "{targets} targets: bench invalid: {:?}", r.error);
        let floor = 0.7 * targets as f64 * RATE_PER_TARGET as f64 / 1e6;
        ensure!(
            r.aggregate_mb_per_s >= floor,
            "{targets} targets: {:.1} MB/s below {floor:.1} MB/s",
            r.aggregate_mb_per_s
        );
        let mp: Vec<u64> = r.mountpath_bytes.values().copied().collect();
        ensure!(mp.len() == 2 * targets, "{targets} targets: {} mountpaths reported", mp.len());
        let (lo, hi) = (*mp.iter().min().unwrap(), *mp.iter().max().unwrap());
        let ratio = hi as f64 / lo.max(1) as f64;
        ensure!(ratio <= 1.5, "{targets} targets: mountpath max/min {ratio:.2}");
        lines.push(format!("{targets}T {:.1} MB/s (floor {floor:.0}) mp max/min {ratio:.2}", r.aggregate_mb_per_s));
    }
    Ok(format!("R = {} MB/s per target: {}", RATE_PER_TARGET / 1_000_000, lines.join("; ")))
}

fn inflation() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = OracleRng::new(0xACCE_000A);
    let records = random_records(&mut rng, 1000, 3, 3000, false);
    let ds = Dataset::from_files(write_shards(&dir.path().join("src"), &records, 100));
    let out = dir.path().join("out");
    let cfg = InflateConfig {
        factor: 8,
        seed: 10,
        target_shard_bytes: 4 * MIB,
        ..InflateConfig::default()
    };
    let report = inflate_dataset(&ds, &cfg, &InflateSink::Dir(out.clone())).map_err(|e| e.to_string())?;
    let mut paths: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
    paths.sort();
    let mut got = Vec::new();
    for p in &paths {
        got.extend(read_shard(fs::File::open(p).unwrap()).map_err(|e| e.to_string())?);
    }
    ensure!(got.len() == 8000 && report.records == 8000, "{} records written ({} reported)", got.len(), report.records);
    let keys: BTreeSet<&str> = got.iter().map(Record::key).collect();
    ensure!(keys.len() == 8000, "{} distinct keys", keys.len());
    let histogram = |recs: &[Record]| {
        let mut h: BTreeMap<Vec<(String, Vec<u8>)>, u64> = BTreeMap::new();
        for r in recs {
            *h.entry(r.components().to_vec()).or_default() += 1;
        }
        h
    };
    let mut want = histogram(&records);
    want.values_mut().for_each(|v| *v *= 8);
    ensure!(histogram(&got) == want, "payload histogram is not the source histogram x 8");
    let sizes = |recs: &[Record]| {
        let mut h: BTreeMap<u64, u64> = BTreeMap::new();
        for r in recs {
            *h.entry(r.payload_bytes()).or_default() += 1;
        }
        h
    };
    let mut want_sizes = sizes(&records);
    want_sizes.values_mut().for_each(|v| *v *= 8);
    ensure!(sizes(&got) == want_sizes, "payload size histogram is not the source histogram x 8");
    Ok(format!("8000 records in {} shards; payload and size histograms = source x 8", paths.len()))
}
