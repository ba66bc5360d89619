#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use shardstore::shard::ShardWriter;
use shardstore_core::Record;

/// xoshiro256++ written from the published reference, seeded by filling the
/// state with successive SplitMix64 outputs. Shares no code with the crate.
pub struct OracleRng {
    s: [u64; 4],
}

pub fn oracle_splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

pub fn oracle_mix(seed: u64, salt: u64) -> u64 {
    let mut a = salt;
    let mut b = seed ^ oracle_splitmix(&mut a);
    oracle_splitmix(&mut b)
}

impl OracleRng {
    pub fn new(seed: u64) -> Self {
        let mut st = seed;
        let s = [
            oracle_splitmix(&mut st),
            oracle_splitmix(&mut st),
            oracle_splitmix(&mut st),
            oracle_splitmix(&mut st),
        ];
        OracleRng { s }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Lemire's nearly-divisionless bounded draw.
    pub fn below(&mut self, n: u64) -> u64 {
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            let low = m as u64;
            if low >= n || low >= n.wrapping_neg() % n {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn range(&mut self, lo: u64, hi_inclusive: u64) -> u64 {
        lo + self.below(hi_inclusive - lo + 1)
    }
}

/// Forward Fisher–Yates over `0..n`.
pub fn oracle_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    let mut rng = OracleRng::new(seed);
    for i in 0..n.saturating_sub(1) {
        let j = i + rng.below((n - i) as u64) as usize;
        v.swap(i, j);
    }
    v
}

const EXTS: &[&str] = &["jpg", "cls", "json", "seg.png", "txt", "npy"];

/// Component size: mostly small, sometimes up to 1 MiB, with both ends hit.
pub fn component_size(rng: &mut OracleRng, max: u64) -> usize {
    match rng.below(100) {
        0 => 0,
        1 => max as usize,
        2 => rng.below(max + 1) as usize,
        _ => {
            let bits = rng.below(13);
            rng.below(1 << bits) as usize
        }
    }
}

pub fn bytes(rng: &mut OracleRng, n: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(n + 8);
    while out.len() < n {
        out.extend_from_slice(&rng.next_u64().to_le_bytes());
    }
    out.truncate(n);
    out
}

/// Random dataset with unique keys, `1..=ncomp` components per record and
/// component sizes up to `max_component`. Some keys need long-name headers.
pub fn random_records(rng: &mut OracleRng, nrec: usize, ncomp: u64, max_component: u64, long_names: bool) -> Vec<Record> {
    let mut out = Vec::with_capacity(nrec);
    for i in 0..nrec {
        let dir = rng.below(4);
        let mut key = match dir {
            0 => format!("r{i:05}"),
            1 => format!("train/c{}/r{i:05}", rng.below(5)),
            2 => format!("a b/ü-{i}"),
            _ => format!("deep/x{}/y{}/r{i}", rng.below(3), rng.below(3)),
        };
        if long_names && rng.below(10) == 0 {
            let n = rng.range(90, 200) as usize;
            key = format!("{}/{key}", "l".repeat(n));
        }
        let mut rec = Record::new(key).unwrap();
        let want = rng.range(1, ncomp) as usize;
        let mut exts: Vec<&str> = EXTS.to_vec();
        for _ in 0..want {
            let e = exts.swap_remove(rng.below(exts.len() as u64) as usize);
            let n = component_size(rng, max_component);
            rec.push(e, bytes(rng, n)).unwrap();
        }
        out.push(rec);
    }
    out
}

pub fn write_shard_file(path: &Path, records: &[Record]) {
    let f = fs::File::create(path).unwrap();
    let mut w = ShardWriter::new(std::io::BufWriter::new(f));
    for r in records {
        w.write_record(r).unwrap();
    }
    let (_, mut bw) = w.finish().unwrap();
    std::io::Write::flush(&mut bw).unwrap();
}

/// Writes records as `shard-NNNN.tar` files, `per_shard` records each.
pub fn write_shards(dir: &Path, records: &[Record], per_shard: usize) -> Vec<PathBuf> {
    fs::create_dir_all(dir).unwrap();
    records
        .chunks(per_shard)
        .enumerate()
        .map(|(i, chunk)| {
            let p = dir.join(format!("shard-{i:04}.tar"));
            write_shard_file(&p, chunk);
            p
        })
        .collect()
}

/// Entry name → bytes for every component.
pub fn flatten(records: &[Record]) -> BTreeMap<String, Vec<u8>> {
    let mut m = BTreeMap::new();
    for r in records {
        for (ext, data) in r.components() {
            assert!(m.insert(r.entry_name(ext), data.clone()).is_none());
        }
    }
    m
}

pub fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(dir: &Path, rel: &str, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let e = e.unwrap();
            let name = e.file_name().into_string().unwrap();
            let rel = if rel.is_empty() { name } else { format!("{rel}/{name}") };
            if e.file_type().unwrap().is_dir() {
                walk(&e.path(), &rel, out);
            } else {
                out.insert(rel, fs::read(e.path()).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, "", &mut out);
    out
}

pub fn system_tar() -> &'static str {
    "tar"
}

pub fn tar_extract(archive: &Path, into: &Path) -> Result<(), String> {
    fs::create_dir_all(into).unwrap();
    let out = Command::new(system_tar())
        .arg("-xf")
        .arg(archive)
        .arg("-C")
        .arg(into)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).into_owned())
    }
}

/// Materializes records as files and archives them with the system tar in
/// record order.
pub fn tar_create(records: &[Record], work: &Path, format: &str, archive: &Path) -> Result<(), String> {
    let mut list = String::new();
    for r in records {
        for (ext, data) in r.components() {
            let name = r.entry_name(ext);
            let p = work.join(&name);
            fs::create_dir_all(p.parent().unwrap()).unwrap();
            fs::write(&p, data).unwrap();
            list.push_str(&name);
            list.push('\n');
        }
    }
    let list_path = work.with_extension("list");
    fs::write(&list_path, list).unwrap();
    let out = Command::new(system_tar())
        .arg(format!("--format={format}"))
        .arg("--no-recursion")
        .arg("-C")
        .arg(work)
        .arg("-cf")
        .arg(archive)
        .arg("-T")
        .arg(&list_path)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).into_owned())
    }
}

/// Single-process reference for a reshard: flatten sources in name order,
/// permute or sort, then close a shard before the record that would push it
/// past `target` (never leaving a shard empty).
pub fn oracle_reshard(sources: &BTreeMap<String, Vec<Record>>, random_seed: Option<u64>, target: u64) -> Vec<Vec<Record>> {
    let flat: Vec<&Record> = sources.values().flatten().collect();
    let order: Vec<usize> = match random_seed {
        Some(seed) => oracle_permutation(flat.len(), seed),
        None => {
            let mut idx: Vec<usize> = (0..flat.len()).collect();
            idx.sort_by(|&a, &b| flat[a].key().as_bytes().cmp(flat[b].key().as_bytes()));
            idx
        }
    };
    let mut out: Vec<Vec<Record>> = Vec::new();
    let mut bytes = 0u64;
    for i in order {
        let r = flat[i];
        let size: u64 = r.components().iter().map(|(_, d)| d.len() as u64).sum();
        if out.is_empty() || (!out.last().unwrap().is_empty() && bytes + size > target) {
            out.push(Vec::new());
            bytes = 0;
        }
        out.last_mut().unwrap().push(r.clone());
        bytes += size;
    }
    out
}

/// Uploads records as `{prefix}src-NNNN.tar` shards of `per_shard` records.
pub fn upload_shards(
    client: &shardstore::store::Client,
    bucket: &str,
    prefix: &str,
    records: &[Record],
    per_shard: usize,
) -> BTreeMap<String, Vec<Record>> {
    let mut out = BTreeMap::new();
    for (i, chunk) in records.chunks(per_shard).enumerate() {
        let name = format!("{prefix}src-{i:04}.tar");
        let mut buf = Vec::new();
        shardstore::shard::write_shard(chunk, &mut buf).unwrap();
        client
            .put(&shardstore::store::ObjectRef::new(bucket, name.as_str()).unwrap(), buf)
            .unwrap();
        out.insert(name, chunk.to_vec());
    }
    out
}

/// Every non-manifest shard of a bucket, decoded, in name order.
pub fn download_shards(client: &shardstore::store::Client, bucket: &str) -> Vec<(String, Vec<Record>)> {
    shardstore::reshard::list_shards(client, bucket, "")
        .unwrap()
        .into_iter()
        .map(|name| {
            let body = client
                .get(&shardstore::store::ObjectRef::new(bucket, name.as_str()).unwrap())
                .unwrap();
            let recs = shardstore::shard::read_shard(std::io::Cursor::new(body)).unwrap();
            (name, recs)
        })
        .collect()
}
