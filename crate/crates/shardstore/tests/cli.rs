use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn shardstore(home: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shardstore"))
        .args(args)
        .env("HOME", home)
        .env_remove("SHARDSTORE_ENDPOINT")
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn two_record_dir(root: &Path) -> std::path::PathBuf {
    let src = root.join("src");
    fs::create_dir_all(&src).unwrap();
    for (name, data) in [("A.png", "aaaa"), ("A.cls", "1"), ("B.png", "bbbbbb"), ("B.cls", "2")] {
        fs::write(src.join(name), data).unwrap();
    }
    src
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let home = tempfile::tempdir().unwrap();
    assert_eq!(shardstore(home.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(shardstore(home.path(), &["shard", "create"]).status.code(), Some(1));
    assert_eq!(shardstore(home.path(), &["--help"]).status.code(), Some(0));
    // Operational failure: no endpoint configured.
    assert_eq!(shardstore(home.path(), &["ls", "b"]).status.code(), Some(2));
}

#[test]
fn shard_tools_round_trip() {
    let home = tempfile::tempdir().unwrap();
    let src = two_record_dir(home.path());
    let tmpl = home.path().join("out/train-%06d.tar");
    let out = ok(shardstore(home.path(), &["shard", "create", "--src", src.to_str().unwrap(), "--dst", tmpl.to_str().unwrap()]));
    let shard = home.path().join("out/train-000000.tar");
    assert_eq!(out.trim(), shard.to_str().unwrap());

    let ls = ok(shardstore(home.path(), &["shard", "ls", shard.to_str().unwrap(), "--json"]));
    let v: serde_json::Value = serde_json::from_str(&ls).unwrap();
    assert_eq!(v[0]["key"], "A");
    assert_eq!(v[1]["payload_bytes"], 7);

    let cat = ok(shardstore(home.path(), &["shard", "cat", shard.to_str().unwrap(), "B.png"]));
    assert_eq!(cat, "bbbbbb");
    let missing = shardstore(home.path(), &["shard", "cat", shard.to_str().unwrap(), "C.png"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(missing.stdout.is_empty());

    let x = home.path().join("x");
    ok(shardstore(home.path(), &["shard", "extract", shard.to_str().unwrap(), "--dst", x.to_str().unwrap()]));
    assert_eq!(fs::read(x.join("A.png")).unwrap(), b"aaaa");

    let empty = home.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = ok(shardstore(home.path(), &["shard", "create", "--src", empty.to_str().unwrap(), "--dst", "none-%d.tar"]));
    assert!(out.is_empty());
}

#[test]
fn cluster_lifecycle_and_object_commands() {
    let home = tempfile::tempdir().unwrap();
    let h = home.path();
    let root = h.join("cluster");
    let r = root.to_str().unwrap();
    let started = ok(shardstore(h, &["cluster", "start", "--targets", "3", "--gateways", "2", "--mountpaths-per-target", "2", "--root", r]));
    let endpoint = started
        .lines()
        .find_map(|l| l.strip_prefix("export SHARDSTORE_ENDPOINT="))
        .unwrap()
        .to_string();

    let result = std::panic::catch_unwind(|| {
        let again = shardstore(h, &["cluster", "start", "--targets", "1", "--root", r]);
        assert_eq!(again.status.code(), Some(2));
        assert!(String::from_utf8_lossy(&again.stderr).contains("already running"));

        let status = ok(shardstore(h, &["cluster", "status", "--root", r, "--json"]));
        let nodes: Vec<serde_json::Value> = serde_json::from_str(&status).unwrap();
        assert_eq!(nodes.len(), 5);
        assert!(nodes.iter().all(|n| n["healthy"] == true));

        fs::write(h.join(".shardstore.json"), format!(r#"{{"endpoint": "{endpoint}", "default_bucket": "data"}}"#)).unwrap();
        ok(shardstore(h, &["bucket", "create", "data", "--mirror", "2"]));
        let src = two_record_dir(h);
        let tmpl = h.join("shards/s-%03d.tar");
        ok(shardstore(h, &["shard", "create", "--src", src.to_str().unwrap(), "--dst", tmpl.to_str().unwrap(), "--target-size", "5"]));
        for i in 0..2 {
            let p = h.join(format!("shards/s-{i:03}.tar"));
            ok(shardstore(h, &["put", p.to_str().unwrap(), &format!("data/in/s-{i:03}.tar")]));
        }
        let ls = ok(shardstore(h, &["ls", "data/in/", "--json"]));
        let items: Vec<serde_json::Value> = serde_json::from_str(&ls).unwrap();
        assert_eq!(items.len(), 2);

        // Bare names resolve in the default bucket.
        let p = h.join("shards/s-001.tar");
        ok(shardstore(h, &["put", p.to_str().unwrap(), "top.tar"]));
        let got = h.join("got.tar");
        let dbg = shardstore(h, &["-v", "get", "top.tar", got.to_str().unwrap()]);
        let stderr = String::from_utf8_lossy(&dbg.stderr).into_owned();
        ok(dbg);
        assert_eq!(fs::read(&got).unwrap(), fs::read(h.join("shards/s-001.tar")).unwrap());
        assert_eq!(stderr.matches("redirect").count(), 1, "{stderr}");

        ok(shardstore(h, &["bucket", "create", "resharded"]));
        let rep = ok(shardstore(
            h,
            &["reshard", "--src", "data/in/", "--dst", "resharded", "--order", "random:7", "--target-size", "1MiB", "--min-size", "1"],
        ));
        let rep: serde_json::Value = serde_json::from_str(&rep).unwrap();
        assert_eq!(rep["source_records"], 2);
        assert_eq!(rep["planned"], 1);

        let report = h.join("report.json");
        let csv = h.join("report.csv");
        ok(shardstore(
            h,
            &[
                "bench", "delivery", "--bucket", "data", "--prefix", "in/", "--workers", "2", "--shards", "10", "--report",
                report.to_str().unwrap(), "--csv", csv.to_str().unwrap(),
            ],
        ));
        let v: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
        assert_eq!(v["schema"], "v1");
        assert_eq!(v["ops"], 10);
        assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 4);

        let inflated = h.join("inflated");
        ok(shardstore(
            h,
            &["inflate", "--src", "data/in/", "--factor", "4", "--dst-dir", inflated.to_str().unwrap()],
        ));
        let listed = ok(shardstore(h, &["shard", "ls", inflated.join("inflated-000000.tar").to_str().unwrap(), "--json"]));
        let recs: Vec<serde_json::Value> = serde_json::from_str(&listed).unwrap();
        assert_eq!(recs.len(), 8);

        ok(shardstore(h, &["rm", "data/in/s-000.tar"]));
        assert_eq!(shardstore(h, &["get", "data/in/s-000.tar"]).status.code(), Some(2));
    });

    ok(shardstore(h, &["cluster", "stop", "--root", r]));
    assert_eq!(shardstore(h, &["cluster", "status", "--root", r]).status.code(), Some(2));
    assert!(!root.join("cluster.lock").exists());
    if let Err(e) = result {
        std::panic::resume_unwind(e);
    }
}

#[test]
fn failed_start_cleans_up() {
    let home = tempfile::tempdir().unwrap();
    let root = home.path().join("c");
    // Occupy the port the gateway would take.
    let busy = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = busy.local_addr().unwrap().port().to_string();
    let out = shardstore(home.path(), &["cluster", "start", "--targets", "1", "--root", root.to_str().unwrap(), "--base-port", &port]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!root.join("cluster.lock").exists());
    assert!(!root.join("pids").exists());
}
