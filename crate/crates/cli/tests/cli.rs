use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

const DEMO: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/demo");

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    /// A workspace with the demo manifests and sources copied next to it.
    fn new() -> Env {
        let dir = tempfile::tempdir().unwrap();
        for entry in fs::read_dir(DEMO).unwrap() {
            let path = entry.unwrap().path();
            fs::copy(&path, dir.path().join(path.file_name().unwrap())).unwrap();
        }
        let env = Env { dir };
        env.ok(&["init"]);
        env
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_odf"))
            .args(args)
            .current_dir(self.dir.path())
            .env_remove("ODF_WORKSPACE")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn code(&self, args: &[&str]) -> i32 {
        self.run(args).status.code().unwrap()
    }

    fn demo(&self) {
        for m in ["orders.yaml", "shipments.yaml", "late_shipments.yaml"] {
            self.ok(&["add", m]);
        }
        self.ok(&["pull", "late_shipments"]);
    }
}

#[test]
fn late_shipments_end_to_end() {
    let env = Env::new();
    env.demo();
    let out = env.ok(&["project", "late_shipments"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines, [
        "order_time\torder_id\tcustomer",
        "2024-03-01T10:30:00.000Z\t2\tbob",
        "2024-03-03T17:45:00.000Z\t4\tada",
    ]);
    assert!(env.ok(&["verify", "late_shipments"]).contains("reproducible"));
    // Replay safety: nothing changes the second time.
    assert_eq!(env.ok(&["pull", "late_shipments"]), "up to date\n");
    assert!(env.ok(&["add", "orders.yaml"]).contains("unchanged"));
    assert!(env.ok(&["ingest", "orders"]).contains("source unchanged"));
    let log = env.ok(&["log", "late_shipments"]);
    assert!(log.contains("ExecuteTransform"));
    let lineage = env.ok(&["lineage", "late_shipments"]);
    assert!(lineage.contains("late_shipments (derivative) <- orders, shipments"), "{lineage}");
}

#[test]
fn trace_prints_root_offsets() {
    let env = Env::new();
    env.demo();
    let out = env.ok(&["trace", "late_shipments", "0"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "late_shipments (derivative) offsets [0]");
    assert!(lines.contains(&"  orders (root) offsets [1]"), "{out}");
    let json = env.ok(&["--output", "json", "trace", "late_shipments", "0"]);
    assert!(json.starts_with("{\"blocks\":"));
    assert_eq!(env.code(&["trace", "late_shipments", "99"]), 1);
}

#[test]
fn project_as_of_is_stable() {
    let env = Env::new();
    env.demo();
    let log = env.ok(&["--output", "json", "log", "orders"]);
    // The system time of the last block.
    let marker = "\"system_time\":\"";
    let at = log.rfind(marker).unwrap() + marker.len();
    let as_of = &log[at..at + 24];
    let before = env.ok(&["project", "orders", "--as-of", as_of]);
    let mut csv = fs::read_to_string(env.path("orders.csv")).unwrap();
    csv.push_str("2024-03-22T12:00:00Z,7,eve\n");
    fs::write(env.path("orders.csv"), csv).unwrap();
    assert!(env.ok(&["ingest", "orders"]).contains("appended 1 records"));
    assert_eq!(env.ok(&["project", "orders", "--as-of", as_of]), before);
    assert_ne!(env.ok(&["project", "orders"]), before);
    let tail = env.ok(&["tail", "orders", "-n", "1"]);
    assert!(tail.lines().nth(1).unwrap().ends_with("\t7\teve"), "{tail}");
}

#[test]
fn tampering_is_a_verification_failure() {
    let env = Env::new();
    env.demo();
    assert_eq!(env.code(&["verify", "shipments", "--integrity-only"]), 0);
    let objects = env.path("objects");
    let mut slice = None;
    for dir in fs::read_dir(&objects).unwrap() {
        for f in fs::read_dir(dir.unwrap().path()).unwrap() {
            let p = f.unwrap().path();
            if fs::read_to_string(&p).is_ok_and(|s| s.contains("2024-03-12T10:00:00.000Z")) {
                slice = Some(p);
            }
        }
    }
    let slice = slice.expect("shipments slice");
    let mut bytes = fs::read(&slice).unwrap();
    bytes[10] ^= 0x04;
    fs::write(&slice, bytes).unwrap();
    let out = env.run(&["verify", "late_shipments"]);
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("shipments: INTEGRITY FAILURE at block seq 2"), "{text}");
}

#[test]
fn manifest_errors() {
    let env = Env::new();
    fs::write(env.path("bad.yaml"), "name: x\nkind: derivative\ninputs: [nope]\nquery: SELECT a FROM nope\n").unwrap();
    let out = env.run(&["add", "bad.yaml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown dataset name \"nope\""));

    let broken = fs::read_to_string(env.path("orders.yaml")).unwrap().replace("type: int64", "type: integer");
    fs::write(env.path("bad.yaml"), broken).unwrap();
    let out = env.run(&["add", "bad.yaml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("source.schema[1].type"));

    env.ok(&["add", "orders.yaml"]);
    fs::write(env.path("bad.yaml"), "name: y\nkind: derivative\ninputs: [orders]\nquery: SELECT nope FROM orders\n").unwrap();
    let out = env.run(&["add", "bad.yaml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("query:"));
    assert_eq!(env.code(&["add", "missing.yaml"]), 3);
}

#[test]
fn exit_codes_and_workspace_discovery() {
    let env = Env::new();
    assert_eq!(env.code(&["frobnicate"]), 1);
    assert_eq!(env.code(&["log", "nope"]), 1);
    assert_eq!(env.code(&["--help"]), 0);
    assert_eq!(env.code(&["init"]), 1);
    let elsewhere = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_odf"))
        .args(["add", &env.path("orders.yaml").display().to_string()])
        .current_dir(elsewhere.path())
        .env("ODF_WORKSPACE", env.dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_odf")).args(["log", "orders"]).current_dir(elsewhere.path()).env_remove("ODF_WORKSPACE").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn set_watermark_and_json_output() {
    let env = Env::new();
    env.demo();
    let out = env.ok(&["--output", "json", "set-watermark", "orders", "2024-04-01T00:00:00Z"]);
    assert!(out.contains("\"new_watermark\":\"2024-04-01T00:00:00.000Z\""));
    assert_eq!(env.code(&["set-watermark", "orders", "2024-03-01T00:00:00Z"]), 1);
    assert_eq!(env.code(&["set-watermark", "orders", "yesterday"]), 1);
    let json = env.ok(&["--output", "json", "pull", "late_shipments"]);
    assert!(json.starts_with("{\"actions\":[{"), "{json}");
}

#[test]
fn push_and_pull_between_workspaces() {
    let a = Env::new();
    a.demo();
    let repo = a.path("repo");
    let repo_s = repo.display().to_string();
    for name in ["orders", "shipments", "late_shipments"] {
        a.ok(&["push", name, &repo_s]);
    }
    assert!(a.ok(&["push", "orders", &repo_s]).contains("already up to date"));

    let b = Env::new();
    let id = a.ok(&["--output", "json", "add", "late_shipments.yaml"]);
    let id = id.split("\"dataset_id\":\"").nth(1).unwrap()[..64].to_string();
    let orders_id = a.ok(&["--output", "json", "add", "orders.yaml"]);
    let orders_id = orders_id.split("\"dataset_id\":\"").nth(1).unwrap()[..64].to_string();
    let shipments_id = a.ok(&["--output", "json", "add", "shipments.yaml"]);
    let shipments_id = shipments_id.split("\"dataset_id\":\"").nth(1).unwrap()[..64].to_string();
    for d in [&orders_id, &shipments_id, &id] {
        b.ok(&["pull-remote", d, &repo_s]);
    }
    assert_eq!(b.ok(&["project", "late_shipments"]), a.ok(&["project", "late_shipments"]));
    assert_eq!(b.code(&["verify", "late_shipments"]), 0);
    assert!(b.ok(&["pull-remote", "orders", &repo_s]).contains("already up to date"));
}

#[test]
fn json_output_is_canonical() {
    let env = Env::new();
    env.demo();
    for args in [
        &["log", "late_shipments"][..],
        &["verify", "late_shipments"],
        &["lineage", "late_shipments"],
        &["project", "orders"],
        &["tail", "shipments"],
    ] {
        let mut full = vec!["--output", "json"];
        full.extend_from_slice(args);
        let out = env.ok(&full);
        let line = out.trim_end_matches('\n');
        let value = odf_core::canonical::decode(line.as_bytes()).unwrap();
        assert_eq!(value.canonical_string(), line, "{args:?}");
    }
}
