use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};

const SMALL: &str = "[EngineSettings]\nrun_id = \"small\"\nreviewer = \"oracle\"\n\n[SimWorldConfig]\nimages = 1000\n\n[TrainingSchedule]\niterations = 800\n";

fn aide(root: &Path) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_aide"));
    c.env("AIDE_RUN_ROOT", root).env_remove("AIDE_ADAPTER_URL").env_remove("RUST_LOG");
    c
}

fn run(root: &Path, args: &[&str]) -> Output {
    aide(root).args(args).output().expect("spawn aide")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config(root: &Path) -> String {
    let path = root.join("small.toml");
    std::fs::write(&path, SMALL).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn stages_run_one_at_a_time_in_order() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small_config(root.path());
    let c = ["--config", cfg.as_str()];

    let early = run(root.path(), &[&c[..], &["update"]].concat());
    assert_eq!(early.status.code(), Some(1), "{}", stdout(&early));

    let scan = run(root.path(), &[&c[..], &["scan"]].concat());
    assert!(scan.status.success());
    assert!(stdout(&scan).contains("trailer"));
    let feed = run(root.path(), &[&c[..], &["feed", "--category", "trailer"]].concat());
    assert!(stdout(&feed).contains("label space version 2"), "{}", stdout(&feed));
    let update = run(root.path(), &[&c[..], &["update"]].concat());
    assert!(stdout(&update).contains("update: novel AP"));
    let verify = run(root.path(), &[&c[..], &["verify"]].concat());
    assert!(stdout(&verify).contains("failed"), "{}", stdout(&verify));
    // without --config the stored configuration is used
    let retrain = run(root.path(), &["--run-id", "small", "retrain"]);
    assert!(retrain.status.success(), "{}", String::from_utf8_lossy(&retrain.stderr));
    assert!(stdout(&retrain).contains("retrain-1"));

    let report = run(root.path(), &["--run-id", "small", "report"]);
    let tsv = stdout(&report);
    assert!(tsv.starts_with("checkpoint\ttraining_usd\tlabeling_usd\tnovel_ap\tknown_ap\tforgetting\n"));
    assert_eq!(tsv.lines().count(), 4);
    let pretty = stdout(&run(root.path(), &["--run-id", "small", "report", "--pretty"]));
    assert!(pretty.contains("Total spend: $"));
}

#[test]
fn exit_codes_follow_error_classes() {
    let root = tempfile::tempdir().unwrap();
    assert_eq!(run(root.path(), &["--run-id", "ghost", "report"]).status.code(), Some(2));

    let bad = root.path().join("bad.toml");
    std::fs::write(&bad, "[EngineSettings]\nmax_rounds = 0\n").unwrap();
    assert_eq!(run(root.path(), &["--config", bad.to_str().unwrap(), "scan"]).status.code(), Some(2));
    assert_eq!(run(root.path(), &["frobnicate"]).status.code(), Some(2));

    let cfg = small_config(root.path());
    assert!(run(root.path(), &["--config", &cfg, "run", "--headless", "--stop-after", "feed"]).status.success());
    assert_eq!(
        run(root.path(), &["--config", &cfg, "--seed", "9", "run"]).status.code(),
        Some(2),
        "a different seed for an existing run is a config error"
    );
    let manifest = root.path().join("runs/small/manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(&manifest, text.replacen("\"seed\": 0", "\"seed\": 1", 1)).unwrap();
    assert_eq!(run(root.path(), &["--run-id", "small", "report"]).status.code(), Some(4));
    std::fs::write(&manifest, text).unwrap();

    let down = aide(root.path())
        .args(["--run-id", "remote", "scan"])
        .env("AIDE_ADAPTER_URL", "http://127.0.0.1:9")
        .output()
        .unwrap();
    assert_eq!(down.status.code(), Some(3), "{}", String::from_utf8_lossy(&down.stderr));
}

#[test]
fn simgen_writes_world_and_stores() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("w");
    let o = run(root.path(), &["--seed", "3", "simgen", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let world: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("world.json")).unwrap()).unwrap();
    assert_eq!(world["config"]["seed"], 3);
    assert_eq!(world["images"], 2000);
    assert!(out.join("pool.store").is_file() && out.join("eval.store").is_file());
}

fn http_get(addr: &str, path: &str) -> String {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut body = String::new();
    s.read_to_string(&mut body).unwrap();
    body
}

#[test]
fn verify_serves_the_review_api() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("human.toml");
    std::fs::write(&cfg, SMALL.replace("oracle", "human")).unwrap();
    let cfg = cfg.to_string_lossy().into_owned();
    assert!(run(root.path(), &["--config", &cfg, "run", "--stop-after", "update"]).status.success());

    let mut child = aide(root.path())
        .args(["--config", &cfg, "verify", "--serve", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().expect("server output").unwrap();
        if let Some(url) = line.split("http://").nth(1) {
            break url.trim().to_string();
        }
    };
    let stats = http_get(&addr, "/api/runs/small/review-stats");
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(stats.starts_with("HTTP/1.1 200"), "{stats}");
    assert!(stats.contains("\"pending\""));
}
