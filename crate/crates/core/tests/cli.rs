use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn hgrl(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hgrl"))
        .args(args)
        .env("HG_RUN_DIR", root)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn train_into(root: &Path, name: &str, extra: &[&str]) -> std::path::PathBuf {
    let dir = root.join(name);
    let mut args = vec!["train", "--run-dir", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    ok(&hgrl(&args, root));
    dir
}

/// Node and edge sets of the DOT subset this tool writes.
fn parse_dot(text: &str) -> (BTreeSet<String>, Vec<(String, String)>) {
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("digraph ") && header.ends_with('{'));
    let mut nodes = BTreeSet::new();
    let mut edges = Vec::new();
    let mut closed = false;
    for line in lines {
        let line = line.trim();
        if line == "}" {
            closed = true;
            continue;
        }
        assert!(!closed, "content after closing brace");
        assert!(line.ends_with("];"), "unterminated statement: {line}");
        let quoted: Vec<&str> = line.split('"').collect();
        if line.contains(" -> ") {
            edges.push((quoted[1].to_string(), quoted[3].to_string()));
        } else {
            nodes.insert(quoted[1].to_string());
        }
    }
    assert!(closed);
    for (a, b) in &edges {
        assert!(
            nodes.contains(a) && nodes.contains(b),
            "dangling edge {a} -> {b}"
        );
    }
    (nodes, edges)
}

#[test]
fn train_writes_metrics_and_manifest() {
    let root = TempDir::new().unwrap();
    let dir = train_into(root.path(), "m3", &["--env", "maze", "--size", "3x3"]);
    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert!(metrics.lines().count() >= 2);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    for f in manifest["files"].as_array().unwrap() {
        let bytes = std::fs::read(dir.join(f["name"].as_str().unwrap())).unwrap();
        let digest: String = Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        assert_eq!(f["sha256"].as_str().unwrap(), digest);
        assert_eq!(f["bytes"].as_u64().unwrap(), bytes.len() as u64);
    }
}

#[test]
fn unknown_environment_is_a_usage_error() {
    let root = TempDir::new().unwrap();
    let out = hgrl(&["train", "--env", "pong"], root.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn cliff_manifest_records_convergence() {
    let root = TempDir::new().unwrap();
    let dir = train_into(root.path(), "cliff", &["--env", "cliffwalking"]);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["converged_at_update"].as_u64().is_some());
    let stdout = ok(&hgrl(&["eval", "--run", "cliff"], root.path()));
    assert!(stdout.contains("mean total reward -13.0000"), "{stdout}");
}

#[test]
fn bench_writes_both_methods() {
    let root = TempDir::new().unwrap();
    train_into(root.path(), "m3", &["--env", "maze", "--size", "3x3"]);
    ok(&hgrl(
        &["bench", "--run", "m3", "--sweeps", "10", "--repeats", "1"],
        root.path(),
    ));
    let mut r = csv::Reader::from_path(root.path().join("m3/bench.csv")).unwrap();
    let headers = r.headers().unwrap().clone();
    assert_eq!(&headers[0], "method");
    let methods: Vec<String> = r.records().map(|x| x.unwrap()[0].to_string()).collect();
    assert_eq!(methods, ["highway", "vanilla"]);
}

#[test]
fn missing_run_exits_four() {
    let root = TempDir::new().unwrap();
    for cmd in ["bench", "eval", "completeness", "export"] {
        let out = hgrl(&[cmd, "--run", "nowhere"], root.path());
        assert_eq!(out.status.code(), Some(4), "{cmd}");
    }
}

#[test]
fn completeness_reflects_training_progress() {
    let root = TempDir::new().unwrap();
    train_into(root.path(), "full", &["--env", "maze", "--size", "5x5"]);
    let full = ok(&hgrl(&["completeness", "--run", "full"], root.path()));
    assert!(full.contains("completeness 100.00%"), "{full}");
    assert!(full.contains("avg 0.00"), "{full}");

    train_into(
        root.path(),
        "partial",
        &[
            "--env",
            "maze",
            "--size",
            "15x15",
            "--frames",
            "1",
            "--actors",
            "1",
            "--episodes-per-update",
            "1",
        ],
    );
    let partial = ok(&hgrl(&["completeness", "--run", "partial"], root.path()));
    let pct: f64 = partial
        .split("completeness ")
        .nth(1)
        .and_then(|s| s.split('%').next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(pct < 100.0, "{partial}");
}

#[test]
fn export_writes_valid_dot() {
    let root = TempDir::new().unwrap();
    let dir = train_into(root.path(), "m5", &["--env", "maze5x5"]);
    ok(&hgrl(&["export", "--run", "m5", "--expanded"], root.path()));
    let (hw_nodes, hw_edges) =
        parse_dot(&std::fs::read_to_string(dir.join("export/highway.dot")).unwrap());
    let (ex_nodes, ex_edges) =
        parse_dot(&std::fs::read_to_string(dir.join("export/expanded.dot")).unwrap());
    assert!(!hw_nodes.is_empty());
    assert!(ex_nodes.len() >= hw_nodes.len());
    assert!(ex_edges.len() >= hw_edges.len());
    assert!(hw_nodes.is_subset(&ex_nodes));
}

#[test]
fn distill_then_evaluate() {
    let root = TempDir::new().unwrap();
    let dir = train_into(root.path(), "m3", &["--env", "maze", "--size", "3x3"]);
    let out = ok(&hgrl(
        &[
            "distill", "--run", "m3", "--epochs", "300", "--hidden", "32",
        ],
        root.path(),
    ));
    assert!(out.contains("greedy agreement"), "{out}");
    assert!(dir.join("approximator.bin").exists());
    let manifest = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    assert!(manifest.contains("approximator.bin"));
    let out = ok(&hgrl(&["eval-hgq", "--run", "m3"], root.path()));
    assert!(out.contains("aggregate mean-return ratio"), "{out}");
}

#[test]
fn eval_hgq_without_approximator_exits_four() {
    let root = TempDir::new().unwrap();
    train_into(root.path(), "m3", &["--env", "maze", "--size", "3x3"]);
    let out = hgrl(&["eval-hgq", "--run", "m3"], root.path());
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn replay_builds_a_graph_or_rejects_stochastic_streams() {
    let root = TempDir::new().unwrap();
    let good = root.path().join("good.csv");
    std::fs::write(
        &good,
        "episode,from,action,next,reward,terminal\n0,1,0,2,0,0\n0,2,0,3,1,1\n1,1,1,3,0,1\n",
    )
    .unwrap();
    let out = ok(&hgrl(
        &["train", "--replay", good.to_str().unwrap()],
        root.path(),
    ));
    assert!(out.contains("2 trajectories"), "{out}");
    assert!(root.path().join("replay/graph.bin").exists());

    let bad = root.path().join("bad.csv");
    std::fs::write(
        &bad,
        "episode,from,action,next,reward,terminal\n0,1,0,2,0,1\n1,1,0,3,0,1\n",
    )
    .unwrap();
    let out = hgrl(&["train", "--replay", bad.to_str().unwrap()], root.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn run_root_comes_from_environment() {
    let root = TempDir::new().unwrap();
    let out = ok(&hgrl(
        &["train", "--env", "maze", "--size", "3x3", "--seed", "4"],
        root.path(),
    ));
    assert!(out.contains("maze3x3-s4"), "{out}");
    assert!(root.path().join("maze3x3-s4/graph.bin").exists());
    ok(&hgrl(&["eval", "--run", "maze3x3-s4"], root.path()));
}

#[test]
fn config_file_is_applied_and_flags_override_it() {
    let root = TempDir::new().unwrap();
    let cfg = root.path().join("run.cfg");
    std::fs::write(&cfg, "env = maze3x3\nseed = 2\ngamma = 0.9\n").unwrap();
    let dir = train_into(
        root.path(),
        "cfg",
        &["--config", cfg.to_str().unwrap(), "--gamma", "0.95"],
    );
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["gamma"].as_f64(), Some(0.95));
    assert_eq!(manifest["env"]["seed"].as_u64(), Some(2));
}
