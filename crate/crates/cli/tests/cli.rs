use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn icrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icrl"))
        .args(args)
        .env_remove("ICRL_ENDPOINT")
        .env_remove("ICRL_API_KEY")
        .output()
        .expect("spawn icrl")
}

fn ok(args: &[&str]) -> String {
    let out = icrl(args);
    assert!(
        out.status.success(),
        "icrl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn run(dir: &Path, overrides: &[&str]) {
    let out = dir.to_str().unwrap();
    let mut args = vec!["run", "--out", out];
    for o in overrides {
        args.extend(["--override", o]);
    }
    ok(&args);
}

#[test]
fn oracle_run_has_zero_regret_and_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("explorative.toml");
    std::fs::write(&cfg, "algorithm = \"explorative\"\nmax_steps = 100\neval_every = 50\n").unwrap();
    let dir = tmp.path().join("run");
    ok(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--override",
        "backend=oracle",
        "--out",
        dir.to_str().unwrap(),
    ]);
    for f in [
        "config.toml",
        "runlog.jsonl",
        "split.jsonl",
        "summary.json",
        "regret.csv",
        "train_accuracy.csv",
        "test_accuracy.csv",
    ] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let s = summary(&dir);
    assert_eq!(s["final_regret"], 0);
    assert_eq!(s["steps"], 100);
    assert_eq!(s["status"], "completed");
}

#[test]
fn k_zero_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let out = icrl(&[
        "run",
        "--override",
        "algorithm=approximate",
        "--override",
        "k=0",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("K must be ≥ 1"));
    assert!(!dir.exists(), "no work before validation");
}

#[test]
fn config_errors_are_listed_together() {
    let tmp = tempfile::tempdir().unwrap();
    let out = icrl(&[
        "run",
        "--override",
        "p_keep=2.0",
        "--override",
        "eval_every=0",
        "--override",
        "bogus=1",
        "--out",
        tmp.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bogus"), "{err}");
}

#[test]
fn published_defaults_are_echoed_in_the_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("published.toml");
    std::fs::write(
        &cfg,
        "p_keep = 0.1\nk = 8\neval_every = 500\nmax_steps = 10\n\n[data]\ntest_n = 500\n",
    )
    .unwrap();
    let dir = tmp.path().join("run");
    ok(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--override",
        "backend=oracle",
        "--out",
        dir.to_str().unwrap(),
    ]);
    let snap = std::fs::read_to_string(dir.join("config.toml")).unwrap();
    for line in ["p_keep = 0.1", "k = 8", "eval_every = 500", "test_n = 500"] {
        assert!(snap.lines().any(|l| l == line), "{line:?} missing from\n{snap}");
    }
}

#[test]
fn report_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    run(&dir, &["max_steps=200", "eval_every=100"]);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        ok(&["report", dir.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    }
    for f in ["summary.json", "regret.csv", "train_accuracy.csv", "test_accuracy.csv"] {
        let x = std::fs::read(a.join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.join(f)).unwrap(), "{f}");
        // the run's own report matches a fresh one
        assert_eq!(x, std::fs::read(dir.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn truncated_log_gives_prefix_metrics_and_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let full = tmp.path().join("full");
    run(&full, &["max_steps=1000", "eval_every=250", "data.test_n=50"]);

    let cut = tmp.path().join("cut");
    std::fs::create_dir(&cut).unwrap();
    std::fs::copy(full.join("config.toml"), cut.join("config.toml")).unwrap();
    let text = std::fs::read_to_string(full.join("runlog.jsonl")).unwrap();
    let kept: Vec<&str> = text
        .lines()
        .take_while(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            !(v["type"] == "step" && v["t"].as_u64().unwrap() > 500) && v["type"] != "end"
        })
        .collect();
    std::fs::write(cut.join("runlog.jsonl"), kept.join("\n") + "\n").unwrap();
    let out = icrl(&["report", cut.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("truncated"));

    let s = summary(&cut);
    assert_eq!(s["truncated"], true);
    assert_eq!(s["status"], "truncated");
    assert_eq!(s["steps"], 500);
    for f in ["regret.csv", "train_accuracy.csv", "test_accuracy.csv"] {
        let whole = std::fs::read_to_string(full.join(f)).unwrap();
        let part = std::fs::read_to_string(cut.join(f)).unwrap();
        assert!(whole.starts_with(&part), "{f} is not a prefix");
        assert!(part.len() < whole.len(), "{f}");
    }
}

#[test]
fn corrupted_log_names_first_bad_event() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    run(&dir, &["max_steps=20", "eval_every=10", "data.test_n=20"]);
    let path = dir.join("runlog.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    // the step at t=5 claims a different prompt hash
    let idx = lines
        .iter()
        .position(|l| l.contains("\"type\":\"step\"") && l.contains("\"t\":5,"))
        .unwrap();
    let mut v: Value = serde_json::from_str(&lines[idx]).unwrap();
    v["prompt_hash"] = Value::String("0".repeat(64));
    lines[idx] = v.to_string();
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();

    let out = icrl(&[
        "report",
        dir.to_str().unwrap(),
        "--out",
        tmp.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("t=5"), "{err}");

    // malformed JSON is reported by event index
    lines[3] = "{not json".into();
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let out = icrl(&[
        "report",
        dir.to_str().unwrap(),
        "--out",
        tmp.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("event 3 (line 4)"));
}

#[test]
fn compare_shows_ratio_and_flags_lowest_regret() {
    let tmp = tempfile::tempdir().unwrap();
    let explorative = tmp.path().join("explorative");
    let approximate = tmp.path().join("approximate");
    let naive = tmp.path().join("naive");
    let common = ["max_steps=300", "eval_every=100", "data.test_n=50"];
    run(&explorative, &[&common[..], &["algorithm=explorative"]].concat());
    run(&approximate, &[&common[..], &["algorithm=approximate"]].concat());
    run(
        &naive,
        &[&common[..], &["algorithm=naive", "backend=parrot_last_positive"]].concat(),
    );

    let table = ok(&[
        "compare",
        explorative.to_str().unwrap(),
        approximate.to_str().unwrap(),
        naive.to_str().unwrap(),
    ]);
    let header = table.lines().next().unwrap();
    assert!(header.contains("ratio"), "{table}");
    let row = |name: &str| table.lines().find(|l| l.starts_with(name)).unwrap().to_string();
    assert!(row("explorative").ends_with('*'), "{table}");
    assert!(!row("naive").ends_with('*'), "{table}");
    let regret = |d: &Path| summary(d)["final_regret"].as_u64().unwrap();
    assert!(regret(&naive) > regret(&explorative));
    // the cheapest run has ratio 1
    let ratio = |r: String| r.split_whitespace().nth(5).unwrap().parse::<f64>().unwrap();
    assert_eq!(ratio(row("approximate")), 1.0, "{table}");
    assert!(ratio(row("explorative")) > 1.0);
}

#[test]
fn compare_rejects_single_run_and_mismatched_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    run(&a, &["max_steps=10", "data.test_n=20"]);
    let out = icrl(&["compare", a.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let b = tmp.path().join("b");
    run(
        &b,
        &[
            "max_steps=10",
            "data.test_n=20",
            "data.source.kind=synthetic",
            "data.source.labels=5",
        ],
    );
    let out = icrl(&["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("label space"));

    let c = tmp.path().join("c");
    run(&c, &["max_steps=10", "data.test_n=20", "seed=9"]);
    let out = icrl(&["compare", a.to_str().unwrap(), c.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn replay_regenerates_identical_log() {
    let tmp = tempfile::tempdir().unwrap();
    for (name, alg) in [("e", "explorative"), ("a", "approximate"), ("s", "supervised_icl")] {
        let dir = tmp.path().join(name);
        run(
            &dir,
            &[
                &format!("algorithm={alg}"),
                "max_steps=200",
                "eval_every=100",
                "data.test_n=50",
            ],
        );
        let stdout = ok(&["replay", dir.to_str().unwrap()]);
        assert!(stdout.contains("identical"), "{stdout}");
        assert_eq!(
            std::fs::read(dir.join("runlog.jsonl")).unwrap(),
            std::fs::read(dir.join("replay/runlog.jsonl")).unwrap()
        );
    }
}

#[test]
fn seed_flag_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for (dir, seed) in [(&a, "1"), (&b, "2")] {
        ok(&[
            "run",
            "--seed",
            seed,
            "--override",
            "max_steps=50",
            "--override",
            "data.test_n=20",
            "--out",
            dir.to_str().unwrap(),
        ]);
    }
    assert_eq!(summary(&a)["seed"], 1);
    assert_ne!(summary(&a)["split_fingerprint"], summary(&b)["split_fingerprint"]);
}

#[test]
fn capacity_prints_one_line_per_window() {
    let out = ok(&["capacity", "--window", "4096", "--window", "8192"]);
    let rows: Vec<(usize, usize)> = out
        .lines()
        .skip(1)
        .map(|l| {
            let mut it = l.split('\t').map(|x| x.parse().unwrap());
            (it.next().unwrap(), it.next().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].1 > 0 && rows[0].1 < rows[1].1, "{out}");
}

#[test]
fn unreachable_endpoint_is_a_transport_error_with_partial_log() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let out = icrl(&[
        "run",
        "--override",
        "backend.kind=remote_chat",
        "--override",
        "backend.endpoint=http://127.0.0.1:9",
        "--override",
        "backend.model=m",
        "--override",
        "backend.max_retries=0",
        "--override",
        "max_steps=5",
        "--override",
        "data.test_n=3",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(dir.join("runlog.jsonl")).unwrap();
    assert!(log.lines().next().unwrap().contains("\"type\":\"header\""));
    assert!(log.lines().last().unwrap().contains("\"aborted\""));
    assert_eq!(summary(&dir)["status"], "aborted");
}
