use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sfa(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfa"))
        .args(args)
        .env("SFA_OUTPUT_ROOT", out)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).trim().to_string()
}

/// Small, fast experiment: short data, few epochs.
const QUICK: [&str; 14] = [
    "--set",
    "data.n_train=60",
    "--set",
    "data.n_dev=20",
    "--set",
    "data.n_test=20",
    "--set",
    "optim.epochs=2",
    "--set",
    "latency.pairs=2",
    "--set",
    "latency.repeats=1",
    "--set",
    "precision=f64",
];

#[test]
fn bottleneck_check_prints_margins() {
    let dir = tempfile::tempdir().unwrap();
    let o = sfa(&["bottleneck-check", "--D", "256", "--r1", "2", "--r2", "2", "--L", "40"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("30.7284"), "{err}");
    assert!(err.contains("+225.2716") && err.contains("+97.2716"), "{err}");
    assert!(err.contains("overall: pass"));
}

#[test]
fn failing_bottleneck_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = sfa(&["bottleneck-check", "--D", "32", "--r1", "4", "--r2", "4", "--L", "200"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("FAIL"));
    let o = sfa(
        &["bottleneck-check", "--D", "32", "--r1", "4", "--L", "200", "--log-base", "2"],
        dir.path(),
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    let o = sfa(&["train", "--config", missing.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains(missing.to_str().unwrap()), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&sfa(&["frobnicate"], dir.path())), 2);
    assert_eq!(code(&sfa(&["bottleneck-check", "--D", "8"], dir.path())), 2);
    assert_eq!(code(&sfa(&["bottleneck-check", "--D", "8", "--L", "4"], dir.path())), 2);
    assert_eq!(
        code(&sfa(&["bottleneck-check", "--D", "8", "--r", "1", "--L", "4", "--log-base", "7"], dir.path())),
        2
    );
    let o = sfa(&["param-count", "--set", "model.nonsense=3"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("model.nonsense"));
    assert_eq!(code(&sfa(&["param-count", "--set", "no-equals-sign"], dir.path())), 2);
}

#[test]
fn help_lists_flags_for_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&str, &[&str]); 7] = [
        ("train", &["--config", "--set", "--out", "--verbose", "--quiet"]),
        ("eval", &["--checkpoint", "--split", "--config", "--set", "--out"]),
        ("gradcheck", &["--tol", "--eps", "--seq-len", "--seed", "--config"]),
        ("ablate", &["--components", "--seeds", "--config"]),
        ("heatmap", &["--checkpoint", "--split", "--index", "--a", "--b"]),
        ("bottleneck-check", &["--D", "--r", "--r1", "--r2", "--L", "--log-base"]),
        ("param-count", &["--config", "--set", "--out"]),
    ];
    for (cmd, flags) in cases {
        let o = sfa(&[cmd, "--help"], dir.path());
        assert_eq!(code(&o), 0);
        let text = stdout(&o);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn gradcheck_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = sfa(&["gradcheck", "--tol", "1e-4"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let path = dir.path().join("gradcheck.json");
    assert_eq!(stdout(&o), path.display().to_string());
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(rep["pass"], true);

    let o = sfa(&["gradcheck", "--tol", "1e-30"], dir.path());
    assert_eq!(code(&o), 1);
    let o = sfa(&["gradcheck", "--set", "model.block.kind=none"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn param_count_reports_budget() {
    let dir = tempfile::tempdir().unwrap();
    let o = sfa(&["param-count"], dir.path());
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let pct = v["added_percent"].as_f64().unwrap();
    assert!((5.0..=10.0).contains(&pct));
    let o = sfa(&["param-count", "--set", "model.block.kind=fa", "--set", "model.block.r=1"], dir.path());
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["per_block"]["total"], 2 * 32 * 32 + 32 + 32);
}

#[test]
fn train_eval_heatmap_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train"];
    args.extend(QUICK);
    let o = sfa(&args, dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = std::path::PathBuf::from(stdout(&o));
    assert!(run.starts_with(dir.path()));
    for f in ["config.json", "metrics.csv", "report.json", "checkpoint.json", "gradcheck.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();

    let ck = run.join("checkpoint.json");
    let cfg = run.join("config.json");
    let eval_out = dir.path().join("eval");
    let o = sfa(
        &[
            "eval",
            "--config",
            cfg.to_str().unwrap(),
            "--checkpoint",
            ck.to_str().unwrap(),
            "--out",
            eval_out.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ev: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval_out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(ev["accuracy"], report["test_accuracy"]);
    assert_eq!(ev["pairs"], 20);

    let o = sfa(
        &[
            "heatmap",
            "--config",
            cfg.to_str().unwrap(),
            "--checkpoint",
            ck.to_str().unwrap(),
            "--a",
            "0,2,95",
            "--b",
            "1,3",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("heatmap.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "token,k0.1,k1.1");
    assert!(lines[3].starts_with("w95,"));

    let o = sfa(
        &["heatmap", "--config", cfg.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap(), "--index", "999"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn identical_argv_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train"];
    args.extend(QUICK);
    let a = sfa(&args, dir.path());
    let b = sfa(&args, dir.path());
    assert_eq!(code(&a), 0);
    assert_eq!(code(&b), 0);
    let (da, db) = (stdout(&a), stdout(&b));
    assert_ne!(da, db);
    let read = |d: &str, f: &str| fs::read(Path::new(d).join(f)).unwrap();
    assert_eq!(read(&da, "metrics.csv"), read(&db, "metrics.csv"));
    assert_eq!(read(&da, "checkpoint.json"), read(&db, "checkpoint.json"));
    assert_eq!(read(&da, "config.json"), read(&db, "config.json"));
}

#[test]
fn bottleneck_violation_blocks_training_without_override() {
    let dir = tempfile::tempdir().unwrap();
    let o = sfa(&["train", "--set", "bottleneck.override=false"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("FAIL"));
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
}

#[test]
fn ablate_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--components", "selection", "--seeds", "0"];
    args.extend(QUICK);
    let o = sfa(&args, dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = std::path::PathBuf::from(stdout(&o));
    let summary = fs::read_to_string(out.join("ablation_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(summary.lines().nth(2).unwrap().starts_with("selection,"));

    let o = sfa(&["ablate", "--components", "nope", "--seeds", "0"], dir.path());
    assert_eq!(code(&o), 2);
}
