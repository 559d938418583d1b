//! End-to-end command-line runs on tiny generated data.

use std::path::Path;
use std::process::{Command, Output};

fn fretal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fretal")).args(args).env_remove("FRETAL_OUT").output().expect("spawn fretal")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

#[test]
fn generate_train_evaluate_adapt_round_trip() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let gen = fretal(&[
        "generate-data", "--domain", "blend", "--domain", "grid", "--groups", "40", "--frames-per-group", "2",
        "--quality", "40", "--seed", "5", "--out", s(data.path()),
    ]);
    let summaries = stdout_json(&gen);
    assert_eq!(summaries.as_array().unwrap().len(), 2);
    assert_eq!(summaries[0]["groups"]["adapt"]["real"], 5);
    assert!(data.path().join("manifest.csv").exists());

    let ingested = stdout_json(&fretal(&["ingest", "--root", s(data.path()), "--frames-per-group", "2"]));
    assert_eq!(ingested["domains"].as_array().unwrap().len(), 2);
    assert!(ingested["irregular_groups"].as_array().unwrap().is_empty());
    // ingestion reproduces the generated pixels exactly
    assert_eq!(ingested["domains"][0]["content_hash"], summaries[0]["content_hash"]);

    let teacher = stdout_json(&fretal(&[
        "train-teacher", "--data", s(data.path()), "--frames-per-group", "2", "--domain", "blend", "--max-epochs", "2",
        "--min-source-f1", "0", "--out", s(out.path()),
    ]));
    let ckpt = out.path().join("teachers/blend.ckpt");
    assert!(ckpt.exists());
    assert_eq!(teacher["source_domain"], "blend");

    let eval_args = [
        "evaluate", "--data", s(data.path()), "--frames-per-group", "2", "--model", s(&ckpt), "--domain", "blend",
    ];
    let a = stdout_json(&fretal(&eval_args));
    let b = stdout_json(&fretal(&eval_args));
    assert_eq!(a, b);
    assert_eq!(a["model_hash"], teacher["model_hash"]);
    let c = &a["confusion"];
    let total = ["tp", "fp", "tn", "fn"].iter().map(|k| c[k].as_u64().unwrap()).sum::<u64>();
    let test_groups = ["real", "fake"].iter().map(|k| summaries[0]["groups"]["test"][k].as_u64().unwrap()).sum::<u64>();
    assert_eq!(total, test_groups * 2);

    let zs = fretal(&[
        "zero-shot", "--data", s(data.path()), "--frames-per-group", "2", "--teacher", s(&ckpt), "--out", s(out.path()),
    ]);
    assert!(zs.status.success());
    let table = String::from_utf8(zs.stdout).unwrap();
    assert!(table.starts_with("teacher") && table.contains("blend") && table.contains("grid"));

    let adapted = stdout_json(&fretal(&[
        "adapt", "--data", s(data.path()), "--frames-per-group", "2", "--teacher", s(&ckpt), "--target", "grid",
        "--method", "fretal", "--max-epochs", "2", "--out", s(out.path()),
    ]));
    assert_eq!(adapted["source_samples_read"], 0);
    assert_eq!(adapted["report"]["source_domain"], "blend");
    let run_dir = out.path().join("runs/blend-to-grid/fretal/seed-0");
    for f in ["student.ckpt", "trace.jsonl", "report.json"] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // usage and configuration errors
    assert_eq!(fretal(&["adapt"]).status.code(), Some(1));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "domains = [\"blend\"]\nunknown_key = 3\n").unwrap();
    assert_eq!(fretal(&["run-experiment", "--config", s(&bad)]).status.code(), Some(1));
    assert_eq!(fretal(&["generate-data", "--domain", "nope", "--out", s(dir.path())]).status.code(), Some(1));
    // a pair that adapts on its own source is a protocol violation
    let same = dir.path().join("same.toml");
    std::fs::write(&same, "domains = [\"blend\"]\npairs = [{ source = \"blend\", target = \"blend\" }]\n").unwrap();
    assert_eq!(fretal(&["run-experiment", "--config", s(&same), "--out", s(dir.path())]).status.code(), Some(3));
    // data errors
    let missing = dir.path().join("missing");
    assert_eq!(fretal(&["ingest", "--root", s(&missing)]).status.code(), Some(2));
    assert_eq!(fretal(&["report", "--dir", s(&missing)]).status.code(), Some(2));
    assert_eq!(fretal(&["--help"]).status.code(), Some(0));
}

#[test]
fn report_check_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let runs = serde_json::json!([
        run("ft", 0.9, 0.9),
        run("kd", 0.95, 0.5),
        run("fretal", 0.92, 0.9),
    ]);
    std::fs::write(dir.path().join("runs.json"), runs.to_string()).unwrap();
    let out = fretal(&["report", "--dir", s(dir.path()), "--check"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("a -> b") && text.contains("fretal"));
    let relaxed = fretal(&["report", "--dir", s(dir.path()), "--check", "--margin", "0"]);
    assert_eq!(relaxed.status.code(), Some(0), "{}", String::from_utf8_lossy(&relaxed.stderr));
}

fn run(method: &str, source_f1: f64, target_f1: f64) -> serde_json::Value {
    let report = |domain: &str, f1: f64| {
        serde_json::json!({
            "model_hash": "h", "domain": domain, "split": "test", "group_vote": false,
            "confusion": { "tp": 0, "fp": 0, "tn": 0, "fn": 0 }, "f1": f1, "accuracy": f1
        })
    };
    serde_json::json!({
        "source": "a", "target": "b", "method": method, "seed": 0, "status": "ok",
        "report": {
            "method": method, "source_domain": "a", "target_domain": "b", "seed": 0,
            "source": report("a", source_f1), "target": report("b", target_f1),
            "source_f1": source_f1, "target_f1": target_f1, "avg_f1": (source_f1 + target_f1) / 2.0
        },
        "best_epoch": 1, "epochs": 6, "stop_reason": "early-stop", "source_samples_read": 0
    })
}
