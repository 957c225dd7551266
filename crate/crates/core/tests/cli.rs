mod common;

use std::path::Path;
use std::process::Command;

use wfi_core::cli::{run, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};
use wfi_core::run_store::{read_jsonl, save_checkpoint, RunDir};
use wfi_core::trainer::RunRecord;
use wfi_core::workflow_model::{ExecutorSpec, StepSpec, WorkflowState};

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn wfi(args: &[&str]) -> Out {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("wfi").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    Out {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn toy_config() -> std::path::PathBuf {
    common::toy_dir().join("config.toml")
}

fn train_toy(dir: &Path, extra: &[&str]) -> Out {
    let cfg = toy_config();
    let mut args = vec!["train", "--config", p(&cfg), "--run-dir", p(dir)];
    args.extend_from_slice(extra);
    wfi(&args)
}

fn echo_state() -> WorkflowState {
    WorkflowState::new(
        vec![StepSpec::new(1, "answer", "Echo")],
        vec![ExecutorSpec::llm("Echo", "repeats", "Repeat the input.")],
    )
}

#[test]
fn train_smoke_writes_run_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let o = train_toy(tmp.path(), &[]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let dir = RunDir::open(tmp.path());
    assert!(dir.best().exists());
    assert!(dir.batch_checkpoint(1).exists());
    assert!(dir.ledger().exists());
    let summary: serde_json::Value = serde_json::from_str(o.stdout.trim()).unwrap();
    assert!(summary["calls"].as_u64().unwrap() > 0);
    assert!(summary.get("best_val").is_some());
}

#[test]
fn missing_dataset_exits_2_naming_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_text = std::fs::read_to_string(toy_config())
        .unwrap()
        .replace("train = \"train.jsonl\"", "train = \"nowhere.jsonl\"");
    let cfg = tmp.path().join("config.toml");
    std::fs::write(&cfg, cfg_text).unwrap();
    let run_dir = tmp.path().join("run");
    let o = wfi(&["train", "--config", p(&cfg), "--run-dir", p(&run_dir)]);
    assert_eq!(o.code, EXIT_USAGE);
    assert!(o.stderr.contains("nowhere.jsonl"), "{}", o.stderr);
}

#[test]
fn prompt_only_keeps_sketch() {
    let tmp = tempfile::tempdir().unwrap();
    let o = train_toy(tmp.path(), &["--mode", "prompt_only"]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let dir = RunDir::open(tmp.path());
    let records: Vec<RunRecord> = read_jsonl(&dir.records()).unwrap();
    assert!(records.len() >= 2);
    assert!(records.iter().all(|r| r.sketch_revision == records[0].sketch_revision));
    let ledger = std::fs::read_to_string(dir.ledger()).unwrap();
    let after_bootstrap: Vec<&str> = ledger
        .lines()
        .skip_while(|l| !l.contains("\"InitExecutor\""))
        .skip_while(|l| l.contains("\"InitExecutor\""))
        .collect();
    assert!(!after_bootstrap.is_empty());
    assert!(after_bootstrap.iter().all(|l| !l.contains("\"OptimWorkflow\"") && !l.contains("\"GradWorkflow\"")));
}

#[test]
fn occupied_run_dir_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(train_toy(tmp.path(), &[]).code, EXIT_OK);
    assert_eq!(train_toy(tmp.path(), &[]).code, EXIT_USAGE);
    assert_eq!(train_toy(tmp.path(), &["--force"]).code, EXIT_OK);
}

#[test]
fn replay_reproduces_train() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(train_toy(tmp.path(), &[]).code, EXIT_OK);
    let o = wfi(&["replay", p(tmp.path())]);
    assert_eq!(o.code, EXIT_OK, "{} {}", o.stdout, o.stderr);
    assert!(o.stdout.contains("\"identical\":true"));
    let records = tmp.path().join("records.jsonl");
    let tampered = std::fs::read_to_string(&records).unwrap().replace("\"val_score\":0.0", "\"val_score\":0.25");
    std::fs::write(&records, tampered).unwrap();
    let o = wfi(&["replay", p(tmp.path())]);
    assert_eq!(o.code, EXIT_RUNTIME);
    assert!(o.stdout.contains("records.jsonl"));
}

#[test]
fn eval_worked_example_scores_zero() {
    let dir = common::example_dir();
    let o = wfi(&[
        "eval",
        "--config",
        p(&dir.join("config.toml")),
        "--checkpoint",
        p(&dir.join("after.json")),
    ]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let v: serde_json::Value = serde_json::from_str(o.stdout.trim()).unwrap();
    assert_eq!(v, serde_json::json!({"metric": "em", "mean": 0.0, "n": 1}));
}

#[test]
fn eval_mixed_and_empty() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tmp.path().join("echo.json");
    save_checkpoint(&ck, &echo_state()).unwrap();
    let data = tmp.path().join("mixed.jsonl");
    std::fs::write(
        &data,
        "{\"id\":\"a\",\"question\":\"Paris\",\"answer\":\"paris\"}\n{\"id\":\"b\",\"question\":\"Rome\",\"answer\":\"Madrid\"}\n",
    )
    .unwrap();
    let o = wfi(&["eval", "--checkpoint", p(&ck), "--dataset", p(&data)]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    assert_eq!(o.stdout.trim(), r#"{"mean":0.5,"metric":"em","n":2}"#);

    let empty = tmp.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = wfi(&["eval", "--checkpoint", p(&ck), "--dataset", p(&empty)]);
    assert_eq!(o.code, EXIT_USAGE);
}

#[test]
fn eval_rejects_bad_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tmp.path().join("bad.json");
    std::fs::write(&ck, "{\"schema_version\": 1}").unwrap();
    let data = common::toy_dir().join("test.jsonl");
    let o = wfi(&["eval", "--checkpoint", p(&ck), "--dataset", p(&data)]);
    assert_eq!(o.code, EXIT_USAGE);
}

fn write_records(dir: &Path, scores: &[f64]) {
    let run = RunDir::create(dir).unwrap();
    for (i, s) in scores.iter().enumerate() {
        let r = RunRecord {
            batch_index: i + 1,
            val_score: *s,
            revision: i as u64,
            sketch_revision: 0,
            api_calls_so_far: 10 * (i as u64 + 1),
            cost_so_far_usd: 0.5 * (i as f64 + 1.0),
            timestamp: i as u64,
        };
        run.append_jsonl(&run.records(), &r).unwrap();
    }
}

#[test]
fn curve_is_running_max() {
    let tmp = tempfile::tempdir().unwrap();
    write_records(tmp.path(), &[0.2, 0.5, 0.4]);
    let o = wfi(&["curve", p(tmp.path())]);
    assert_eq!(o.code, EXIT_OK);
    assert_eq!(
        o.stdout,
        "batch_index,val_score,best_so_far,calls,cost\n1,0.2,0.2,10,0.5\n2,0.5,0.5,20,1\n3,0.4,0.5,30,1.5\n"
    );
    let one = tempfile::tempdir().unwrap();
    write_records(one.path(), &[0.7]);
    assert_eq!(wfi(&["curve", p(one.path())]).stdout.lines().count(), 2);
    let none = tempfile::tempdir().unwrap();
    assert_eq!(wfi(&["curve", p(none.path())]).code, EXIT_RUNTIME);
}

#[test]
fn inspect_marks_tool_steps() {
    let ck = common::example_dir().join("after.json");
    let o = wfi(&["inspect", p(&ck)]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let rows: Vec<&str> = o.stdout.lines().skip(2).collect();
    assert_eq!(rows.len(), 6);
    let marked: Vec<usize> = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.contains("(T)"))
        .map(|(i, _)| i + 1)
        .collect();
    assert_eq!(marked, vec![1, 3]);
    assert_eq!(o.stdout, wfi(&["inspect", p(&ck)]).stdout);

    let tmp = tempfile::tempdir().unwrap();
    let single = tmp.path().join("one.json");
    save_checkpoint(&single, &echo_state()).unwrap();
    assert_eq!(wfi(&["inspect", p(&single)]).stdout.lines().skip(2).count(), 1);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(wfi(&["frobnicate"]).code, EXIT_USAGE);
    assert_eq!(wfi(&["train", "--config", "x.toml"]).code, EXIT_USAGE);
    assert_eq!(wfi(&["train", "--config", "x.toml", "--run-dir", "r", "--mode", "sideways"]).code, EXIT_USAGE);
    assert_eq!(wfi(&["--help"]).code, EXIT_OK);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_wfi");
    let tmp = tempfile::tempdir().unwrap();
    let status = Command::new(bin)
        .args(["inspect", p(&tmp.path().join("missing.json"))])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(EXIT_USAGE));
    let ok = Command::new(bin)
        .args(["inspect", p(&common::example_dir().join("after.json"))])
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(EXIT_OK));
}
