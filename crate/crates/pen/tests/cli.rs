//! End-to-end tests of the `pen` binary: exit codes and artifact shapes.

use std::process::Command;

fn pen() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pen"))
}

const SMALL: &[&str] = &[
    "--set",
    "corpus.synthetic.n_train=24",
    "--set",
    "corpus.synthetic.n_test=8",
    "--set",
    "layout.len_infer=6",
    "--set",
    "layout.len_demo=3",
    "--set",
    "encoder.dim=8",
    "--set",
    "trainer.epochs=2",
    "--set",
    "trainer.batch_size=8",
];

#[test]
fn assemble_limit_prints_that_many_lines() {
    let out = pen().arg("assemble").args(SMALL).args(["--limit", "2"]).output().unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 2);
    for line in lines {
        assert!(line.starts_with("id=syn-train-"), "unexpected line {line:?}");
        assert!(line.contains("mask="), "line lacks the special positions: {line:?}");
    }
}

#[test]
fn unknown_verb_exits_one() {
    let out = pen().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_flag_value_exits_one() {
    let out = pen().args(["assemble", "--limit"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_errors_exit_two() {
    let out = pen()
        .args(["train", "--set", "encoder.kind=\"file\"", "--set", "corpus.synthetic.n_train=8"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("archive_path"));
}

#[test]
fn runtime_errors_exit_three() {
    let out = pen()
        .args(["eval", "--checkpoint", "/nonexistent/model.penw"])
        .args(SMALL)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn help_exits_zero() {
    let out = pen().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn train_writes_checkpoint_and_snapshot_then_eval_loads_it() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = pen().arg("train").args(SMALL).args(["--out", run.to_str().unwrap()]).output().unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("model.penw").exists());
    assert!(run.join("config.toml").exists());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().filter(|l| l.starts_with("epoch")).count(), 2);

    let out = pen()
        .arg("eval")
        .args(SMALL)
        .args(["--checkpoint", run.join("model.penw").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(metrics["accuracy"].is_number());
    assert!(metrics["macro_f1"].is_number());
}

#[test]
fn export_features_has_header_and_rows() {
    let out = pen().arg("export-features").args(SMALL).args(["--limit", "3"]).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("id\tlabel\tmask_0"));
    assert!(lines[0].ends_with("s_hateful\ts_non_hateful"));
}

#[test]
fn ablate_emits_requested_rows_as_json() {
    let out = pen()
        .arg("ablate")
        .args(SMALL)
        .args(["--grid", "full,wo_pcl", "--seeds", "0,1"])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let json_start = stdout.find('[').unwrap();
    let rows: serde_json::Value = serde_json::from_str(&stdout[json_start..]).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert_eq!(rows[0]["variant"], "full");
    assert_eq!(rows[1]["variant"], "wo_pcl");
    assert_eq!(rows[0]["seeds"], 2);
}

#[test]
fn oracle_check_passes() {
    let out = pen().args(["oracle-check", "--seed", "1"]).output().unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("all oracle checks passed"));
}

#[test]
fn identical_runs_print_identical_output() {
    let run = || pen().arg("train").args(SMALL).output().unwrap();
    let a = run();
    let b = run();
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}
