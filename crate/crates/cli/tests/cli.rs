//! End-to-end tests of the `ohio` binary: file formats, idempotency, seed
//! override, exit codes, and checkpoint round trips.

use std::path::Path;
use std::process::Command;

fn ohio() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ohio"))
}

fn run_in(dir: &Path, args: &[&str], envs: &[(&str, &str)]) -> std::process::Output {
    let mut cmd = ohio();
    cmd.current_dir(dir).args(args).env_remove("OHIO_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn ohio")
}

#[test]
fn pipeline_files_are_byte_identical_across_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for run in ["a", "b"] {
        for (args, envs) in [
            (
                vec![
                    "collect",
                    "--out",
                    &format!("{run}/raw.jsonl"),
                    "--set",
                    "episodes=4",
                ],
                vec![("OHIO_SEED", "7")],
            ),
            (
                vec![
                    "relabel",
                    "--input",
                    &format!("{run}/raw.jsonl"),
                    "--out",
                    &format!("{run}/rel.jsonl"),
                ],
                vec![("OHIO_SEED", "7")],
            ),
            (
                vec![
                    "train",
                    "--dataset",
                    &format!("{run}/rel.jsonl"),
                    "--out",
                    &format!("{run}/model.json"),
                    "--learn.epochs",
                    "10",
                ],
                vec![("OHIO_SEED", "7")],
            ),
            (
                vec![
                    "eval",
                    "--model",
                    &format!("{run}/model.json"),
                    "--out",
                    &format!("{run}/results.json"),
                    "--eval.reference",
                    "30",
                    "--eval.episodes",
                    "5",
                ],
                vec![("OHIO_SEED", "7")],
            ),
        ] {
            let args: Vec<&str> = args.iter().map(|s| s.as_ref()).collect();
            let out = run_in(dir, &args, &envs);
            assert!(out.status.success(), "command {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        }
    }
    for name in ["raw.jsonl", "raw.jsonl.manifest.json", "rel.jsonl", "model.json", "results.json"] {
        let a = std::fs::read(dir.join("a").join(name)).unwrap();
        let b = std::fs::read(dir.join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between reruns");
    }
}

#[test]
fn ohio_seed_env_var_changes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for (tag, seed) in [("s7", "7"), ("s8", "8")] {
        let out = run_in(
            dir,
            &["collect", "--out", &format!("{tag}.jsonl"), "--set", "episodes=2"],
            &[("OHIO_SEED", seed)],
        );
        assert!(out.status.success());
    }
    let a = std::fs::read(dir.join("s7.jsonl")).unwrap();
    let b = std::fs::read(dir.join("s8.jsonl")).unwrap();
    assert_ne!(a, b, "different OHIO_SEED must change the dataset");
}

#[test]
fn state_only_mode_writes_null_actions() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(
        tmp.path(),
        &[
            "collect",
            "--out",
            "raw.jsonl",
            "--set",
            "episodes=2",
            "--policy.log_actions",
            "false",
        ],
        &[],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(tmp.path().join("raw.jsonl")).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["a"].is_null(), "expected null action, got {}", v["a"]);
    }
}

#[test]
fn corrupt_line_reports_its_number() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(tmp.path(), &["collect", "--out", "raw.jsonl", "--set", "episodes=1"], &[]);
    assert!(out.status.success());
    let mut text = std::fs::read_to_string(tmp.path().join("raw.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let mut corrupted: Vec<String> = lines.iter().map(|s| s.to_string()).collect();
    corrupted[2] = "{not json".to_string();
    text = corrupted.join("\n");
    std::fs::write(tmp.path().join("raw.jsonl"), text).unwrap();
    let out = run_in(tmp.path(), &["relabel", "--input", "raw.jsonl", "--out", "rel.jsonl"], &[]);
    assert_eq!(out.status.code(), Some(2), "data errors exit with code 2");
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "error should name line 3: {err}");
}

#[test]
fn missing_model_file_is_a_clean_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(tmp.path(), &["eval", "--model", "nope.json", "--out", "r.json"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));
}

#[test]
fn empty_dataset_training_fails_with_data_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("empty.jsonl"), "").unwrap();
    let out = run_in(
        tmp.path(),
        &["train", "--dataset", "empty.jsonl", "--out", "model.json"],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_with_code_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_in(tmp.path(), &["collect", "--set", "not-a-pair"], &[]);
    assert_eq!(out.status.code(), Some(1));
    let out = run_in(tmp.path(), &["no-such-command"], &[]);
    assert_eq!(out.status.code(), Some(1));
    let out = run_in(tmp.path(), &["collect", "--out", "x.jsonl"], &[("OHIO_SEED", "abc")]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn dotted_flags_match_set_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let a = run_in(
        dir,
        &["collect", "--out", "a.jsonl", "--set", "episodes=3", "--set", "seed=5"],
        &[],
    );
    assert!(a.status.success());
    // Undotted unknown flags are rejected by the parser.
    let b = run_in(dir, &["collect", "--out", "b.jsonl", "--episodes", "3"], &[]);
    assert_eq!(b.status.code(), Some(1));
    let c = run_in(dir, &["collect", "--out", "c.jsonl", "--set", "episodes=3", "--learn.lr", "0.001", "--set", "seed=5"], &[]);
    assert!(c.status.success(), "{}", String::from_utf8_lossy(&c.stderr));
    let a_bytes = std::fs::read(dir.join("a.jsonl")).unwrap();
    let c_bytes = std::fs::read(dir.join("c.jsonl")).unwrap();
    assert_eq!(a_bytes, c_bytes, "learn.lr must not affect collection");
}

#[test]
fn checkpoint_reload_reproduces_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for args in [
        vec!["collect", "--out", "raw.jsonl", "--set", "episodes=4", "--set", "seed=3"],
        vec!["relabel", "--input", "raw.jsonl", "--out", "rel.jsonl", "--set", "seed=3"],
        vec![
            "train",
            "--dataset",
            "rel.jsonl",
            "--out",
            "model.json",
            "--learn.epochs",
            "15",
            "--set",
            "seed=3",
        ],
    ] {
        let out = run_in(dir, &args, &[]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    // Evaluate twice from the serialized checkpoint: identical numbers.
    for name in ["r1.json", "r2.json"] {
        let out = run_in(
            dir,
            &[
                "eval", "--model", "model.json", "--out", name, "--set", "seed=3",
                "--eval.episodes", "5", "--eval.reference", "30",
            ],
            &[],
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let r1 = std::fs::read(dir.join("r1.json")).unwrap();
    let r2 = std::fs::read(dir.join("r2.json")).unwrap();
    assert_eq!(r1, r2);
}

#[test]
fn config_file_with_flag_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("config.json"),
        serde_json::json!({
            "seed": 4,
            "episodes": 2,
            "env": {"kind": "linear", "noise_std": 0.0},
        })
        .to_string(),
    )
    .unwrap();
    // The flag overrides the file's seed; OHIO_SEED sits between them.
    let out = run_in(
        dir,
        &["collect", "--config", "config.json", "--out", "flag.jsonl", "--set", "seed=9"],
        &[("OHIO_SEED", "7")],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("flag.jsonl.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["seed"], 9);
}
