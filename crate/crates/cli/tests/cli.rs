use std::path::Path;
use std::process::{Command, Output};

fn bcr(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bcr"))
        .args(args)
        .env("BCR_OUT_ROOT", out)
        .output()
        .expect("binary runs")
}

const TINY: [&str; 8] = [
    "--override",
    "training.epochs=3",
    "--override",
    "training.max_steps=40",
    "--override",
    "exploration.horizon=40",
    "--override",
    "eval_episodes=2",
];

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn selftest_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let o = bcr(&["selftest"], dir.path());
    assert!(o.status.success());
    let s = stdout(&o);
    assert_eq!(s.lines().count(), 5);
    assert!(s.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = bcr(&["train", "--override", "bcr.no_such_key=1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.trim().lines().count(), 1);
    assert!(err.contains("bcr.no_such_key"));
    let o = bcr(&["train", "--config", "/nonexistent.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = bcr(&["train", "--override", "bcr.ratio_cap=-1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_then_eval_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--seed", "4"];
    args.extend(TINY);
    let o = bcr(&args, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert!(s.starts_with("config_hash="));
    assert!(s.contains("seed=4"));
    let run = dir.path().join("exploration-bcr/seed-4");
    for f in ["config.toml", "run.json", "metrics.jsonl", "eval.json", "checkpoints/final.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let traj = dir.path().join("traj.jsonl");
    let ckpt = run.join("checkpoints/final.ckpt");
    let mut args = vec![
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--episodes",
        "2",
        "--record-trajectory",
        traj.to_str().unwrap(),
    ];
    args.extend(TINY);
    let o = bcr(&args, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("episodes=2"));
    assert!(std::fs::metadata(&traj).unwrap().len() > 0);
}

#[test]
fn matrix_writes_report_and_report_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["matrix", "--seeds", "1,2", "--algorithms", "bcr,ppo-baseline", "--workers", "2"];
    args.extend(TINY);
    let o = bcr(&args, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).matches("config_hash=").count(), 4);
    let text = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(text.contains("bcr vs ppo-baseline"));
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let o = bcr(&["report"], dir.path());
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(dir.path().join("report.txt")).unwrap(), text);
}

#[test]
fn config_prints_loadable_toml() {
    let dir = tempfile::tempdir().unwrap();
    let o = bcr(&["config", "--config", "kitchen_causal", "--override", "training.epochs=7"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    let path = dir.path().join("c.toml");
    std::fs::write(&path, &text).unwrap();
    let o2 = bcr(&["config", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(stdout(&o2), text);
    assert!(text.contains("epochs = 7"));
}
