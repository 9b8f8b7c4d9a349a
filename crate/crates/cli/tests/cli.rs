use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hjb-qrnet")).args(args).current_dir(dir).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = "seed = 5\n[train]\nhidden = [6]\n[train.lbfgs]\nmax_iters = 15\n";

#[test]
fn generate_train_evaluate_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.toml"), TINY).unwrap();
    let ok = |args: &[&str]| {
        let o = run(d, args);
        assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    ok(&["--config", "run.toml", "generate", "--trajectories", "2", "--out", "train.csv"]);
    ok(&["--config", "run.toml", "generate", "--trajectories", "2", "--mode", "sphere", "--split", "test", "--out", "test.csv"]);
    let t = ok(&["--config", "run.toml", "train", "--kind", "u-qrnet", "--data", "train.csv", "--out", "u.txt"]);
    assert!(stdout(&t).starts_with("kind,n_train,seconds,final_loss,iterations,stop"));
    let m = ok(&["--config", "run.toml", "test-metrics", "--controller", "u.txt", "--data", "test.csv"]);
    assert_eq!(stdout(&m).lines().count(), 2);
    let e = ok(&["--config", "run.toml", "eig", "--controller", "u.txt"]);
    assert!(stdout(&e).contains("max_real"));

    // the same seed reproduces the dataset byte for byte
    ok(&["--config", "run.toml", "generate", "--trajectories", "2", "--out", "again.csv"]);
    assert_eq!(std::fs::read(d.join("train.csv")).unwrap(), std::fs::read(d.join("again.csv")).unwrap());
}

#[test]
fn lqr_prints_the_gain() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["lqr"]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().count() > 16);
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "[data]\nsize = [8]\n").unwrap();
    assert_eq!(run(d, &["--config", "bad.toml", "lqr"]).status.code(), Some(2));
    std::fs::write(d.join("zero.toml"), "[data]\nsizes = [0]\n").unwrap();
    assert_eq!(run(d, &["--config", "zero.toml", "pipeline", "--out", "out"]).status.code(), Some(2));
    assert_eq!(run(d, &["report", "--results", "missing", "--out", "r"]).status.code(), Some(1));
}
