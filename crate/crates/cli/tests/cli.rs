use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stica_core::config::parse_config_str;

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.conf")
}

fn stica(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stica"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--config")
        .arg(smoke_config())
        .env_remove("STICA_OUT")
        .output()
        .expect("spawn stica")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn pretrain_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("pretrain");
    let o = stica(&["pretrain"], &run);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("step,epoch,lr,loss_total,loss_vv,loss_va"));
    assert_eq!(metrics.lines().count(), 1 + 16 / 4);
    let ckpt = run.join("checkpoint.stca");
    assert!(ckpt.exists());

    let echo = std::fs::read_to_string(run.join("config.txt")).unwrap();
    let reparsed = parse_config_str(&echo, &[]).unwrap();
    assert_eq!(reparsed.train.epochs, 1);

    let ckpt = ckpt.to_str().unwrap();
    let eval = dir.path().join("eval");
    let o = stica(&["retrieve", "--checkpoint", ckpt], &eval);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = stica(&["probe", "--checkpoint", ckpt], &eval);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = std::fs::read_to_string(eval.join("eval.csv")).unwrap();
    let lines: Vec<&str> = rows.lines().collect();
    assert_eq!(lines[0], "metric,k_or_mode,value");
    assert!(lines[1].starts_with("recall,1,"));
    assert!(lines[2].starts_with("recall,5,"));
    assert!(lines[4].starts_with("probe_test_accuracy,linear,"));

    let maps = dir.path().join("maps");
    let o = stica(&["heatmap", "--checkpoint", ckpt], &maps);
    assert!(o.status.success(), "{}", stderr(&o));
    let pgms = std::fs::read_dir(&maps)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert_eq!(pgms, 2);

    // a checkpoint trained under another objective is refused
    let o = stica(&["retrieve", "--checkpoint", ckpt, "--loss.lambda_vv", "0"], &eval);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn pretrain_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(stica(&["pretrain", "--seed", "4"], &a).status.success());
    assert!(stica(&["pretrain", "--seed", "4"], &b).status.success());
    let read = |p: &Path| std::fs::read(p.join("metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(
        std::fs::read(a.join("checkpoint.stca")).unwrap(),
        std::fs::read(b.join("checkpoint.stca")).unwrap()
    );
}

#[test]
fn retrieve_without_checkpoint_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = stica(&["retrieve"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`checkpoint`"), "{}", stderr(&o));
}

#[test]
fn bench_reports_every_strategy_and_k() {
    let dir = tempfile::tempdir().unwrap();
    let o = stica(&["bench", "--bench.ks", "2,4,8"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "strategy,k,mean_ms,std_ms,peak_bytes");
    assert_eq!(lines.len(), 1 + 6);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = stica(&["pretrain", "--crop.smal_size", "1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("crop.smal_size"));
    let o = stica(&["pretrain", "--crop.small_size=9"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("encoder.grid"), "{}", stderr(&o));
    let o = stica(&["pretrain", "--train.lr"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.stca");
    std::fs::write(&bad, b"STCA but not really").unwrap();
    let o = stica(&["retrieve", "--checkpoint", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = stica(&["probe", "--checkpoint", "/nonexistent/x.stca"], dir.path());
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
}

#[test]
fn stica_out_sets_the_default_root() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_stica"))
        .args(["bench", "--config"])
        .arg(smoke_config())
        .args(["--bench.ks", "2"])
        .env("STICA_OUT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("bench/bench.csv").exists());
    assert!(dir.path().join("bench/config.txt").exists());
}
