use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use patchdiff_core::{checkpoint, data, eval, memprofile};

fn patchdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchdiff"))
        .args(args)
        .env("PATCHDIFF_DESK", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = patchdiff(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stamped(dir: &Path) {
    let resolved = std::fs::read_to_string(dir.join("resolved_config.txt")).unwrap();
    patchdiff_core::kv::KvDoc::parse(&resolved).unwrap();
    let version = std::fs::read_to_string(dir.join("version.txt")).unwrap();
    assert!(version.starts_with("patchdiff-cli "));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_exits_zero_everywhere() {
    for sub in [None, Some("gen-data"), Some("train"), Some("sample"), Some("profile"), Some("eval")] {
        let mut args: Vec<&str> = sub.into_iter().collect();
        args.push("--help");
        let out = patchdiff(&args);
        assert_eq!(out.status.code(), Some(0), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
}

#[test]
fn usage_errors_exit_one() {
    for args in [
        vec!["gen-data", "--dataset", "blobs", "--out", "x"],
        vec!["train"],
        vec!["sample", "--ckpt", "c", "--out", "o"],
        vec!["profile", "--csv", "m.csv"],
        vec!["eval", "--samples-dir", "a", "--ref-dir", "b", "--csv", "c"],
        vec!["gen-data", "--dataset", "faces", "--count", "1", "--out", "x"],
        vec!["bogus"],
        vec![],
    ] {
        let out = patchdiff(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"), "{args:?}");
    }
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let out = patchdiff(&["sample", "--ckpt", s(&missing), "--count", "1", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = patchdiff(&["train", "--n-divisions", "3", "--iters", "1", "--ckpt-dir", s(&dir.path().join("c"))]);
    assert_eq!(out.status.code(), Some(2), "32 is not divisible by 3");
}

#[test]
fn pipeline_smoke() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (data_dir, ckpt, samples, report, mem) = (
        root.join("data"),
        root.join("ckpt"),
        root.join("samples"),
        root.join("eval/report.csv"),
        root.join("mem/memory.csv"),
    );

    ok(&["gen-data", "--dataset", "blobs", "--count", "100", "--size", "32", "--seed", "3", "--out", s(&data_dir)]);
    assert_eq!(data::read_dataset(&data_dir).unwrap().len(), 100);
    stamped(&data_dir);

    let out = ok(&["train", "--data", s(&data_dir), "--iters", "200", "--ckpt-dir", s(&ckpt), "--seed", "1"]);
    assert!(out.contains("iteration 200"));
    stamped(&ckpt);
    assert_eq!(checkpoint::load::<f32>(&ckpt).unwrap().0.iteration, 200);
    let log = std::fs::read_to_string(ckpt.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 201);

    ok(&["sample", "--ckpt", s(&ckpt), "--count", "4", "--seed", "2", "--out", s(&samples)]);
    let imgs = data::read_images(&samples).unwrap();
    assert_eq!(imgs.len(), 4);
    assert!(imgs.iter().all(|i| i.shape() == [1, 32, 32]));
    stamped(&samples);

    ok(&["eval", "--samples-dir", s(&samples), "--ref-dir", s(&data_dir), "--n-divisions", "2", "--csv", s(&report)]);
    let rows = eval::parse_report_csv(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!((rows[0].divisions, rows[0].n_samples), (2, 4));
    assert!(rows[0].proxy_fd.is_finite());
    stamped(report.parent().unwrap());
    assert!(start.elapsed() < Duration::from_secs(300), "pipeline took {:?}", start.elapsed());

    ok(&["profile", "--ckpt", s(&ckpt), "--n-list", "1,2", "--csv", s(&mem)]);
    let rows = memprofile::parse_csv(&std::fs::read_to_string(&mem).unwrap()).unwrap();
    assert_eq!(rows.iter().map(|r| r.divisions).collect::<Vec<_>>(), [1, 2]);
    assert!(rows[1].measured_bytes.unwrap() < rows[0].measured_bytes.unwrap());
    stamped(mem.parent().unwrap());

    // resuming continues the log; a different model in the same directory is refused
    ok(&["train", "--data", s(&data_dir), "--iters", "210", "--ckpt-dir", s(&ckpt), "--seed", "1"]);
    let log = std::fs::read_to_string(ckpt.join("loss.csv")).unwrap();
    let iters: Vec<u64> = log.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(iters, (1..=210).collect::<Vec<_>>());
    let out = patchdiff(&["train", "--data", s(&data_dir), "--iters", "220", "--ckpt-dir", s(&ckpt), "--n-divisions", "4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different model"));
}

#[test]
fn config_file_and_flags_resolve_together() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.txt");
    std::fs::write(
        &cfg,
        "[model]\nbase_channels = 8\nembed_dim = 8\n[train]\ndivisions = 4\nbatch_size = 2\n[data]\ncount = 20\n",
    )
    .unwrap();
    let ckpt = dir.path().join("ckpt");
    ok(&["train", "--config", s(&cfg), "--iters", "2", "--n-divisions", "2", "--ckpt-dir", s(&ckpt)]);
    let (model, train, sched) = checkpoint::read_config(&ckpt).unwrap();
    assert_eq!((model.base_channels, model.divisions, train.divisions), (8, 2, 2));
    assert_eq!((train.batch_size, train.iterations, sched.steps()), (2, 2, 200));
    let resolved = std::fs::read_to_string(ckpt.join("resolved_config.txt")).unwrap();
    assert!(resolved.contains("count = 20"));
}
