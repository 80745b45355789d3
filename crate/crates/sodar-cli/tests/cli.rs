//! End-to-end tests of the `sodar` binary: exit codes, reports, manifests
//! and reproducibility.

use std::path::Path;
use std::process::{Command, Output};

fn sodar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sodar"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn file_bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|_| panic!("missing {}", p.display()))
}

fn write_tiny_config(path: &Path) {
    std::fs::write(
        path,
        "img_h=32\nimg_w=32\ngrids=4:4\nsteps=8\nbatch=2\nlr=0.002\nseed=3\n",
    )
    .unwrap();
}

#[test]
fn generate_is_idempotent_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let r = sodar(&[
            "generate", "--seed", "7", "--count", "4", "--size", "32",
            "--max-objects", "2", "--out", out.to_str().unwrap(),
        ]);
        assert_ok(&r);
        assert!(out.join("manifest.txt").exists());
    }
    for i in 0..4 {
        let name = format!("scene_{i:05}.gtf");
        assert_eq!(file_bytes(&a.join(&name)), file_bytes(&b.join(&name)));
        let rle = format!("scene_{i:05}.rle");
        assert_eq!(file_bytes(&a.join(&rle)), file_bytes(&b.join(&rle)));
    }
}

#[test]
fn generate_rejects_zero_count_with_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let r = sodar(&[
        "generate", "--count", "0", "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn generate_refuses_nonempty_dir_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join("existing.txt"), "x").unwrap();
    let r = sodar(&[
        "generate", "--count", "2", "--size", "32", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("not empty"));
    // --force proceeds
    let r = sodar(&[
        "generate", "--count", "2", "--size", "32", "--out", out.to_str().unwrap(), "--force",
    ]);
    assert_ok(&r);
}

#[test]
fn max_objects_one_gives_single_instance_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let r = sodar(&[
        "generate", "--seed", "9", "--count", "3", "--size", "32",
        "--max-objects", "1", "--out", out.to_str().unwrap(),
    ]);
    assert_ok(&r);
    for i in 0..3 {
        let side = std::fs::read_to_string(out.join(format!("scene_{i:05}.rle"))).unwrap();
        let header = side.lines().next().unwrap();
        let n: usize = header.split_whitespace().nth(2).unwrap().parse().unwrap();
        assert_eq!(n, 1);
    }
}

#[test]
fn train_eval_vote_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let cfg = dir.path().join("cfg.txt");
    write_tiny_config(&cfg);

    assert_ok(&sodar(&[
        "generate", "--seed", "5", "--count", "6", "--size", "32",
        "--max-objects", "2", "--out", data.to_str().unwrap(),
    ]));
    assert_ok(&sodar(&[
        "train", "--data", data.to_str().unwrap(), "--config", cfg.to_str().unwrap(),
        "--out", run.to_str().unwrap(),
    ]));
    assert!(run.join("loss_curve.csv").exists());
    assert!(run.join("model/manifest.txt").exists());
    assert!(run.join("manifest.txt").exists());
    let curve = std::fs::read_to_string(run.join("loss_curve.csv")).unwrap();
    assert!(curve.starts_with("step,lr,total,cls,mask"));
    assert_eq!(curve.lines().count(), 9, "header plus one row per step");

    // evaluation is reproducible byte-for-byte
    let eval1 = dir.path().join("eval1");
    let eval2 = dir.path().join("eval2");
    for out in [&eval1, &eval2] {
        assert_ok(&sodar(&[
            "eval", "--model", run.join("model").to_str().unwrap(),
            "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(),
        ]));
    }
    assert_eq!(
        file_bytes(&eval1.join("report.csv")),
        file_bytes(&eval2.join("report.csv"))
    );
    let report = std::fs::read_to_string(eval1.join("report.csv")).unwrap();
    assert!(report.starts_with("metric,value"));
    assert!(eval1.join("detections/scene_00000.txt").exists());

    // voting table
    let votes = dir.path().join("votes");
    assert_ok(&sodar(&[
        "vote", "--model", run.join("model").to_str().unwrap(),
        "--data", data.to_str().unwrap(), "--scheme", "average",
        "--out", votes.to_str().unwrap(),
    ]));
    let table = std::fs::read_to_string(votes.join("votes.csv")).unwrap();
    assert!(table.starts_with("scheme,tau,ap"));
    // 7 tau rows plus the no-voting row
    assert_eq!(table.lines().count(), 9);
}

#[test]
fn eval_with_missing_model_fails_with_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let r = sodar(&[
        "eval", "--model", dir.path().join("nope").to_str().unwrap(),
        "--data", dir.path().join("nope2").to_str().unwrap(),
        "--out", dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(3));
    assert!(!String::from_utf8_lossy(&r.stderr).is_empty());
}

#[test]
fn ablate_agg_emits_matched_pair_with_shared_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.txt");
    std::fs::write(
        &cfg,
        "img_h=32\nimg_w=32\ngrids=4:4\nsteps=4\nbatch=2\nlr=0.002\nseed=11\ndata_train=6\ndata_val=2\n",
    )
    .unwrap();
    let out = dir.path().join("ablate");
    let r = sodar(&[
        "ablate", "--axis", "agg", "--config", cfg.to_str().unwrap(),
        "--out", out.to_str().unwrap(),
    ]);
    assert_ok(&r);
    let table = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "name,seed,ap,ap50,ap75,detections");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("agg-D,11,"));
    assert!(lines[2].starts_with("agg-S,11,"));
}

#[test]
fn bench_flops_minus_mask_ratio_is_quarter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.txt");
    std::fs::write(&cfg, "grids=minus-mask\n").unwrap();
    let out = dir.path().join("flops");
    let r = sodar(&[
        "bench-flops", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]);
    assert_ok(&r);
    let table = std::fs::read_to_string(out.join("flops.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(
        lines[0],
        "level,g_cls,g_mask,rep_macs,agg_macs,total_macs,rep_ratio"
    );
    assert_eq!(lines.len(), 6, "header plus five levels");
    for row in &lines[1..] {
        let ratio: f64 = row.split(',').last().unwrap().parse().unwrap();
        assert_eq!(ratio, 0.25, "row {row}");
    }
}

#[test]
fn every_command_writes_exactly_one_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_ok(&sodar(&[
        "generate", "--seed", "2", "--count", "2", "--size", "32", "--out",
        data.to_str().unwrap(),
    ]));
    let manifests = std::fs::read_dir(&data)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .contains("manifest")
        })
        .count();
    assert_eq!(manifests, 1);
    let text = std::fs::read_to_string(data.join("manifest.txt")).unwrap();
    assert!(text.contains("command=generate"));
    assert!(text.contains("seed=2"));
    assert!(text.contains("input_hash="));
    assert!(text.contains("wall_ms="));
}
