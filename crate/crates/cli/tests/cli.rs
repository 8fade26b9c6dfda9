use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lightfmp_core::checkpoint::peek_header;
use lightfmp_core::real::DType;
use lightfmp_core::report::{MaskFile, RunReport};

const SMALL: &[&str] = &[
    "--set",
    "model.hidden=[16]",
    "--set",
    "model.embed_dim=4",
    "--set",
    "split.pretrain_size=300",
    "--set",
    "pretrain.epochs=5",
    "--set",
    "continue.epochs=2",
    "--seed",
    "7",
];

fn lightfmp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lightfmp"))
        .args(args)
        .current_dir(cwd)
        .env_remove("LFMP_THREADS")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = lightfmp(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code plus the single stderr line.
fn fails(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = lightfmp(args, cwd);
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error["), "{err}");
    (out.status.code().unwrap(), err)
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().chain(SMALL).copied().collect()
}

fn dataset(dir: &Path) {
    ok(&["gen-synthetic", "--fields", "8", "--informative", "0-2", "--rows", "3000", "--seed", "3", "--out", "d"], dir);
}

#[test]
fn gen_synthetic_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    dataset(p);
    ok(&["gen-synthetic", "--fields", "8", "--informative", "0-2", "--rows", "3000", "--seed", "3", "--out", "e"], p);
    for f in ["data.csv", "schema.toml", "synthetic.toml"] {
        assert_eq!(fs::read(p.join("d").join(f)).unwrap(), fs::read(p.join("e").join(f)).unwrap(), "{f}");
    }
    let header = fs::read_to_string(p.join("d/data.csv")).unwrap();
    assert!(header.starts_with("f0,f1,f2,f3,f4,f5,f6,f7,label\n"));
}

#[test]
fn bad_informative_range_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = fails(&["gen-synthetic", "--fields", "8", "--informative", "5-2", "--rows", "10", "--out", "x"], dir.path());
    assert_eq!(code, 1);
    assert!(err.starts_with("error[usage]"));
    let (code, err) = fails(&["gen-synthetic", "--fields", "8", "--informative", "0-8", "--rows", "10", "--out", "x"], dir.path());
    assert_eq!(code, 1);
    assert!(err.starts_with("error[config]"));
}

#[test]
fn phase_commands_compose_to_run_all() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    dataset(p);
    ok(&with_small(&["run-all", "--data", "d/data.csv", "--schema", "d/schema.toml", "--out", "all"]), p);
    ok(&with_small(&["split", "--data", "d/data.csv", "--schema", "d/schema.toml", "--out", "s"]), p);
    ok(&with_small(&["pretrain", "--split", "s", "--out", "seq"]), p);
    ok(&with_small(&["prune", "--schema", "s/schema.toml", "--input", "seq/m_t.ckpt", "--out", "seq"]), p);
    ok(&with_small(&["continue", "--split", "s", "--input", "seq/m_p.ckpt", "--mask", "seq/mask.json", "--out", "seq"]), p);
    for f in ["m_t.ckpt", "m_p.ckpt", "m_o.ckpt", "mask.json", "training_log.csv", "continue_log.csv"] {
        assert_eq!(fs::read(p.join("all").join(f)).unwrap(), fs::read(p.join("seq").join(f)).unwrap(), "{f}");
    }
    for part in ["train", "val", "test", "pretrain"] {
        let f = format!("{part}.csv");
        assert_eq!(fs::read(p.join("all/split").join(&f)).unwrap(), fs::read(p.join("s").join(&f)).unwrap());
    }

    let report = RunReport::load(p.join("all/report.json")).unwrap();
    let printed = ok(&["eval", "--split", "s", "--input", "seq/m_o.ckpt"], p);
    let eval: serde_json::Value = serde_json::from_str(&printed).unwrap();
    assert_eq!(eval["auc"].as_f64().unwrap(), report.test.auc);
    assert_eq!(eval["logloss"].as_f64().unwrap(), report.test.logloss);
    assert_eq!(report.m_prime, 4);
    assert_eq!(report.recovery, None);

    let log = fs::read_to_string(p.join("all/training_log.csv")).unwrap();
    assert!(log.starts_with("step,task_loss,constraint_loss,total,mean_z,lambda,phi\n"));
    assert_eq!(log.lines().count(), 1 + 5 * 300usize.div_ceil(256));

    // the pretrained checkpoint evaluates under its noise-free mask
    ok(&["eval", "--split", "s", "--input", "seq/m_t.ckpt", "--part", "val"], p);
}

#[test]
fn synthetic_config_reports_recovery_and_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    dataset(p);
    ok(&with_small(&["run-all", "--config", "d/synthetic.toml", "--with-baseline", "--out", "r"]), p);
    let report = RunReport::load(p.join("r/report.json")).unwrap();
    assert!(report.recovery.is_some());
    let b = report.baseline.unwrap();
    assert!(b.tt_ratio > 0.0);
    assert!(report.step_times.baseline_s.is_some());
}

#[test]
fn f64_mode_writes_f64_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    dataset(p);
    ok(&with_small(&["run-all", "--data", "d/data.csv", "--schema", "d/schema.toml", "--f64", "--out", "r"]), p);
    let header = peek_header(&fs::read(p.join("r/m_o.ckpt")).unwrap()).unwrap();
    assert_eq!(header.dtype, DType::F64);
    ok(&["eval", "--split", "r/split", "--input", "r/m_o.ckpt"], p);
    ok(&with_small(&["prune", "--schema", "r/split/schema.toml", "--input", "r/m_t.ckpt", "--out", "again"]), p);
    assert_eq!(fs::read(p.join("r/m_p.ckpt")).unwrap(), fs::read(p.join("again/m_p.ckpt")).unwrap());
}

#[test]
fn artifact_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    dataset(p);
    ok(&with_small(&["run-all", "--data", "d/data.csv", "--schema", "d/schema.toml", "--out", "r"]), p);
    let bytes = fs::read(p.join("r/m_t.ckpt")).unwrap();
    fs::write(p.join("short.ckpt"), &bytes[..bytes.len() / 2]).unwrap();
    let (code, err) = fails(&["prune", "--schema", "d/schema.toml", "--input", "short.ckpt", "--out", "x"], p);
    assert_eq!(code, 2);
    assert!(err.contains("short.ckpt") && err.contains("checksum"), "{err}");

    let (code, _) = fails(&["prune", "--schema", "d/schema.toml", "--input", "missing.ckpt", "--out", "x"], p);
    assert_eq!(code, 2);
    let (code, _) = fails(&["continue", "--split", "r/split", "--input", "r/m_p.ckpt", "--mask", "nope.json", "--out", "x"], p);
    assert_eq!(code, 2);
    // the final checkpoint carries no gate, so it cannot be pruned
    let (code, err) = fails(&["prune", "--schema", "d/schema.toml", "--input", "r/m_o.ckpt", "--out", "x"], p);
    assert_eq!(code, 2, "{err}");

    // a mask from a different pruning ratio does not match m_p
    ok(&with_small(&["prune", "--schema", "d/schema.toml", "--input", "r/m_t.ckpt", "--tau", "0.25", "--out", "q"]), p);
    let (code, err) = fails(&["continue", "--split", "r/split", "--input", "r/m_p.ckpt", "--mask", "q/mask.json", "--out", "x"], p);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    dataset(p);
    for args in [
        vec!["run-all", "--config", "d/synthetic.toml", "--tau", "1.0", "--out", "r"],
        vec!["run-all", "--config", "d/synthetic.toml", "--set", "pretrain.learning_rate=0", "--out", "r"],
        vec!["run-all", "--config", "d/synthetic.toml", "--set", "no.such=1", "--out", "r"],
        vec!["run-all", "--config", "missing.toml", "--out", "r"],
        vec!["run-all", "--out", "r"],
    ] {
        let (code, err) = fails(&args, p);
        assert_eq!(code, 1, "{args:?}: {err}");
    }
    let out = Command::new(env!("CARGO_BIN_EXE_lightfmp"))
        .args(["heatmap", "x.json"])
        .env("LFMP_THREADS", "0")
        .current_dir(p)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn heatmap_over_a_tau_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    dataset(p);
    ok(&with_small(&["split", "--data", "d/data.csv", "--schema", "d/schema.toml", "--out", "s"]), p);
    ok(&with_small(&["pretrain", "--split", "s", "--out", "r"]), p);
    let mut masks = Vec::new();
    for tau in ["0", "0.25", "0.5", "0.75"] {
        let out = format!("t{tau}");
        ok(&with_small(&["prune", "--schema", "s/schema.toml", "--input", "r/m_t.ckpt", "--tau", tau, "--out", &out]), p);
        masks.push(format!("{out}/mask.json"));
    }
    let mut args = vec!["heatmap", "--out", "heat.csv"];
    args.extend(masks.iter().rev().map(String::as_str));
    ok(&args, p);
    let csv = fs::read_to_string(p.join("heat.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 2 * 4);
    assert_eq!(lines[0], "kind,tau,f0,f1,f2,f3,f4,f5,f6,f7");
    assert!(lines[1].starts_with("importance,0,"));
    assert!(lines[4].starts_with("importance,0.75,"));
    assert_eq!(lines[5], "keep,0,1,1,1,1,1,1,1,1");
    let kept: usize = lines[8].split(',').skip(2).map(|v| v.parse::<usize>().unwrap()).sum();
    assert_eq!(kept, 2);

    let single = ok(&["heatmap", &masks[0]], p);
    assert_eq!(single.lines().count(), 3);

    // a mask from another schema is refused
    let mut other = MaskFile::load(p.join(&masks[0])).unwrap();
    other.schema_hash = "0000000000000000".into();
    other.save(p.join("other.json")).unwrap();
    let (code, err) = fails(&["heatmap", &masks[0], "other.json"], p);
    assert_eq!(code, 1);
    assert!(err.starts_with("error[schema]"));
}
