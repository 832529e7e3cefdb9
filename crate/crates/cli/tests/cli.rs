use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mixsep_core::config::RunConfig;

fn mixsep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixsep"))
        .args(args)
        .env_remove("MIXSEP_SEED")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small world and a short run so each test stays quick.
fn small_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.world.sound_pairs = 8;
    cfg.world.speech_pairs = 8;
    cfg.world.extended_triplets = 4;
    cfg.train.batch_size = 4;
    cfg.train.warmup_steps = 2;
    cfg.train.total_steps = 2;
    cfg.train.checkpoint_interval = 0;
    cfg.eval.gallery = 8;
    cfg.eval.k = 2;
    cfg.eval.disentangle_samples = 4;
    let p = dir.join("small.json");
    fs::write(&p, cfg.to_json()).unwrap();
    p
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn default_config_is_printed_and_parses() {
    let out = mixsep(&["print-default-config"]);
    assert_eq!(code(&out), 0);
    let cfg = RunConfig::from_json(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.config_version, 1);
}

#[test]
fn help_lists_subcommands_and_flags() {
    let out = mixsep(&["--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["gen-data", "train", "eval", "inspect", "grad-check", "print-default-config", "--threads"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
    let out = mixsep(&["eval", "--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for flag in ["--checkpoint", "--split", "--task", "--head", "--mixed", "--report", "--data", "--config", "--seed"] {
        assert!(text.contains(flag), "{flag} missing from eval help");
    }
}

#[test]
fn gen_data_default_config_writes_three_splits() {
    let dir = tempfile::tempdir().unwrap();
    let out = mixsep(&["gen-data", "--out", path(dir.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for split in ["sound", "speech", "extended"] {
        assert!(dir.path().join(split).is_dir(), "{split}");
    }
    assert!(dir.path().join("manifest.json").is_file());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 3);
}

#[test]
fn gen_data_is_reproducible_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for d in [&a, &b] {
        assert_eq!(code(&mixsep(&["gen-data", "--config", path(&cfg), "--out", path(d)])), 0);
    }
    assert_eq!(tree(&a), tree(&b));
    let out = Command::new(env!("CARGO_BIN_EXE_mixsep"))
        .args(["gen-data", "--config", path(&cfg), "--out", path(&c)])
        .env("MIXSEP_SEED", "5")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn malformed_config_exits_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\n  \"world\": {\"n_clases\": 4}\n}\n").unwrap();
    let out = mixsep(&["gen-data", "--config", path(&bad), "--out", path(&dir.path().join("o"))]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("n_clases") && err.contains("line 2"), "{err}");

    fs::write(&bad, "{\"config_version\": 1,").unwrap();
    assert_eq!(code(&mixsep(&["gen-data", "--config", path(&bad), "--out", "x"])), 2);
}

#[test]
fn missing_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let missing = dir.path().join("nope");
    let out = mixsep(&[
        "eval", "--config", path(&cfg), "--checkpoint", path(&missing), "--split", "sound", "--task", "grounding",
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn grad_check_on_fresh_model_passes() {
    let out = mixsep(&["grad-check"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let checks: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let checks = checks.as_array().unwrap();
    assert_eq!(checks.len(), 3);
    for c in checks {
        assert!(c["max_rel_error"].as_f64().unwrap() < 1e-3, "{c}");
    }
}

#[test]
fn train_eval_and_inspect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert_eq!(code(&mixsep(&["gen-data", "--config", path(&cfg), "--out", path(&data)])), 0);
    let out = mixsep(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&run), "--total-steps", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(run.join("train_log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 5, "2 warm-up + 3 main steps");
    let saved = RunConfig::load(&run.join("config.json")).unwrap();
    assert_eq!(saved.train.total_steps, 3);

    let report = dir.path().join("report.json");
    let out = mixsep(&[
        "eval", "--config", path(&cfg), "--data", path(&data), "--checkpoint", path(&run), "--split", "sound", "--task",
        "retrieval", "--head", "sound", "--mixed", "--report", path(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let written: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(printed, written);
    assert_eq!(printed["task"], "retrieval");
    assert_eq!(printed["mixed"], true);

    let out = mixsep(&[
        "eval", "--config", path(&cfg), "--data", path(&data), "--checkpoint", path(&run), "--split", "extended", "--task",
        "simul",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let reports: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 2);
    assert!(run.join("eval-simul-extended-total-max.json").is_file());

    let out = mixsep(&[
        "eval", "--config", path(&cfg), "--data", path(&data), "--checkpoint", path(&run), "--split", "sound", "--task",
        "simul",
    ]);
    assert_eq!(code(&out), 2);

    let maps = dir.path().join("maps");
    let out = mixsep(&[
        "inspect", "--config", path(&cfg), "--data", path(&data), "--checkpoint", path(&run), "--split", "extended",
        "--index", "1", "--out", path(&maps),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let written: Vec<_> = fs::read_dir(&maps).unwrap().collect();
    assert_eq!(written.len(), 2);
    for e in written {
        let bytes = fs::read(e.unwrap().path()).unwrap();
        assert!(bytes.starts_with(b"P5"));
    }
}

#[test]
fn train_is_bitwise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let runs = [dir.path().join("r1"), dir.path().join("r2")];
    for r in &runs {
        let out = mixsep(&["--threads", "2", "train", "--config", path(&cfg), "--out", path(r)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(tree(&runs[0]), tree(&runs[1]));
}
