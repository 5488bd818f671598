//! End-to-end checks of the `milnet` binary: exit codes, determinism, and
//! the shape of every artefact it writes.

use std::path::Path;
use std::process::{Command, Output};

fn milnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_milnet"))
        .args(args)
        .env_remove("MILNET_SEED")
        .output()
        .expect("binary runs")
}

fn milnet_with_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_milnet"))
        .args(args)
        .env_remove("MILNET_SEED")
        .env(key, value)
        .output()
        .expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn synth_tiny(dir: &Path, seed: &str) {
    let out = milnet(&[
        "synth",
        "--classes",
        "3",
        "--recordings",
        "12",
        "--pos-fraction",
        "0.6",
        "--seed",
        seed,
        "--min-duration",
        "0.3",
        "--max-duration",
        "0.5",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_success(&out);
}

fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort_by(|a, b| a.0.cmp(&b.0));
    files
}

#[test]
fn synth_writes_the_documented_file_set_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth_tiny(&a, "9");
    synth_tiny(&b, "9");

    let snap_a = dir_snapshot(&a);
    assert_eq!(snap_a.len(), 12 + 3, "12 WAVs plus two CSVs and the listing");
    let csvs: Vec<&str> = snap_a
        .iter()
        .filter(|(n, _)| n.ends_with(".csv"))
        .map(|(n, _)| n.as_str())
        .collect();
    assert_eq!(csvs, vec!["strong_labels.csv", "weak_labels.csv"]);
    assert!(snap_a.iter().any(|(n, _)| n == "split.txt"));
    assert_eq!(
        snap_a.iter().filter(|(n, _)| n.ends_with(".wav")).count(),
        12
    );
    // Same seed, byte-identical outputs.
    assert_eq!(snap_a, dir_snapshot(&b));
}

#[test]
fn synth_with_zero_positives_emits_empty_label_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let out = milnet(&[
        "synth",
        "--classes",
        "3",
        "--recordings",
        "6",
        "--pos-fraction",
        "0",
        "--seed",
        "1",
        "--min-duration",
        "0.3",
        "--max-duration",
        "0.4",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_success(&out);
    let weak = std::fs::read_to_string(tmp.path().join("weak_labels.csv")).unwrap();
    for line in weak.lines() {
        assert!(line.ends_with(".wav,"), "unexpected labels in `{line}`");
    }
}

#[test]
fn seed_env_var_is_the_default_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (by_env, by_flag) = (tmp.path().join("env"), tmp.path().join("flag"));
    let out = milnet_with_env(
        &[
            "synth",
            "--recordings",
            "4",
            "--classes",
            "2",
            "--min-duration",
            "0.3",
            "--max-duration",
            "0.4",
            "--out",
            by_env.to_str().unwrap(),
        ],
        "MILNET_SEED",
        "5",
    );
    assert_success(&out);
    let out = milnet(&[
        "synth",
        "--recordings",
        "4",
        "--classes",
        "2",
        "--seed",
        "5",
        "--min-duration",
        "0.3",
        "--max-duration",
        "0.4",
        "--out",
        by_flag.to_str().unwrap(),
    ]);
    assert_success(&out);
    assert_eq!(dir_snapshot(&by_env), dir_snapshot(&by_flag));
}

#[test]
fn features_are_idempotent_and_reject_corrupt_audio() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_tiny(&data, "2");

    let first = milnet(&["features", "--data", data.to_str().unwrap()]);
    assert_success(&first);
    assert!(String::from_utf8_lossy(&first.stdout).contains("extracted 12, skipped 0"));
    let second = milnet(&["features", "--data", data.to_str().unwrap()]);
    assert_success(&second);
    assert!(String::from_utf8_lossy(&second.stdout).contains("extracted 0, skipped 12"));

    // A corrupted WAV fails with a data-error exit code naming the file.
    std::fs::write(data.join("rec0003.wav"), b"RIFFnot really audio").unwrap();
    let third = milnet(&["features", "--data", data.to_str().unwrap()]);
    assert_eq!(third.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&third.stderr).contains("rec0003"));
}

#[test]
fn unknown_flags_and_bad_tokens_are_usage_errors() {
    let out = milnet(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));

    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_tiny(&data, "3");
    let out = milnet(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("run").to_str().unwrap(),
        "--regime",
        "sideways",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn joint_regime_rejects_mismatched_input_streams() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_tiny(&data, "4");
    let out = milnet(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("run").to_str().unwrap(),
        "--regime",
        "joint",
        "--when-input",
        "hnh",
        "--who-input",
        "plain",
        "--epochs",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("single input stream"), "{msg}");
}

fn train_tiny(data: &Path, run: &Path, epochs: &str) -> Output {
    let args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--epochs",
        epochs,
        "--seed",
        "7",
        "--lr",
        "1e-3",
        "--fmaps",
        "2",
        "--gru-units",
        "2",
        "--batch-size",
        "4",
    ];
    milnet(&args)
}

#[test]
fn train_writes_a_self_describing_run_and_eval_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_tiny(&data, "5");
    let run = tmp.path().join("run");
    let out = train_tiny(&data, &run, "2");
    assert_success(&out);
    for f in ["plan.json", "history.csv", "when.ckpt", "who.ckpt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }

    let eval1 = milnet(&[
        "eval",
        "--run",
        run.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert_success(&eval1);
    let metrics1 = std::fs::read(run.join("metrics.json")).unwrap();
    let eval2 = milnet(&[
        "eval",
        "--run",
        run.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert_success(&eval2);
    let metrics2 = std::fs::read(run.join("metrics.json")).unwrap();
    assert_eq!(metrics1, metrics2, "eval is not deterministic");

    let parsed: serde_json::Value = serde_json::from_slice(&metrics1).unwrap();
    let tasks: Vec<&str> = parsed
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["task"].as_str().unwrap())
        .collect();
    assert_eq!(tasks, vec!["when-frames", "who-cliplabels"]);
}

#[test]
fn rerunning_training_with_the_same_seed_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_tiny(&data, "6");
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    assert_success(&train_tiny(&data, &r1, "2"));
    assert_success(&train_tiny(&data, &r2, "2"));
    for f in ["when.ckpt", "who.ckpt", "history.csv"] {
        assert_eq!(
            std::fs::read(r1.join(f)).unwrap(),
            std::fs::read(r2.join(f)).unwrap(),
            "{f} differs between identical runs"
        );
    }
}

#[test]
fn untrained_tagger_scores_at_chance_level() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    // A bigger split keeps the chance-level estimate stable.
    let out = milnet(&[
        "synth", "--classes", "3", "--recordings", "40", "--pos-fraction", "0.6",
        "--seed", "8", "--min-duration", "0.3", "--max-duration", "0.5",
        "--out", data.to_str().unwrap(),
    ]);
    assert_success(&out);
    let run = tmp.path().join("run");
    assert_success(&train_tiny(&data, &run, "0"));
    let eval = milnet(&[
        "eval",
        "--run",
        run.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert_success(&eval);
    let parsed: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("metrics.json")).unwrap()).unwrap();
    let who = parsed
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["task"] == "who-cliplabels")
        .unwrap();
    let auc = who["auc_micro"].as_f64().unwrap();
    assert!((auc - 0.5).abs() <= 0.1, "untrained tagger AUC {auc}");
}

#[test]
fn config_file_sets_values_and_flags_override_it() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_tiny(&data, "10");
    let cfg = tmp.path().join("train.cfg");
    std::fs::write(
        &cfg,
        "# desk-scale settings\nregime = tied\nepochs = 1\nseed = 3\nfmaps = 2\ngru_units = 2\nbatch_size = 4\nlr = 1e-3\n",
    )
    .unwrap();
    let run = tmp.path().join("run");
    let out = milnet(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "11",
    ]);
    assert_success(&out);
    let plan: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("plan.json")).unwrap()).unwrap();
    assert_eq!(plan["regime"], "tied", "config file value ignored");
    assert_eq!(plan["seed"], 11, "flag did not override config file");
    assert_eq!(plan["epochs"], 1);
}

#[test]
fn grid_renders_all_six_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_tiny(&data, "12");
    let out = milnet(&[
        "grid",
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("grid").to_str().unwrap(),
        "--epochs",
        "1",
        "--seed",
        "7",
        "--lr",
        "1e-3",
        "--fmaps",
        "2",
        "--gru-units",
        "2",
    ]);
    assert_success(&out);
    let table = std::fs::read_to_string(tmp.path().join("grid").join("grid.txt")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 7, "header plus six rows:\n{table}");
    assert_eq!(
        lines
            .iter()
            .filter(|l| l.starts_with("Joint [WHEN: 0.5; WHO: 0.5]"))
            .count(),
        2
    );
    assert_eq!(
        lines
            .iter()
            .filter(|l| l.starts_with("Joint [WHEN: 0.5; WHO: 5.0]"))
            .count(),
        2
    );
    assert!(lines[1].starts_with("Separate"));
    assert!(lines[6].starts_with("Tied Weights"));
}

#[test]
fn diverging_training_exits_with_the_numeric_failure_code() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_tiny(&data, "13");
    // An absurd learning rate overflows f32 within an epoch.
    let out = milnet(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("run").to_str().unwrap(),
        "--epochs",
        "2",
        "--seed",
        "7",
        "--lr",
        "1e25",
        "--fmaps",
        "2",
        "--gru-units",
        "2",
        "--batch-size",
        "4",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("numeric failure"));
}

#[test]
fn five_second_clip_caches_a_432_frame_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = milnet(&[
        "synth", "--classes", "2", "--recordings", "2", "--pos-fraction", "0.5",
        "--seed", "1", "--min-duration", "5.0", "--max-duration", "5.0",
        "--out", data.to_str().unwrap(),
    ]);
    assert_success(&out);
    assert_success(&milnet(&["features", "--data", data.to_str().unwrap()]));
    let cache = std::fs::read(data.join("features").join("rec0000.lmel")).unwrap();
    assert_eq!(&cache[..4], b"LMEL");
    let frames = u32::from_le_bytes(cache[4..8].try_into().unwrap());
    let bands = u32::from_le_bytes(cache[8..12].try_into().unwrap());
    assert_eq!((frames, bands), (432, 40));
    assert_eq!(cache.len(), 12 + 432 * 40 * 4);
}
