use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pra"))
        .args(args)
        .env("PRA_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

const SMALL_RUN: &str = r#"{
  "task": "classify",
  "network": {
    "stages": ["ISL(4, [8])", "IRL(4, 4, 2)", "ISL(4, [8])"],
    "taps": [0, 1, 2],
    "head": {"kind": "classifier", "num_classes": 2},
    "options": {"global_width": 16, "head_widths": [16], "dropout": 0.0}
  },
  "train": {"epochs": 1, "batch_size": 4, "lr": 0.05},
  "dataset": {"synthetic": {
    "train": {"classes": ["sphere", "cube"], "points_per_cloud": 24, "count_per_class": 4, "seed": 1},
    "test": {"classes": ["sphere", "cube"], "points_per_cloud": 24, "count_per_class": 2, "seed": 2}
  }},
  "output_dir": "out"
}"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.json");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn missing_config_exits_2() {
    let out = pra(&["train", "--config", "/definitely/not/here.json"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_gradcheck_scope_exits_2() {
    assert_eq!(pra(&["gradcheck", "no_such_op"]).status.code(), Some(2));
}

#[test]
fn gradcheck_softmax_passes() {
    let out = pra(&["gradcheck", "softmax"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("softmax") && text.contains("PASS"), "{text}");
}

#[test]
fn one_epoch_smoke_run_writes_checkpoint_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_RUN);
    let run_dir = dir.path().join("r");
    let out = pra(&["train", "--config", &cfg, "--out", run_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run_dir.join("checkpoint.prak").is_file());
    let csv = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "epoch,lr,train_loss,train_oa,val_oa,val_macc");
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(run_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["status"], "completed");

    let ev = pra(&["eval", "--config", &cfg, "--out", run_dir.to_str().unwrap()]);
    assert_eq!(ev.status.code(), Some(0), "{}", String::from_utf8_lossy(&ev.stderr));
    assert!(run_dir.join("eval.json").is_file());
}

#[test]
fn seed_pinned_runs_have_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL_RUN.replace("\"epochs\": 1", "\"epochs\": 2"));
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let d = dir.path().join(name);
        let out = pra(&["train", "--config", &cfg, "--seed", "7", "--out", d.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        csvs.push(fs::read_to_string(d.join("metrics.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(csvs[0].lines().count(), 3);
}

#[test]
fn diverging_run_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL_RUN.replace("\"lr\": 0.05", "\"lr\": 1e300"));
    let out = pra(&["train", "--config", &cfg, "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL_RUN.replace("\"batch_size\": 4", "\"batch_size\": 1"));
    assert_eq!(pra(&["train", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn bench_sweep_emits_one_row_per_case() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = dir.path().join("sweep.json");
    fs::write(&sweep, r#"{"N": 64, "S": 8, "k": 4, "m": [1, 4], "channels": 8, "repeats": 1}"#).unwrap();
    let out_dir = dir.path().join("b");
    let out = pra(&["bench", "--config", sweep.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("bench.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    // edge columns follow S(S-1)k^2 and S(S-1)m
    for (row, m) in rows.iter().zip([1u64, 4]) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[8].parse::<u64>().unwrap(), 8 * 7 * 16);
        assert_eq!(cols[9].parse::<u64>().unwrap(), 8 * 7 * m);
    }
}

#[test]
fn gen_data_round_trips_through_xyzl_config() {
    let dir = tempfile::tempdir().unwrap();
    let data_cfg = dir.path().join("data.json");
    let splits = r#"{
      "train": {"classes": ["sphere", "cube"], "points_per_cloud": 24, "count_per_class": 4, "seed": 1},
      "test": {"classes": ["sphere", "cube"], "points_per_cloud": 24, "count_per_class": 2, "seed": 2}}"#;
    fs::write(&data_cfg, splits).unwrap();
    let data_dir = dir.path().join("data");
    for _ in 0..2 {
        let out = pra(&["gen-data", "--config", data_cfg.to_str().unwrap(), "--out", data_dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let n = fs::read_dir(data_dir.join("train")).unwrap().count();
    assert_eq!(n, 8 + 1);

    // the same run on the written files matches the in-memory synthetic run
    let synth = write_config(dir.path(), SMALL_RUN);
    let xyzl_text = SMALL_RUN.replace(
        &SMALL_RUN[SMALL_RUN.find("\"dataset\"").unwrap()..SMALL_RUN.find("\"output_dir\"").unwrap()],
        "\"dataset\": {\"xyzl\": {\"train\": \"data/train\", \"test\": \"data/test\"}},\n  ",
    );
    let xyzl = dir.path().join("run_xyzl.json");
    fs::write(&xyzl, xyzl_text).unwrap();
    let mut csvs = Vec::new();
    for (cfg, name) in [(synth.as_str(), "s"), (xyzl.to_str().unwrap(), "x")] {
        let d = dir.path().join(name);
        let out = pra(&["train", "--config", cfg, "--out", d.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        csvs.push(fs::read_to_string(d.join("metrics.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}
