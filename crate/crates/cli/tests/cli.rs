use std::path::Path;
use std::process::{Command, Output};

fn canet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_canet"))
        .args(args)
        .env_remove("CANET_SEED")
        .output()
        .expect("spawn canet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"{
  "model": {"num_classes_a": 4, "proj_dim": 16, "reduction": 4, "spatial_kernel": 3},
  "backbone": {"widths": [4, 8], "strides": [2, 2]},
  "train": {"epochs": 2, "batch_size": 8, "resize_to": 32, "crop_to": 28, "lr": 0.001},
  "data": {"synth_count": 24, "val_fraction": 0.25, "test_fraction": 0.25},
  "seed": 3
}"#;

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn param_count_follows_ablation_flags() {
    let full = canet(&["param-count"]);
    assert!(full.status.success(), "{}", stderr(&full));
    let v: serde_json::Value = serde_json::from_str(&stdout(&full)).unwrap();
    assert_eq!(v["variant"], "canet");
    assert!(v["dependent"].as_u64().unwrap() > 0);

    let jb = canet(&["param-count", "--set", "ablation.joint_baseline=true"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&jb)).unwrap();
    assert_eq!(v["attention"], 0);
    assert_eq!(v["variant"], "joint_baseline");

    let ds = canet(&["param-count", "--set", "ablation.d_specific=true"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&ds)).unwrap();
    assert_eq!(v["dependent"], 0);
    assert!(v["specific"].as_u64().unwrap() > 0);
}

#[test]
fn bad_configs_exit_with_usage_code() {
    let o = canet(&["param-count", "--set", "ablation.joint_baseline=true", "--set", "ablation.dep_a_to_b=true"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("d_specific"), "{}", stderr(&o));
    let o = canet(&["param-count", "--set", "train.epoch=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epoch"));
    let o = canet(&["param-count", "--set", "model.reduction=0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = canet(&["train"]);
    assert_eq!(o.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let o = canet(&[
        "train",
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "ablation.individual_a=true",
        "--set",
        "ablation.individual_b=true",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("config.json").exists(), "work started before flag validation");
}

#[test]
fn gradcheck_passes_and_detects_fault() {
    let o = canet(&["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    for op in ["matmul", "conv2d", "global_max", "channel_avg", "gated_fuse", "canet_joint_loss"] {
        assert!(out.lines().any(|l| l.starts_with("PASS") && l.contains(op)), "{op} missing:\n{out}");
    }
    let o = canet(&["gradcheck", "--inject-fault", "fuse-gate"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stdout(&o).lines().any(|l| l.starts_with("FAIL") && l.contains("gated_fuse")));
    assert!(stderr(&o).contains("gated_fuse"));
}

#[test]
fn train_eval_predict_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let o = canet(&["synth", "--config", &cfg, "--count", "12", "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = data.join("manifest.csv");
    assert!(manifest.exists());

    let run = dir.path().join("run");
    let o = canet(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let hist = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(hist.starts_with("epoch,step,lr,train_loss,eval_joint_ac,eval_ac_a,eval_ac_b\n"));
    assert_eq!(hist.lines().count(), 3);
    assert!(run.join("best/manifest.json").exists());
    assert!(run.join("last/manifest.json").exists());
    let results = std::fs::read_to_string(run.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 2);

    let best = run.join("best");
    let e1 = canet(&["eval", "--checkpoint", best.to_str().unwrap(), "--data", manifest.to_str().unwrap()]);
    let e2 = canet(&["eval", "--checkpoint", best.to_str().unwrap(), "--data", manifest.to_str().unwrap()]);
    assert!(e1.status.success(), "{}", stderr(&e1));
    assert_eq!(e1.stdout, e2.stdout);
    let v: serde_json::Value = serde_json::from_str(&stdout(&e1)).unwrap();
    assert_eq!(v["n"], 12);
    assert!(v["joint_accuracy"].is_number());

    let img = data.join("synth_00000.ppm");
    let p1 = canet(&["predict", "--checkpoint", best.to_str().unwrap(), img.to_str().unwrap()]);
    let p2 = canet(&["predict", "--checkpoint", best.to_str().unwrap(), img.to_str().unwrap()]);
    assert!(p1.status.success(), "{}", stderr(&p1));
    assert_eq!(p1.stdout, p2.stdout);
    let text = stdout(&p1);
    for head in ["a", "b"] {
        let scores: Vec<f64> = text
            .lines()
            .find(|l| l.trim_start().starts_with(&format!("{head} scores:")))
            .unwrap()
            .split(':')
            .nth(1)
            .unwrap()
            .split_whitespace()
            .map(|x| x.parse().unwrap())
            .collect();
        assert!((scores.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        let grade: usize = text
            .lines()
            .find(|l| l.trim_start().starts_with(&format!("{head} grade:")))
            .unwrap()
            .split(':')
            .nth(1)
            .unwrap()
            .trim()
            .parse()
            .unwrap();
        let max = scores.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(scores[grade], max);
    }

    // Grades outside the checkpoint's classes.
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "filename,grade_a,grade_b\ndata/synth_00000.ppm,0,7\n").unwrap();
    let o = canet(&["eval", "--checkpoint", best.to_str().unwrap(), "--data", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let junk = dir.path().join("junk.ppm");
    std::fs::write(&junk, b"not an image").unwrap();
    let o = canet(&["predict", "--checkpoint", best.to_str().unwrap(), junk.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));

    let missing = dir.path().join("nowhere");
    let o = canet(&["eval", "--checkpoint", missing.to_str().unwrap(), "--data", manifest.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("nowhere"));
}

#[test]
fn lambda_sweep_and_kfold_emit_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("sweep");
    let o = canet(&[
        "train",
        "--config",
        &cfg,
        "--out",
        run.to_str().unwrap(),
        "--set",
        "lambda=[0,0.25,0.5,0.75,1.0]",
        "--set",
        "train.epochs=1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 5);
    let results = std::fs::read_to_string(run.join("results.csv")).unwrap();
    let lambdas: Vec<&str> = results.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(lambdas, ["0", "0.25", "0.5", "0.75", "1"]);
    assert!(run.join("lambda_0.75/best/manifest.json").exists());

    let run = dir.path().join("kfold");
    let o = canet(&[
        "train",
        "--config",
        &cfg,
        "--out",
        run.to_str().unwrap(),
        "--set",
        "data.kfold=3",
        "--set",
        "train.epochs=1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let results = std::fs::read_to_string(run.join("results.csv")).unwrap();
    let folds: Vec<&str> = results.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(folds, ["0", "1", "2", "mean"]);
    assert!(run.join("fold_2/history.csv").exists());
}

#[test]
fn seed_comes_from_environment_when_unset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, TINY.replace("\"seed\": 3", "\"synth\": {\"seed\": 1}")).unwrap();
    let run_with = |env: Option<&str>, name: &str| {
        let out = dir.path().join(name);
        let mut c = Command::new(env!("CARGO_BIN_EXE_canet"));
        c.args(["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--set", "train.epochs=1"]);
        match env {
            Some(v) => c.env("CANET_SEED", v),
            None => c.env_remove("CANET_SEED"),
        };
        let o = c.output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
        (v["train"]["seed"].as_u64().unwrap(), std::fs::read(out.join("history.csv")).unwrap())
    };
    let (s, h1) = run_with(Some("17"), "a");
    assert_eq!(s, 17);
    let (_, h2) = run_with(Some("17"), "b");
    assert_eq!(h1, h2);
    let (s, _) = run_with(None, "c");
    assert_eq!(s, 0);
    let o = Command::new(env!("CARGO_BIN_EXE_canet"))
        .args(["param-count"])
        .env("CANET_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
