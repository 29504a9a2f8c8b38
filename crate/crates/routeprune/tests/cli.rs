use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_routeprune"))
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.json");
    let out = bin()
        .args([
            "simulate",
            "--seed",
            "1",
            "--num-vision",
            "20",
            "--num-layers",
            "2",
            "--save-trace",
        ])
        .arg(&good)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        bin().arg("validate").arg(&good).status().unwrap().code(),
        Some(0)
    );

    let bad = dir.path().join("bad.json");
    let text =
        std::fs::read_to_string(&good)
            .unwrap()
            .replacen("\"version\":1", "\"version\":2", 1);
    std::fs::write(&bad, text).unwrap();
    let out = bin().arg("validate").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));

    let missing = dir.path().join("missing.json");
    assert_eq!(
        bin().arg("validate").arg(&missing).status().unwrap().code(),
        Some(2)
    );
}

#[test]
fn invalid_flags_exit_one() {
    let out = bin()
        .args([
            "simulate",
            "--num-vision",
            "10",
            "--prune-layers",
            "1",
            "--window",
            "1",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "[synthetic]\nseed = 3\nnum_vision = 40\nnum_text = 4\nnum_experts = 8\ntop_k = 2\nhidden_dim = 8\nnum_layers = 4\n\
         [pruning]\nprune_layers = [1]\nbeta = 0.5\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let status = bin()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .args(["--beta", "0.25", "--out"])
        .arg(&out_dir)
        .status()
        .unwrap();
    assert!(status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["final_vision_tokens"], 10);
    let csv = std::fs::read_to_string(out_dir.join("layers.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn flops_prints_both_variants_and_writes_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let heat = dir.path().join("heat.csv");
    let out = bin()
        .args(["flops", "--preset", "deepseek30", "--heatmap"])
        .arg(&heat)
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("vision-only") && stdout.contains("whole-seq"));
    assert!(stdout.contains("[differs from the formula]"));
    let csv = std::fs::read_to_string(heat).unwrap();
    assert_eq!(csv.lines().count(), 31);
    assert!(csv.lines().next().unwrap().ends_with("k6"));
}

#[test]
fn analyze_and_prune_on_saved_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.json");
    assert!(bin()
        .args([
            "simulate",
            "--seed",
            "2",
            "--num-vision",
            "30",
            "--num-layers",
            "3",
            "--save-trace"
        ])
        .arg(&trace)
        .output()
        .unwrap()
        .status
        .success());
    let out = bin()
        .args(["analyze", "--trace"])
        .arg(&trace)
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["layers"].as_array().unwrap().len(), 3);

    let out = bin()
        .args(["prune", "--trace"])
        .arg(&trace)
        .args([
            "--prune-layers",
            "1",
            "--beta",
            "0.5",
            "--start-layer",
            "2",
            "--reduced",
            "2",
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["final_vision_tokens"], 15);
}
