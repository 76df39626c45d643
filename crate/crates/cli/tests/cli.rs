use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_v2x-coop")).args(args).output().expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn error_of(out: &Output) -> Value {
    assert!(!out.status.success());
    let v: Value = serde_json::from_slice(&out.stderr).expect("stderr is a JSON error object");
    v["error"].clone()
}

fn micro_config(dir: &Path, scenarios: usize) -> String {
    let path = dir.join("config.json");
    let cfg = json!({
        "model": { "dim": 16, "ffn_hidden": 32, "experts": 4, "top_k": 2, "encoder_layers": 2,
                   "decoder_layers": 2, "n_track": 8, "n_motion": 4 },
        "scenarios": scenarios,
    });
    fs::write(&path, cfg.to_string()).unwrap();
    path.display().to_string()
}

#[test]
fn simulate_writes_outputs_and_bps_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path(), 2);
    let out = dir.path().join("run");
    let out_s = out.display().to_string();
    let v = ok_json(&["simulate", "--seed", "3", "--config", &cfg, "--out", &out_s]);
    assert_eq!(v["scenes"], 2);
    assert!(v["timings_ms"]["ego_ms"].as_f64().unwrap() > 0.0);
    for f in ["config.json", "report.json", "report.csv", "scenes.json", "messages.bin", "ego.ckpt", "infra.ckpt"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("scene,"));

    // same seed, same bytes
    let again = dir.path().join("again");
    ok_json(&["simulate", "--seed", "3", "--config", &cfg, "--out", &again.display().to_string()]);
    assert_eq!(fs::read(out.join("report.json")).unwrap(), fs::read(again.join("report.json")).unwrap());
    assert_eq!(fs::read(out.join("messages.bin")).unwrap(), fs::read(again.join("messages.bin")).unwrap());

    let msgs = out.join("messages.bin").display().to_string();
    let b = ok_json(&["bps", "--messages", &msgs]);
    assert!(b["bps"].as_f64().unwrap() > 0.0);
    let per: f64 = b["messages"].as_array().unwrap().iter().map(|m| m["payload_bytes"].as_f64().unwrap()).sum();
    assert_eq!(b["bps"].as_f64().unwrap(), per * 2.0);
    let capped = ok_json(&["bps", "--messages", &msgs, "--cap", "1000"]);
    assert!(capped["constrained_bps"].as_f64().unwrap() <= 1000.0);

    // the saved ego checkpoint reproduces the run
    let ckpt = out.join("ego.ckpt").display().to_string();
    let third = dir.path().join("third");
    ok_json(&["simulate", "--seed", "3", "--config", &cfg, "--out", &third.display().to_string(), "--ego-checkpoint", &ckpt]);
    assert_eq!(fs::read(out.join("report.json")).unwrap(), fs::read(third.join("report.json")).unwrap());
}

#[test]
fn ablate_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path(), 1);
    let grid = dir.path().join("grid.json");
    fs::write(
        &grid,
        r#"[0, 15, {"perception_fusion": true, "prediction_fusion": false, "moe_encoder": false, "moe_decoder": false}]"#,
    )
    .unwrap();
    let out = dir.path().join("abl");
    let v = ok_json(&["ablate", "--grid", &grid.display().to_string(), "--config", &cfg, "--out", &out.display().to_string()]);
    assert_eq!(v["rows"].as_array().unwrap().len(), 3);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert!(csv.starts_with("P-Level,M-Level,Enc,Dec,mAP,AMOTA,minADE,L2-1s,L2-2s,L2-3s,L2-Avg,Collision-Avg"));

    fs::write(&grid, "[3, 3]").unwrap();
    let e = error_of(&run(&["ablate", "--grid", &grid.display().to_string(), "--config", &cfg]));
    assert_eq!(e["kind"], "config");

    let s = ok_json(&["sweep", "--budgets", "0,500,inf", "--config", &cfg]);
    let pts = s["points"].as_array().unwrap();
    assert_eq!(pts.len(), 3);
    assert_eq!(pts[0]["realized_bps"], 0.0);
    assert!(pts[2]["budget_bps"].is_null());

    let e = error_of(&run(&["sweep", "--budgets", "10,lots", "--config", &cfg]));
    assert_eq!(e["kind"], "config");
    let e = error_of(&run(&["sweep", "--budgets", "100,10", "--config", &cfg]));
    assert_eq!(e["kind"], "config");
}

#[test]
fn train_smoke_writes_history_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("train");
    let v = ok_json(&["train-smoke", "--steps", "5", "--lr", "0.001", "--out", &out.display().to_string()]);
    assert!(v["final"]["total"].as_f64().unwrap() < v["initial"]["total"].as_f64().unwrap());
    assert_eq!(fs::read_to_string(out.join("history.csv")).unwrap().lines().count(), 7);
    assert!(out.join("ego.ckpt").is_file());

    let e = error_of(&run(&["train-smoke", "--steps", "0"]));
    assert_eq!(e["kind"], "config");
}

#[test]
fn metrics_on_hand_files() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.json");
    let gt = dir.path().join("gt.json");
    let car = |x: f64, score: f64| json!({ "center": [x, 0.0], "extent": [4.0, 2.0], "heading": 0.0, "score": score });
    let expert: Vec<[f64; 2]> = (1..=6).map(|t| [2.0 * t as f64, 0.0]).collect();
    let plan: Vec<[f64; 2]> = expert.iter().map(|p| [p[0], 1.0]).collect();
    fs::write(
        &pred,
        json!({
            "detections": [car(0.0, 0.9)],
            "trajectories": { "agents": 1, "modes": 1, "steps": 2, "points": [1.0, 0.0, 2.0, 0.0], "scores": [1.0] },
            "plan": plan,
        })
        .to_string(),
    )
    .unwrap();
    fs::write(
        &gt,
        json!({
            "detections": [car(0.0, 1.0), car(20.0, 1.0)],
            "futures": [[[1.0, 1.0], [2.0, 1.0]]],
            "plan": expert,
        })
        .to_string(),
    )
    .unwrap();
    let (p, g) = (pred.display().to_string(), gt.display().to_string());
    let v = ok_json(&["metrics", "--pred", &p, "--gt", &g]);
    assert_eq!(v["mAP"], 0.5);
    assert_eq!(v["motion"]["min_ade"], 1.0);
    assert_eq!(v["planning"]["l2_avg"], 1.0);
    assert!(v.get("occupancy_iou").is_none());

    let v = ok_json(&["metrics", "--pred", &p, "--gt", &g, "--criterion", "center-distance"]);
    assert_eq!(v["mAP"], 0.5);

    fs::write(&gt, "{}").unwrap();
    assert_eq!(error_of(&run(&["metrics", "--pred", &p, "--gt", &g]))["kind"], "config");
    fs::write(&gt, "{ not json").unwrap();
    assert_eq!(error_of(&run(&["metrics", "--pred", &p, "--gt", &g]))["kind"], "parse");
}

#[test]
fn gradcheck_reports_every_case() {
    let v = ok_json(&["gradcheck", "--coords", "1"]);
    let names: Vec<&str> = v["cases"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(
        names,
        ["perceptron", "attention", "moe_layer", "encoder_layer", "track_fusion", "traj_fusion", "joint_loss"]
    );
    assert!(v["pass"].is_boolean());
    assert_eq!(error_of(&run(&["gradcheck", "--eps", "0.5"]))["kind"], "config");
}

#[test]
fn failures_are_json_objects() {
    let out = run(&["bps", "--messages", "/nonexistent/frames.bin"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_of(&out)["kind"], "io");

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.bin");
    fs::write(&junk, [7u8, 0, 0, 0, 1, 2, 3]).unwrap();
    assert_eq!(error_of(&run(&["bps", "--messages", &junk.display().to_string()]))["kind"], "decode");

    let out = run(&["simulate", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_of(&out)["kind"], "usage");

    let out = run(&["frobnicate"]);
    assert_eq!(error_of(&out)["kind"], "usage");

    let help = run(&["--help"]);
    assert!(help.status.success());
}
