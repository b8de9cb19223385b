//! End-to-end runs of the `owcod` binary on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn owcod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_owcod")).args(args).output().expect("spawn owcod")
}

fn tiny_config(dir: &Path) -> String {
    let cfg = json!({
        "seed": 3,
        "task": {
            "subsets": 2,
            "shots": 1,
            "eval_per_subset": 3,
            "unseen_eval": 3,
            "pretrain_train": 12,
            "pretrain_eval": 4
        },
        "pretrain": { "epochs": 1, "ap_floor": 0.0 },
        "schedule": { "fixed_epochs": 1 }
    });
    let p = dir.join("tiny.json");
    std::fs::write(&p, cfg.to_string()).unwrap();
    p.to_str().unwrap().to_string()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn pipeline_writes_artifacts_and_scores() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();

    let o = owcod(&["--config", &cfg, "--out-dir", out_s, "gen-task"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("task/S1-train.json").exists());
    assert!(out.join("task/unseen-eval.json").exists());

    let o = owcod(&["--config", &cfg, "--out-dir", out_s, "train"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("base.owbc").exists());
    assert!(out.join("pool.owmp").exists());
    let manifest = read_json(&out.join("manifest-train.json"));
    assert_eq!(manifest["triplet_digests"].as_array().unwrap().len(), 2);

    let o = owcod(&["--config", &cfg, "--out-dir", out_s, "eval"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for mode in ["threshold", "oracle", "zero-shot", "no-retrieval-last-triplet"] {
        assert!(out.join(format!("report-{mode}.json")).exists(), "{mode}");
        assert!(out.join(format!("predictions/{mode}/S1.json")).exists(), "{mode}");
    }
    assert!(out.join("leaderboard.txt").exists());

    // Ground truth turned into predictions scores perfectly.
    let gt_path = out.join("gt/S1.json");
    let gt = read_json(&gt_path);
    let preds: Vec<Value> = gt["annotations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| json!({"image_id": a["image_id"], "category_id": a["category_id"], "bbox": a["bbox"], "score": 1.0}))
        .collect();
    let pred_path = dir.path().join("perfect.json");
    std::fs::write(&pred_path, Value::Array(preds).to_string()).unwrap();
    let o = owcod(&["score", "--gt", gt_path.to_str().unwrap(), "--pred", pred_path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let result: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((result["map"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    let o = owcod(&[
        "score",
        "--gt",
        gt_path.to_str().unwrap(),
        "--pred",
        out.join("predictions/threshold/S1.json").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let reports: Vec<String> = ["threshold", "zero-shot"]
        .iter()
        .map(|m| out.join(format!("report-{m}.json")).to_str().unwrap().to_string())
        .collect();
    let rank_out = dir.path().join("ranked");
    let o = owcod(&["--out-dir", rank_out.to_str().unwrap(), "rank", &reports[0], &reports[1]]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(rank_out.join("ranks.csv").exists());

    for kind in ["components", "layers", "joint", "oracle", "shots"] {
        let o = owcod(&["--config", &cfg, "--out-dir", out_s, "ablate", kind]);
        assert!(o.status.success(), "{kind}: {}", String::from_utf8_lossy(&o.stderr));
        let bundle = read_json(&out.join(format!("ablation-{kind}.json")));
        let expected = match kind {
            "components" => 5,
            "layers" => 4,
            "shots" => 4,
            _ => 2,
        };
        assert_eq!(bundle["rows"].as_array().unwrap().len(), expected, "{kind}");
    }

    let o = owcod(&[
        "--config",
        &cfg,
        "--out-dir",
        out_s,
        "eval",
        "--mode",
        "threshold",
        "--pool",
        dir.path().join("missing.owmp").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"no_such_key": 1}"#).unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    assert_eq!(code(&owcod(&["--config", bad.to_str().unwrap(), "--out-dir", out_s, "gen-task"])), 2);
    assert_eq!(code(&owcod(&["--tau", "-3", "--out-dir", out_s, "gen-task"])), 2);
    assert_eq!(code(&owcod(&["--out-dir", out_s, "eval", "--mode", "bogus"])), 2);
    assert_eq!(code(&owcod(&["--out-dir", out_s, "ablate", "bogus"])), 2);
    assert_eq!(code(&owcod(&["no-such-command"])), 2);
}

#[test]
fn data_errors_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.json");
    std::fs::write(&junk, "not json").unwrap();
    let j = junk.to_str().unwrap();
    let out = dir.path().join("out");
    assert_eq!(code(&owcod(&["--out-dir", out.to_str().unwrap(), "rank", j])), 3);
    assert_eq!(code(&owcod(&["score", "--gt", j, "--pred", j])), 3);
    let corrupt = dir.path().join("base.owbc");
    std::fs::write(&corrupt, b"OWBC garbage").unwrap();
    assert_eq!(
        code(&owcod(&["--out-dir", out.to_str().unwrap(), "eval", "--mode", "zero-shot", "--base", corrupt.to_str().unwrap()])),
        3
    );
}
