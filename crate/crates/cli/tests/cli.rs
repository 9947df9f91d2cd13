use std::path::Path;
use std::process::{Command, Output};

use unicr::config::RunConfig;
use unicr::pipeline::DecisionRecord;
use unicr::synthetic::{generate_synthetic, SyntheticSpec, TrueModel};

fn unicr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unicr"))
        .env_remove("UNICR_SEED")
        .env_remove("SOURCE_DATE_EPOCH")
        .args(args)
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Labelled synthetic records and a matching config in `dir`.
fn setup(dir: &Path, n: usize) {
    let records = generate_synthetic(&SyntheticSpec::new(n, 3)).unwrap();
    let text: String = records.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
    std::fs::write(dir.join("records.jsonl"), text).unwrap();
    let config = RunConfig {
        features: TrueModel::default().feature_config(),
        ..RunConfig::default()
    };
    std::fs::write(dir.join("config.json"), serde_json::to_string(&config).unwrap()).unwrap();
}

#[test]
fn train_infer_eval_flow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, 1200);
    let (records, config) = (d.join("records.jsonl"), d.join("config.json"));

    let out = unicr(&["extract", p(&records), "--config", p(&config), "--out-dir", p(d)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(d.join("features.jsonl")).unwrap().lines().count(), 1200);

    let out = unicr(&["train", p(&records), "--config", p(&config), "--out-dir", p(d)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("train.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config_hash"].as_str().unwrap().len(), 64);

    let artifact = d.join("artifact.json");
    let out = unicr(&["infer", p(&records), "--artifact", p(&artifact), "--mode", "conformal", "--out-dir", p(d)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let decisions: Vec<DecisionRecord> = std::fs::read_to_string(d.join("decisions.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(decisions.len(), 1200);

    let out = unicr(&["infer", p(&records), "--artifact", p(&artifact), "--mode", "validation", "--out-dir", p(d)]);
    assert_eq!(out.status.code(), Some(3));

    let decisions_path = d.join("decisions.jsonl");
    let out = unicr(&["eval", p(&decisions_path), "--records", p(&records), "--bootstrap", "200", "--out-dir", p(d)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["n"], 1200);
    assert!(std::fs::read_to_string(d.join("rc_curve.csv")).unwrap().starts_with("tau,"));
    assert!(d.join("reliability.csv").exists());

    // Without labels to join, eval is a data error.
    let out = unicr(&["eval", p(&decisions_path), "--out-dir", p(d)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, 300);
    let records = d.join("records.jsonl");

    let bad_config = d.join("bad.json");
    std::fs::write(&bad_config, r#"{"no_such_field": 1}"#).unwrap();
    let out = unicr(&["train", p(&records), "--config", p(&bad_config), "--out-dir", p(d)]);
    assert_eq!(out.status.code(), Some(2));

    let out = unicr(&["train", p(&records), "--alpha", "1.5", "--out-dir", p(d)]);
    assert_eq!(out.status.code(), Some(2));

    let broken = d.join("broken.jsonl");
    let mut text = std::fs::read_to_string(&records).unwrap();
    text.push_str("{\"id\": \"x\", \"samples\": 3}\n");
    std::fs::write(&broken, text).unwrap();
    let out = unicr(&["extract", p(&broken), "--out-dir", p(d)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 301"), "{}", String::from_utf8_lossy(&out.stderr));

    // With 60 calibration records the binomial test cannot certify a risk of 0.001.
    let config = d.join("config.json");
    let out = unicr(&["train", p(&records), "--config", p(&config), "--alpha", "0.001", "--out-dir", p(d)]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("artifact.json").exists());
}

#[test]
fn seed_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, 1200);
    let (records, config) = (d.join("records.jsonl"), d.join("config.json"));
    let run = |out: &str, seed: Option<&str>| {
        let out_dir = d.join(out);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_unicr"));
        cmd.env_remove("UNICR_SEED").env_remove("SOURCE_DATE_EPOCH");
        if let Some(s) = seed {
            cmd.env("UNICR_SEED", s);
        }
        let status = cmd
            .args(["train", p(&records), "--config", p(&config), "--out-dir", p(&out_dir)])
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read_to_string(out_dir.join("artifact.json")).unwrap()
    };
    let env_seed = run("a", Some("9"));
    let artifact: serde_json::Value = serde_json::from_str(&env_seed).unwrap();
    assert_eq!(artifact["provenance"]["seed"], 9);
    assert_ne!(env_seed, run("b", None));
}
