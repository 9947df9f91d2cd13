use unicr::artifact::{load_artifact, load_artifact_checked, save_artifact, CalibrationArtifact};
use unicr::config::{PolicyConfig, RunConfig};
use unicr::evidence::RawSignalsRecord;
use unicr::pipeline::{infer, train, Decision};
use unicr::risk::{risk_controlled_threshold, PolicyMode};
use unicr::synthetic::{generate_synthetic, SyntheticSpec, TrueModel};
use unicr::targets::CorrectnessLabel;
use unicr::Error;

fn records(n: usize, seed: u64) -> Vec<RawSignalsRecord> {
    generate_synthetic(&SyntheticSpec::new(n, seed)).unwrap()
}

fn config(mode: PolicyMode) -> RunConfig {
    RunConfig {
        features: TrueModel::default().feature_config(),
        policy: PolicyConfig {
            mode,
            ..PolicyConfig::default()
        },
        ..RunConfig::default()
    }
}

#[test]
fn trained_artifact_round_trips_and_decides() {
    let artifact = train(&records(1500, 1), &config(PolicyMode::Conformal)).unwrap();
    artifact.verify().unwrap();
    assert_eq!(artifact.provenance.split_sizes.iter().sum::<usize>(), 1500);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("artifact.json");
    save_artifact(&artifact, &path).unwrap();
    assert_eq!(load_artifact(&path).unwrap(), artifact);
    assert!(load_artifact_checked(&path, PolicyMode::Conformal).is_ok());
    assert!(matches!(load_artifact_checked(&path, PolicyMode::Validation), Err(Error::Artifact(_))));

    let probe = records(300, 2);
    let decisions: Vec<_> = probe.iter().map(|r| infer(&artifact, r, None, None).unwrap()).collect();
    let answered = decisions.iter().filter(|d| d.decision == Decision::Answer).count();
    assert!(answered > 0 && answered < probe.len());
    for d in &decisions {
        assert_eq!(d.decision == Decision::Abstain, d.reason.is_some());
        assert_eq!(d.decision == Decision::Answer, d.confidence >= d.tau);
    }
}

#[test]
fn corrupted_artifacts_are_rejected() {
    let artifact = train(&records(600, 3), &config(PolicyMode::Validation)).unwrap();
    let text = artifact.to_canonical_json().unwrap();

    let mut wrong_hash = artifact.clone();
    wrong_hash.feature_config.schema_hash = "0".repeat(64);
    assert!(matches!(CalibrationArtifact::from_json(&wrong_hash.to_canonical_json().unwrap()), Err(Error::Artifact(_))));

    let mut short = artifact.clone();
    short.head.weights.pop();
    assert!(matches!(CalibrationArtifact::from_json(&short.to_canonical_json().unwrap()), Err(Error::Artifact(_))));

    assert!(CalibrationArtifact::from_json(&text[..text.len() / 2]).is_err());
    assert!(CalibrationArtifact::from_json(&text.replace("unicr-artifact/1", "unicr-artifact/0")).is_err());
}

#[test]
fn bucketed_policy_assigns_thresholds_by_coverage() {
    let mut cfg = config(PolicyMode::ConformalBucketed);
    cfg.policy.bucket_edges = vec![0.5];
    let artifact = train(&records(3000, 4), &cfg).unwrap();
    let policy = &artifact.policy.threshold;
    let buckets = policy.buckets.as_ref().unwrap();
    assert_eq!(buckets.len(), 2);
    assert_eq!(policy.tau_for(Some(0.2)).unwrap(), buckets[0].tau);
    assert_eq!(policy.tau_for(Some(0.9)).unwrap(), buckets[1].tau);
}

#[test]
fn graded_labels_use_the_soft_rule() {
    let mut recs = records(1200, 5);
    for r in &mut recs {
        let p = r.true_prob.unwrap();
        r.label = Some(CorrectnessLabel::new(unicr::targets::LabelKind::Graded, p).unwrap());
    }
    let artifact = train(&recs, &config(PolicyMode::Conformal)).unwrap();
    assert_eq!(artifact.provenance.label_kind, unicr::targets::LabelKind::Graded);
    assert!(matches!(artifact.policy.threshold.rule, Some(unicr::risk::ConformalRule::Soft)));
}

#[test]
fn training_is_seed_deterministic() {
    let recs = records(800, 6);
    let a = train(&recs, &config(PolicyMode::Conformal)).unwrap();
    let b = train(&recs, &config(PolicyMode::Conformal)).unwrap();
    assert_eq!(a.to_canonical_json().unwrap(), b.to_canonical_json().unwrap());
    let mut other = config(PolicyMode::Conformal);
    other.seed = 7;
    assert_ne!(a, train(&recs, &other).unwrap());
}

#[test]
fn missing_labels_fail_at_the_label_stage() {
    let mut recs = records(100, 8);
    recs[10].label = None;
    let err = train(&recs, &config(PolicyMode::Conformal)).unwrap_err();
    assert!(err.to_string().contains("label"), "{err}");
}

#[test]
fn calibration_thresholds_ignore_record_order() {
    // Exchangeability: permuting the calibration sample leaves the risk
    // controlled threshold unchanged.
    let recs = records(500, 9);
    let c: Vec<f64> = recs.iter().map(|r| r.true_prob.unwrap()).collect();
    let r: Vec<f64> = recs.iter().map(|r| r.label.unwrap().value).collect();
    let tau = risk_controlled_threshold(&c, &r, 0.1, 0.05).unwrap();
    let mut idx: Vec<usize> = (0..c.len()).collect();
    idx.reverse();
    idx.rotate_left(137);
    let pc: Vec<f64> = idx.iter().map(|&i| c[i]).collect();
    let pr: Vec<f64> = idx.iter().map(|&i| r[i]).collect();
    assert_eq!(tau, risk_controlled_threshold(&pc, &pr, 0.1, 0.05).unwrap());
}
