//! End-to-end training and answer-or-abstain inference.
//!
//! Training splits the labelled records into disjoint train, tune and
//! calibration sets, fits the head on the first (with early stopping on the
//! second), fits the isotonic map on the tune set, and selects thresholds on
//! the calibration set only.
//!
//! Inference answers iff the calibrated confidence reaches the threshold of
//! the record's evidence-coverage bucket. A record just below threshold with
//! low evidence coverage gets one retrieval refresh through a caller-supplied
//! callback before the final decision.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{creation_time, CalibrationArtifact, FeatureSection, PolicySection, Provenance, ARTIFACT_VERSION};
use crate::config::{ReasonConfig, RunConfig};
use crate::evidence::{assemble_features, names, FeatureFamily, FeatureVector, RawSignalsRecord};
use crate::head::{fit_head, predict_confidence, HeadConfig, HeadModel};
use crate::isotonic::{fit_isotonic, IsotonicMap};
use crate::risk::{bucketed_conformal, ltt_split, validation_threshold, PolicyMode, ThresholdPolicy};
use crate::targets::{label_values, CorrectnessLabel, LabelKind};
use crate::{Error, Result};

/// Fitted confidence model: head plus optional isotonic post-map.
#[derive(Debug, Clone, PartialEq)]
pub struct Scorer {
    pub head: HeadModel,
    pub isotonic: Option<IsotonicMap>,
    pub degenerate: bool,
}

impl Scorer {
    pub fn confidence(&self, z: &FeatureVector) -> Result<f64> {
        predict_confidence(&self.head, self.isotonic.as_ref(), z)
    }

    pub fn confidences(&self, zs: &[FeatureVector]) -> Result<Vec<f64>> {
        zs.iter().map(|z| self.confidence(z)).collect()
    }
}

/// Fits the head on `train` (early stopping on `tune`) and, when requested,
/// the isotonic map on the head's raw probabilities over `tune`.
pub fn fit_scorer(
    train: (&[FeatureVector], &[CorrectnessLabel]),
    tune: (&[FeatureVector], &[CorrectnessLabel]),
    head: &HeadConfig,
    isotonic: bool,
) -> Result<Scorer> {
    let fit = fit_head(train.0, train.1, head, Some(tune)).map_err(|e| e.at_stage("head"))?;
    let isotonic = if isotonic && !fit.degenerate {
        let raw: Vec<f64> = tune.0.iter().map(|z| fit.model.raw_probability(&z.values)).collect();
        let (_, r) = label_values(tune.1).map_err(|e| e.at_stage("isotonic"))?;
        Some(fit_isotonic(&raw, &r).map_err(|e| e.at_stage("isotonic"))?)
    } else {
        None
    };
    Ok(Scorer {
        head: fit.model,
        isotonic,
        degenerate: fit.degenerate,
    })
}

/// Features of every record, in input order.
pub fn extract_features(records: &[RawSignalsRecord], config: &crate::evidence::FeatureConfig) -> Result<Vec<FeatureVector>> {
    records
        .par_iter()
        .map(|r| {
            r.validate()?;
            assemble_features(r, config)
        })
        .collect()
}

fn pick<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

fn mean_and_scale(zs: &[&FeatureVector], d: usize) -> (Vec<f64>, Vec<f64>) {
    if zs.is_empty() {
        return (vec![0.0; d], vec![1.0; d]);
    }
    let n = zs.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| zs.iter().map(|z| z.values[j]).sum::<f64>() / n).collect();
    let scale = (0..d)
        .map(|j| {
            let v = zs.iter().map(|z| (z.values[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v.sqrt() > 1e-9 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

/// Trains a complete artifact from labelled records. Deterministic given the
/// configuration; errors are tagged with the failing stage.
pub fn train(records: &[RawSignalsRecord], config: &RunConfig) -> Result<CalibrationArtifact> {
    config.validate().map_err(|e| e.at_stage("config"))?;
    let labels: Vec<CorrectnessLabel> = records
        .iter()
        .map(|r| {
            r.label
                .ok_or_else(|| Error::InvalidLabel(format!("record {} has no label", r.id)))
        })
        .collect::<Result<_>>()
        .map_err(|e| e.at_stage("labels"))?;
    let (kind, _) = label_values(&labels).map_err(|e| e.at_stage("labels"))?;
    let split = ltt_split(records.len(), config.splits, config.seed).map_err(|e| e.at_stage("split"))?;
    let features = extract_features(records, &config.features).map_err(|e| e.at_stage("features"))?;

    let head_cfg = HeadConfig {
        seed: config.seed,
        ..config.head.clone()
    };
    let (tr_z, tr_l) = (pick(&features, &split.train), pick(&labels, &split.train));
    let (tu_z, tu_l) = (pick(&features, &split.tune), pick(&labels, &split.tune));
    let scorer = fit_scorer((&tr_z, &tr_l), (&tu_z, &tu_l), &head_cfg, config.isotonic)?;

    let cal_z = pick(&features, &split.calibrate);
    let (_, cal_r) = label_values(&pick(&labels, &split.calibrate))?;
    let cal_c = scorer.confidences(&cal_z).map_err(|e| e.at_stage("threshold"))?;
    let policy = select_policy(config, kind, &cal_z, &cal_c, &cal_r).map_err(|e| e.at_stage("threshold"))?;

    let answered: Vec<&FeatureVector> = cal_z
        .iter()
        .zip(&cal_c)
        .filter(|(z, c)| policy.tau_for(z.get(names::RAG_COVERAGE)).is_ok_and(|t| **c >= t))
        .map(|(z, _)| z)
        .collect();
    let reference: Vec<&FeatureVector> = if answered.len() >= 2 { answered } else { cal_z.iter().collect() };
    let (answered_mean, answered_scale) = mean_and_scale(&reference, scorer.head.dim());

    Ok(CalibrationArtifact {
        version: ARTIFACT_VERSION.to_string(),
        feature_config: FeatureSection {
            config: config.features.clone(),
            schema_hash: scorer.head.schema.hash(),
            answered_mean,
            answered_scale,
        },
        policy: PolicySection {
            threshold: policy,
            retry: config.retry.clone(),
            reasons: config.reasons.clone(),
        },
        provenance: Provenance {
            seed: config.seed,
            split_fractions: config.splits,
            split_sizes: [split.train.len(), split.tune.len(), split.calibrate.len()],
            alpha_or_rho: config.policy.alpha,
            label_kind: kind,
            config_hash: config.config_hash(),
            created: creation_time(),
            head_degenerate: scorer.degenerate,
        },
        head: scorer.head,
        isotonic: scorer.isotonic,
    })
}

fn select_policy(config: &RunConfig, kind: LabelKind, z: &[FeatureVector], c: &[f64], r: &[f64]) -> Result<ThresholdPolicy> {
    let p = &config.policy;
    let n = c.len();
    match p.mode {
        PolicyMode::Validation => {
            let tau = validation_threshold(c, r, p.alpha)?;
            Ok(ThresholdPolicy::global(PolicyMode::Validation, tau, p.alpha, n, None))
        }
        PolicyMode::Conformal => {
            let rule = p.resolve_rule(kind);
            let (tau, no_errors) = rule.threshold(c, r, p.alpha)?;
            let mut policy = ThresholdPolicy::global(PolicyMode::Conformal, tau, p.alpha, n, Some(rule));
            policy.flags.no_errors_observed = no_errors;
            Ok(policy)
        }
        PolicyMode::ConformalBucketed => {
            let calib = z
                .iter()
                .zip(c.iter().zip(r))
                .map(|(z, (&c, &r))| {
                    let cov = z
                        .get(names::RAG_COVERAGE)
                        .ok_or_else(|| Error::Schema("bucketed mode needs rag_coverage".into()))?;
                    Ok((c, r, cov))
                })
                .collect::<Result<Vec<_>>>()?;
            bucketed_conformal(&calib, p.alpha, &p.bucket_edges, p.resolve_rule(kind), p.min_bucket_size)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Answer,
    Abstain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    LowEvidenceCoverage,
    HighSemanticDispersion,
    ToolFailure,
    VerifierRejection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionOutcome {
    pub decision: Decision,
    pub confidence: f64,
    pub tau: f64,
    /// Present exactly when abstaining.
    pub reason: Option<Reason>,
    pub retried: bool,
    pub message: String,
}

/// One line of a decisions JSONL export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRecord {
    pub id: String,
    pub decision: Decision,
    pub confidence: f64,
    pub reason: Option<Reason>,
    pub retried: bool,
}

impl DecisionRecord {
    pub fn new(id: impl Into<String>, outcome: &DecisionOutcome) -> Self {
        Self {
            id: id.into(),
            decision: outcome.decision,
            confidence: outcome.confidence,
            reason: outcome.reason,
            retried: outcome.retried,
        }
    }
}

/// Supplies a refreshed record (new retrieval) for a retry.
pub trait RetrievalRefresh {
    fn refresh(&mut self, record: &RawSignalsRecord) -> std::result::Result<RawSignalsRecord, String>;
}

impl<F> RetrievalRefresh for F
where
    F: FnMut(&RawSignalsRecord) -> std::result::Result<RawSignalsRecord, String>,
{
    fn refresh(&mut self, record: &RawSignalsRecord) -> std::result::Result<RawSignalsRecord, String> {
        self(record)
    }
}

/// Inputs to the reason ladder besides the feature vector.
#[derive(Debug, Clone, Copy)]
pub struct ReasonContext<'a> {
    pub cutoffs: &'a ReasonConfig,
    pub answered_mean: &'a [f64],
    pub answered_scale: &'a [f64],
}

impl<'a> ReasonContext<'a> {
    pub fn from_artifact(a: &'a CalibrationArtifact) -> Self {
        Self {
            cutoffs: &a.policy.reasons,
            answered_mean: &a.feature_config.answered_mean,
            answered_scale: &a.feature_config.answered_scale,
        }
    }
}

fn family_of(feature: &str) -> Option<FeatureFamily> {
    use names::*;
    Some(match feature {
        SEQ_LOGLIK | SEQ_RANK_PCT => FeatureFamily::Seq,
        TOKEN_ENTROPY => FeatureFamily::Entropy,
        SC_AGREE | SC_ENTROPY | SC_CLUSTER_MASS => FeatureFamily::Sc,
        SC_PAIRWISE_ENTAILMENT => FeatureFamily::ScEntailment,
        RAG_COVERAGE | RAG_ALIGN | RAG_CONFLICT => FeatureFamily::Rag,
        VERIFIER_CONSISTENCY => FeatureFamily::Verifier,
        TOOL_PASS_RATE | TOOL_SCORE => FeatureFamily::Tool,
        TOOL_DIAG => FeatureFamily::ToolDiag,
        _ => return None,
    })
}

fn family_reason(family: FeatureFamily) -> Reason {
    match family {
        FeatureFamily::Rag => Reason::LowEvidenceCoverage,
        FeatureFamily::Tool | FeatureFamily::ToolDiag => Reason::ToolFailure,
        FeatureFamily::Verifier => Reason::VerifierRejection,
        FeatureFamily::Seq | FeatureFamily::Entropy | FeatureFamily::Sc | FeatureFamily::ScEntailment => {
            Reason::HighSemanticDispersion
        }
    }
}

/// Reason for an abstention, by a fixed ladder:
///
/// 1. every tool check failed: tool failure;
/// 2. verifier consistency below its cut-off: verifier rejection;
/// 3. evidence coverage below its cut-off, or no claims to score: low
///    evidence coverage;
/// 4. largest cluster mass below its cut-off: high semantic dispersion;
/// 5. otherwise the family of the feature with the largest absolute
///    standardized deviation from the answered-population mean.
pub fn reason_tag(z: &FeatureVector, ctx: &ReasonContext<'_>) -> Reason {
    let live = |name: &str, family: FeatureFamily| z.get(name).filter(|_| !z.imputed.contains(&family));
    let cut = ctx.cutoffs;
    if live(names::TOOL_PASS_RATE, FeatureFamily::Tool).is_some_and(|p| p == 0.0) {
        return Reason::ToolFailure;
    }
    if live(names::VERIFIER_CONSISTENCY, FeatureFamily::Verifier).is_some_and(|v| v < cut.verifier_below) {
        return Reason::VerifierRejection;
    }
    if let Some(cov) = live(names::RAG_COVERAGE, FeatureFamily::Rag) {
        if cov < cut.coverage_below || z.degenerate_evidence {
            return Reason::LowEvidenceCoverage;
        }
    }
    if live(names::SC_CLUSTER_MASS, FeatureFamily::Sc).is_some_and(|m| m < cut.cluster_mass_below) {
        return Reason::HighSemanticDispersion;
    }
    let mut best: Option<(f64, FeatureFamily)> = None;
    for (j, name) in z.names.iter().enumerate() {
        let Some(family) = family_of(name) else { continue };
        let (Some(m), Some(s)) = (ctx.answered_mean.get(j), ctx.answered_scale.get(j)) else { continue };
        let dev = ((z.values[j] - m) / s).abs();
        if best.is_none_or(|(b, _)| dev > b) {
            best = Some((dev, family));
        }
    }
    best.map_or(Reason::HighSemanticDispersion, |(_, f)| family_reason(f))
}

/// Context for refusal text.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MessageContext {
    pub confidence: f64,
    pub tau: f64,
    pub evidence_coverage: Option<f64>,
}

/// Templated refusal text for `reason`.
pub fn refusal_message(reason: Reason, ctx: &MessageContext) -> String {
    let gap = format!(
        "confidence {:.2} is below the {:.2} answer threshold",
        ctx.confidence,
        ctx.tau.min(1.0)
    );
    match reason {
        Reason::LowEvidenceCoverage => {
            let cov = ctx
                .evidence_coverage
                .map(|c| format!(" only {:.0}% of the key claims are supported by the retrieved sources, and", 100.0 * c))
                .unwrap_or_default();
            format!("I can't answer this reliably:{cov} my {gap}. Would you like me to search for sources?")
        }
        Reason::HighSemanticDispersion => format!(
            "I can't answer this reliably: my sampled answers disagree with each other and my {gap}. Could you add detail or narrow the question?"
        ),
        Reason::ToolFailure => format!(
            "I can't answer this reliably: the tool checks on my answer were inconsistent or failed, and my {gap}."
        ),
        Reason::VerifierRejection => format!(
            "I can't answer this reliably: a verification step rejected my candidate answer, and my {gap}."
        ),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanChange {
    #[serde(rename = "increase_K")]
    IncreaseK,
    RefreshRetrieval,
    None,
}

pub const SESSION_HISTORY: usize = 8;

/// Per-conversation decision history.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub recent_outcomes: VecDeque<DecisionOutcome>,
    pub escalation_level: u8,
}

impl SessionState {
    pub fn record(&mut self, outcome: DecisionOutcome) {
        if self.recent_outcomes.len() == SESSION_HISTORY {
            self.recent_outcomes.pop_front();
        }
        self.recent_outcomes.push_back(outcome);
        if self.repeated_refusal().is_some() {
            self.escalation_level = self.escalation_level.saturating_add(1);
        }
    }

    /// Reason shared by the last two outcomes when both were refusals.
    fn repeated_refusal(&self) -> Option<Reason> {
        let n = self.recent_outcomes.len();
        if n < 2 {
            return None;
        }
        let (a, b) = (&self.recent_outcomes[n - 2], &self.recent_outcomes[n - 1]);
        match (a.decision, b.decision, a.reason, b.reason) {
            (Decision::Abstain, Decision::Abstain, Some(x), Some(y)) if x == y => Some(x),
            _ => None,
        }
    }
}

/// Plan change after two consecutive refusals with the same reason.
pub fn escalate(session: &SessionState) -> PlanChange {
    match session.repeated_refusal() {
        Some(Reason::HighSemanticDispersion) => PlanChange::IncreaseK,
        Some(Reason::LowEvidenceCoverage) => PlanChange::RefreshRetrieval,
        _ => PlanChange::None,
    }
}

fn score_record(artifact: &CalibrationArtifact, record: &RawSignalsRecord) -> Result<(FeatureVector, f64, f64)> {
    record.validate()?;
    let z = assemble_features(record, &artifact.feature_config.config)?;
    let c = predict_confidence(&artifact.head, artifact.isotonic.as_ref(), &z)?;
    let tau = artifact.policy.threshold.tau_for(z.get(names::RAG_COVERAGE))?;
    Ok((z, c, tau))
}

fn abstain(artifact: &CalibrationArtifact, z: &FeatureVector, c: f64, tau: f64, reason: Option<Reason>, retried: bool) -> DecisionOutcome {
    let reason = reason.unwrap_or_else(|| reason_tag(z, &ReasonContext::from_artifact(artifact)));
    let message = refusal_message(
        reason,
        &MessageContext {
            confidence: c,
            tau,
            evidence_coverage: z.get(names::RAG_COVERAGE),
        },
    );
    DecisionOutcome {
        decision: Decision::Abstain,
        confidence: c,
        tau,
        reason: Some(reason),
        retried,
        message,
    }
}

fn answer(c: f64, tau: f64, retried: bool) -> DecisionOutcome {
    DecisionOutcome {
        decision: Decision::Answer,
        confidence: c,
        tau,
        reason: None,
        retried,
        message: String::new(),
    }
}

/// Answer-or-abstain decision for one record.
///
/// The outcome depends only on the artifact, the record and what `refresh`
/// returns; a session, when given, records the outcome afterwards.
pub fn infer(
    artifact: &CalibrationArtifact,
    record: &RawSignalsRecord,
    refresh: Option<&mut dyn RetrievalRefresh>,
    session: Option<&mut SessionState>,
) -> Result<DecisionOutcome> {
    let (z, c, tau) = score_record(artifact, record)?;
    let outcome = if c >= tau {
        answer(c, tau, false)
    } else {
        let retry = &artifact.policy.retry;
        let coverage = z.get(names::RAG_COVERAGE);
        let gate = retry.enabled
            && artifact.feature_config.config.rag
            && c >= tau - retry.margin
            && (z.degenerate_evidence || coverage.is_some_and(|v| v < retry.coverage_below));
        match refresh {
            Some(cb) if gate => match cb.refresh(record) {
                Err(_) => abstain(artifact, &z, c, tau, Some(Reason::ToolFailure), false),
                Ok(fresh) => {
                    let (z2, c2, tau2) = score_record(artifact, &fresh)?;
                    if c2 >= tau2 {
                        answer(c2, tau2, true)
                    } else {
                        abstain(artifact, &z2, c2, tau2, None, true)
                    }
                }
            },
            _ => abstain(artifact, &z, c, tau, None, false),
        }
    };
    if let Some(s) = session {
        s.record(outcome.clone());
    }
    Ok(outcome)
}
