//! Correctness supervision for the calibration head.
//!
//! Exact-match and executed tasks produce binary labels; long-form answers
//! produce a graded factuality surrogate built from per-claim entailment,
//! where contradicted claims contribute zero but still count in the
//! denominator.

use serde::{Deserialize, Serialize};

use crate::evidence::ClaimScore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Exact,
    Executed,
    Graded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLabel")]
pub struct CorrectnessLabel {
    pub kind: LabelKind,
    pub value: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLabel {
    kind: LabelKind,
    value: f64,
}

impl TryFrom<RawLabel> for CorrectnessLabel {
    type Error = Error;

    fn try_from(raw: RawLabel) -> Result<Self> {
        CorrectnessLabel::new(raw.kind, raw.value)
    }
}

impl CorrectnessLabel {
    pub fn new(kind: LabelKind, value: f64) -> Result<Self> {
        let ok = match kind {
            LabelKind::Exact | LabelKind::Executed => value == 0.0 || value == 1.0,
            LabelKind::Graded => (0.0..=1.0).contains(&value),
        };
        if !ok {
            return Err(Error::InvalidLabel(format!(
                "{kind:?} label with value {value}"
            )));
        }
        Ok(Self { kind, value })
    }

    pub fn is_binary(&self) -> bool {
        self.kind != LabelKind::Graded
    }

    /// Bounded loss `1 - r`.
    pub fn loss(&self) -> f64 {
        1.0 - self.value
    }
}

/// `r = 1{y = y*}`.
pub fn exact_label(matched: bool) -> CorrectnessLabel {
    CorrectnessLabel {
        kind: LabelKind::Exact,
        value: if matched { 1.0 } else { 0.0 },
    }
}

/// Unit-test outcome of generated code.
pub fn executed_label(passed: bool) -> CorrectnessLabel {
    CorrectnessLabel {
        kind: LabelKind::Executed,
        value: if passed { 1.0 } else { 0.0 },
    }
}

/// Graded factuality surrogate: the mean over all claims of `e_j` with
/// contradicted claims zeroed. Salience is not applied here.
pub fn factual_surrogate(claims: &[ClaimScore]) -> Result<CorrectnessLabel> {
    if claims.is_empty() {
        return Err(Error::DegenerateEvidence(
            "factual surrogate needs at least one claim".into(),
        ));
    }
    let total: f64 = claims
        .iter()
        .filter(|c| !c.contradicted)
        .map(|c| c.entailment)
        .sum();
    let value = (total / claims.len() as f64).clamp(0.0, 1.0);
    CorrectnessLabel::new(LabelKind::Graded, value)
}

/// Label values, checking that every label has the same kind.
pub fn label_values(labels: &[CorrectnessLabel]) -> Result<(LabelKind, Vec<f64>)> {
    let kind = match labels.first() {
        Some(l) => l.kind,
        None => return Ok((LabelKind::Exact, Vec::new())),
    };
    let binary = kind != LabelKind::Graded;
    if let Some(bad) = labels.iter().find(|l| l.is_binary() != binary) {
        return Err(Error::InvalidLabel(format!(
            "mixed label kinds in one run: {kind:?} and {:?}",
            bad.kind
        )));
    }
    Ok((kind, labels.iter().map(|l| l.value).collect()))
}
