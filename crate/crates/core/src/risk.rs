//! Answer/abstain thresholds: validation sweeps, conformal thresholds and
//! bucketed policies, plus the seeded train/tune/calibrate split.
//!
//! Every threshold rule answers a record iff `c >= tau`. Candidate thresholds
//! are `{0}` together with the observed confidences; between observed values
//! every empirical quantity is constant, so the candidate grid loses nothing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::targets::CorrectnessLabel;
use crate::{Error, Result};

/// Threshold meaning "abstain on everything": above any valid confidence.
pub const ABSTAIN_ALWAYS: f64 = 1.0 + 1e-9;

pub const DEFAULT_MIN_BUCKET_SIZE: usize = 30;
pub const DEFAULT_LTT_DELTA: f64 = 0.05;

/// Tolerance used when comparing an empirical risk with its budget.
const RISK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveOutcomeSet {
    pub confidences: Vec<f64>,
    pub labels: Vec<CorrectnessLabel>,
    pub answered_mask: Vec<bool>,
}

impl SelectiveOutcomeSet {
    pub fn new(confidences: Vec<f64>, labels: Vec<CorrectnessLabel>, answered_mask: Vec<bool>) -> Result<Self> {
        if confidences.len() != labels.len() || labels.len() != answered_mask.len() {
            return Err(Error::Schema(format!(
                "outcome set lengths differ: {} confidences, {} labels, {} mask entries",
                confidences.len(),
                labels.len(),
                answered_mask.len()
            )));
        }
        Ok(Self {
            confidences,
            labels,
            answered_mask,
        })
    }

    /// Answer mask of the rule `c >= tau`.
    pub fn at_threshold(confidences: Vec<f64>, labels: Vec<CorrectnessLabel>, tau: f64) -> Result<Self> {
        let mask = confidences.iter().map(|&c| c >= tau).collect();
        Self::new(confidences, labels, mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectiveRisk {
    pub risk: f64,
    pub coverage: f64,
    /// Nothing was answered; `risk` is reported as 0.
    pub zero_coverage: bool,
}

/// Mean loss over answered records and the answered fraction.
pub fn selective_risk(outcomes: &SelectiveOutcomeSet) -> SelectiveRisk {
    let losses: Vec<f64> = outcomes.labels.iter().map(|l| l.loss()).collect();
    risk_from_mask(&losses, &outcomes.answered_mask)
}

fn risk_from_mask(losses: &[f64], answered: &[bool]) -> SelectiveRisk {
    let n = losses.len();
    let (count, loss) = losses
        .iter()
        .zip(answered)
        .filter(|(_, a)| **a)
        .fold((0usize, 0.0), |(k, s), (l, _)| (k + 1, s + l));
    SelectiveRisk {
        risk: if count == 0 { 0.0 } else { loss / count as f64 },
        coverage: if n == 0 { 0.0 } else { count as f64 / n as f64 },
        zero_coverage: count == 0,
    }
}

/// Selective risk of the rule `c >= tau` with labels given as values in `[0, 1]`.
pub fn risk_at(confidences: &[f64], labels: &[f64], tau: f64) -> SelectiveRisk {
    let losses: Vec<f64> = labels.iter().map(|r| 1.0 - r).collect();
    let answered: Vec<bool> = confidences.iter().map(|&c| c >= tau).collect();
    risk_from_mask(&losses, &answered)
}

/// Threshold of the Bayes rule for loss budget `lambda`: answer iff `c >= 1 - lambda`.
pub fn bayes_threshold(lambda: f64) -> f64 {
    1.0 - lambda
}

/// One candidate threshold with its answered count and accumulated loss.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    tau: f64,
    answered: usize,
    loss: f64,
}

/// Candidates in decreasing `tau` order, the last being `tau = 0`.
fn candidates(confidences: &[f64], labels: &[f64]) -> Vec<Candidate> {
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]));
    let mut out = Vec::with_capacity(confidences.len() + 1);
    let mut loss = 0.0;
    let mut i = 0;
    while i < order.len() {
        let tau = confidences[order[i]];
        while i < order.len() && confidences[order[i]] == tau {
            loss += 1.0 - labels[order[i]];
            i += 1;
        }
        out.push(Candidate { tau, answered: i, loss });
    }
    // Confidences at or below zero are all answered by tau = 0 already.
    if out.last().is_none_or(|c| c.tau > 0.0) {
        out.push(Candidate {
            tau: 0.0,
            answered: confidences.len(),
            loss,
        });
    } else if let Some(last) = out.last_mut() {
        last.tau = 0.0;
        last.answered = confidences.len();
        last.loss = loss;
    }
    out
}

fn check_pair(confidences: &[f64], labels: &[f64]) -> Result<()> {
    if confidences.len() != labels.len() {
        return Err(Error::Schema(format!(
            "{} confidences but {} labels",
            confidences.len(),
            labels.len()
        )));
    }
    if confidences.is_empty() {
        return Err(Error::InsufficientData { needed: 1, have: 0 });
    }
    Ok(())
}

/// Maximal-coverage threshold whose empirical selective risk is at most `rho`.
///
/// Among candidates the smallest feasible `tau` has the largest coverage.
/// Returns [`ABSTAIN_ALWAYS`] when no candidate is feasible.
pub fn validation_threshold(confidences: &[f64], labels: &[f64], rho: f64) -> Result<f64> {
    check_pair(confidences, labels)?;
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("rho = {rho} outside [0, 1]")));
    }
    let mut best = ABSTAIN_ALWAYS;
    for cand in candidates(confidences, labels) {
        if cand.loss / cand.answered as f64 <= rho + RISK_TOL {
            best = cand.tau;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    #[default]
    None,
    Interpolated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConformalThreshold {
    pub tau: f64,
    /// The calibration set contained no errors; `tau` is 0.
    pub no_errors_observed: bool,
}

fn binary_labels(labels: &[f64]) -> Result<()> {
    match labels.iter().find(|&&r| r != 0.0 && r != 1.0) {
        Some(r) => Err(Error::InvalidLabel(format!(
            "this threshold rule needs binary labels, found {r}"
        ))),
        None => Ok(()),
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha = {alpha} outside (0, 1)")))
    }
}

/// Error-quantile threshold: `tau = 1 - Q_{1-alpha}(E)` over the
/// nonconformity scores `E = {1 - c_i : r_i = 0}` of calibration errors.
///
/// The quantile is the `ceil((1 - alpha)(|E| + 1))`-th smallest score,
/// clamped to `|E|`. With [`Smoothing::Interpolated`] it interpolates
/// linearly between the floor and ceiling order statistics of the same
/// fractional rank.
pub fn conformal_threshold(
    confidences: &[f64],
    labels: &[f64],
    alpha: f64,
    smoothing: Smoothing,
) -> Result<ConformalThreshold> {
    check_pair(confidences, labels)?;
    check_alpha(alpha)?;
    binary_labels(labels)?;
    let mut scores: Vec<f64> = confidences
        .iter()
        .zip(labels)
        .filter(|(_, r)| **r == 0.0)
        .map(|(c, _)| 1.0 - c)
        .collect();
    if scores.is_empty() {
        return Ok(ConformalThreshold {
            tau: 0.0,
            no_errors_observed: true,
        });
    }
    scores.sort_by(f64::total_cmp);
    let m = scores.len();
    let rank = (1.0 - alpha) * (m as f64 + 1.0);
    // Order statistics are 1-based; the epsilon keeps exact integers exact.
    let kth = |k: f64| scores[(k as usize).clamp(1, m) - 1];
    let q = match smoothing {
        Smoothing::None => kth((rank - 1e-9).ceil()),
        Smoothing::Interpolated => {
            let lo = (rank + 1e-9).floor();
            let frac = (rank - lo).max(0.0);
            let a = kth(lo);
            let b = kth((rank - 1e-9).ceil());
            a + frac * (b - a)
        }
    };
    Ok(ConformalThreshold {
        tau: 1.0 - q,
        no_errors_observed: false,
    })
}

/// Learn-then-test threshold: the smallest candidate `tau` at which the
/// binomial test of "selective risk > alpha" rejects at level `delta`,
/// i.e. `P(Binom(n_answered, alpha) <= errors) <= delta`.
///
/// Returns [`ABSTAIN_ALWAYS`] when no candidate rejects.
pub fn risk_controlled_threshold(confidences: &[f64], labels: &[f64], alpha: f64, delta: f64) -> Result<f64> {
    check_pair(confidences, labels)?;
    check_alpha(alpha)?;
    binary_labels(labels)?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("delta = {delta} outside (0, 1)")));
    }
    let mut best = ABSTAIN_ALWAYS;
    for cand in candidates(confidences, labels) {
        let dist = Binomial::new(alpha, cand.answered as u64).expect("alpha checked");
        let errors = cand.loss.round() as u64;
        if dist.cdf(errors) <= delta {
            best = cand.tau;
        }
    }
    Ok(best)
}

/// Soft conformal threshold for graded labels: the smallest candidate `tau`
/// with `(sum_i L_i(tau) + 1) / (m + 1) <= alpha * coverage(tau)`, where
/// `L_i(tau) = 1{c_i >= tau} (1 - r_i)`.
///
/// Returns [`ABSTAIN_ALWAYS`] when no candidate qualifies.
pub fn soft_conformal_threshold(confidences: &[f64], labels: &[f64], alpha: f64) -> Result<f64> {
    check_pair(confidences, labels)?;
    check_alpha(alpha)?;
    if let Some(r) = labels.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::InvalidLabel(format!("graded label {r} outside [0, 1]")));
    }
    let m = confidences.len() as f64;
    let mut best = ABSTAIN_ALWAYS;
    for cand in candidates(confidences, labels) {
        let coverage = cand.answered as f64 / m;
        if (cand.loss + 1.0) / (m + 1.0) <= alpha * coverage + RISK_TOL {
            best = cand.tau;
        }
    }
    Ok(best)
}

/// How a conformal-mode policy turns calibration data into a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConformalRule {
    /// [`conformal_threshold`].
    Quantile { smoothing: Smoothing },
    /// [`risk_controlled_threshold`].
    Ltt { delta: f64 },
    /// [`soft_conformal_threshold`].
    Soft,
}

impl ConformalRule {
    /// Threshold and whether no calibration errors were seen.
    pub fn threshold(&self, confidences: &[f64], labels: &[f64], alpha: f64) -> Result<(f64, bool)> {
        let no_errors = labels.iter().all(|&r| r == 1.0);
        match *self {
            ConformalRule::Quantile { smoothing } => {
                let t = conformal_threshold(confidences, labels, alpha, smoothing)?;
                Ok((t.tau, t.no_errors_observed))
            }
            ConformalRule::Ltt { delta } => Ok((risk_controlled_threshold(confidences, labels, alpha, delta)?, no_errors)),
            ConformalRule::Soft => Ok((soft_conformal_threshold(confidences, labels, alpha)?, no_errors)),
        }
    }

    pub fn smoothing(&self) -> Smoothing {
        match self {
            ConformalRule::Quantile { smoothing } => *smoothing,
            _ => Smoothing::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    Validation,
    Conformal,
    ConformalBucketed,
}

/// A threshold for records whose evidence coverage lies in `[lo, hi)`; the
/// last bucket of a policy also includes `hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub tau: f64,
    pub calibration_size: usize,
    /// Too few calibration points; `tau` is the global threshold.
    pub inherited: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PolicyFlags {
    pub no_errors_observed: bool,
    pub abstain_always: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub mode: PolicyMode,
    pub global_tau: Option<f64>,
    pub buckets: Option<Vec<Bucket>>,
    pub alpha_or_rho: f64,
    pub calibration_size: usize,
    pub smoothing: Smoothing,
    /// Absent in validation mode.
    pub rule: Option<ConformalRule>,
    pub flags: PolicyFlags,
}

impl ThresholdPolicy {
    pub fn global(mode: PolicyMode, tau: f64, alpha_or_rho: f64, calibration_size: usize, rule: Option<ConformalRule>) -> Self {
        Self {
            mode,
            global_tau: Some(tau),
            buckets: None,
            alpha_or_rho,
            calibration_size,
            smoothing: rule.map_or(Smoothing::None, |r| r.smoothing()),
            rule,
            flags: PolicyFlags {
                no_errors_observed: false,
                abstain_always: tau > 1.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Artifact(format!("threshold policy: {m}")));
        match (self.mode, &self.global_tau, &self.buckets) {
            (PolicyMode::ConformalBucketed, None, Some(b)) => {
                if b.is_empty() {
                    return bad("no buckets");
                }
                for w in b.windows(2) {
                    if w[0].hi != w[1].lo {
                        return bad("bucket ranges do not tile");
                    }
                }
                if b.iter().any(|x| !(x.lo < x.hi)) || b[0].lo > 0.0 || b[b.len() - 1].hi < 1.0 {
                    return bad("bucket ranges do not cover [0, 1]");
                }
            }
            (PolicyMode::ConformalBucketed, _, _) => return bad("bucketed mode needs buckets and no global tau"),
            (_, Some(_), None) => {}
            _ => return bad("needs a global tau and no buckets"),
        }
        if (self.mode == PolicyMode::Validation) != self.rule.is_none() {
            return bad("conformal modes carry a rule, validation mode does not");
        }
        let taus: Vec<f64> = match &self.buckets {
            Some(b) => b.iter().map(|x| x.tau).collect(),
            None => self.global_tau.into_iter().collect(),
        };
        if taus.iter().any(|&t| !(0.0..=ABSTAIN_ALWAYS).contains(&t)) {
            return bad("tau outside [0, 1]");
        }
        Ok(())
    }

    /// Threshold for a record with the given evidence coverage.
    pub fn tau_for(&self, evidence_coverage: Option<f64>) -> Result<f64> {
        if let Some(tau) = self.global_tau {
            return Ok(tau);
        }
        let buckets = self.buckets.as_deref().unwrap_or_default();
        let cov = evidence_coverage
            .ok_or_else(|| Error::Schema("bucketed policy needs the evidence coverage feature".into()))?;
        Ok(buckets
            .iter()
            .find(|b| cov < b.hi)
            .or(buckets.last())
            .map(|b| b.tau)
            .unwrap_or(ABSTAIN_ALWAYS))
    }
}

/// Per-bucket conformal thresholds keyed on evidence coverage.
///
/// `bucket_edges` are the interior cut points in `(0, 1)`; buckets with fewer
/// than `min_bucket_size` points inherit the threshold fitted on all data.
pub fn bucketed_conformal(
    calib: &[(f64, f64, f64)],
    alpha: f64,
    bucket_edges: &[f64],
    rule: ConformalRule,
    min_bucket_size: usize,
) -> Result<ThresholdPolicy> {
    if calib.is_empty() {
        return Err(Error::InsufficientData { needed: 1, have: 0 });
    }
    if bucket_edges.windows(2).any(|w| w[0] >= w[1]) || bucket_edges.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
        return Err(Error::Config(format!("bucket edges {bucket_edges:?} must increase strictly within (0, 1)")));
    }
    let (c, r): (Vec<f64>, Vec<f64>) = calib.iter().map(|&(c, r, _)| (c, r)).unzip();
    let (global_tau, global_no_errors) = rule.threshold(&c, &r, alpha)?;

    let mut bounds = vec![0.0];
    bounds.extend_from_slice(bucket_edges);
    bounds.push(1.0);
    let last = bounds.len() - 2;
    let mut buckets = Vec::with_capacity(bounds.len() - 1);
    let mut no_errors = global_no_errors;
    for (b, w) in bounds.windows(2).enumerate() {
        let (lo, hi) = (w[0], w[1]);
        let member = |cov: f64| (b == 0 || cov >= lo) && (b == last || cov < hi);
        let (bc, br): (Vec<f64>, Vec<f64>) = calib
            .iter()
            .filter(|(_, _, cov)| member(*cov))
            .map(|&(c, r, _)| (c, r))
            .unzip();
        let (tau, inherited) = if bc.len() >= min_bucket_size.max(1) {
            let (tau, ne) = rule.threshold(&bc, &br, alpha)?;
            no_errors |= ne;
            (tau, false)
        } else {
            (global_tau, true)
        };
        buckets.push(Bucket {
            name: format!("coverage_{lo}_{hi}"),
            lo,
            hi,
            tau,
            calibration_size: bc.len(),
            inherited,
        });
    }
    let abstain_always = buckets.iter().all(|b| b.tau > 1.0);
    Ok(ThresholdPolicy {
        mode: PolicyMode::ConformalBucketed,
        global_tau: None,
        buckets: Some(buckets),
        alpha_or_rho: alpha,
        calibration_size: calib.len(),
        smoothing: rule.smoothing(),
        rule: Some(rule),
        flags: PolicyFlags {
            no_errors_observed: no_errors,
            abstain_always,
        },
    })
}

/// Index partition into disjoint train, tune and calibration splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub tune: Vec<usize>,
    pub calibrate: Vec<usize>,
}

/// Seeded partition of `0..n` with `fractions = [train, tune, calibrate]`.
///
/// Tune and calibration sizes are rounded from their fractions and the
/// training split takes the remainder. Indices within each split are sorted.
pub fn ltt_split(n: usize, fractions: [f64; 3], seed: u64) -> Result<SplitIndices> {
    if fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be positive and sum to 1"
        )));
    }
    let n_tune = (fractions[1] * n as f64).round() as usize;
    let n_cal = (fractions[2] * n as f64).round() as usize;
    if n_tune == 0 || n_cal == 0 || n_tune + n_cal >= n {
        return Err(Error::InsufficientData { needed: 3, have: n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut calibrate = idx[..n_cal].to_vec();
    let mut tune = idx[n_cal..n_cal + n_tune].to_vec();
    let mut train = idx[n_cal + n_tune..].to_vec();
    calibrate.sort_unstable();
    tune.sort_unstable();
    train.sort_unstable();
    Ok(SplitIndices { train, tune, calibrate })
}
