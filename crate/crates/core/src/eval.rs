//! Selective-prediction evaluation: risk-coverage curves, AURC,
//! coverage at fixed risk, bootstrap violation rates and CSV emitters.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::{self, BinScheme, ReliabilityBin};
use crate::risk::ThresholdPolicy;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RcPoint {
    pub tau: f64,
    pub coverage: f64,
    pub risk: f64,
}

/// Empirical risk-coverage curve, ordered by decreasing coverage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcCurve {
    pub points: Vec<RcPoint>,
}

/// Selective risk at every distinct confidence used as a threshold.
pub fn rc_curve(confidences: &[f64], labels: &[f64]) -> RcCurve {
    assert_eq!(confidences.len(), labels.len());
    let n = confidences.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]));
    let mut points = Vec::new();
    let mut loss = 0.0;
    let mut i = 0;
    while i < n {
        let tau = confidences[order[i]];
        while i < n && confidences[order[i]] == tau {
            loss += 1.0 - labels[order[i]];
            i += 1;
        }
        points.push(RcPoint {
            tau,
            coverage: i as f64 / n as f64,
            risk: loss / i as f64,
        });
    }
    points.reverse();
    RcCurve { points }
}

/// Area under the risk-coverage curve.
///
/// Step convention: the risk at a curve point applies on the coverage
/// interval back to the next smaller point, and the smallest point's risk is
/// held down to coverage 0. With distinct confidences this equals the mean
/// over answered-set prefixes of the prefix error rate.
pub fn aurc(curve: &RcCurve) -> f64 {
    let mut prev = 0.0;
    let mut area = 0.0;
    for p in curve.points.iter().rev() {
        area += p.risk * (p.coverage - prev);
        prev = p.coverage;
    }
    area
}

/// Largest coverage among curve points with risk at most `rho`, or 0.
pub fn coverage_at_risk(curve: &RcCurve, rho: f64) -> f64 {
    curve
        .points
        .iter()
        .filter(|p| p.risk <= rho + 1e-12)
        .map(|p| p.coverage)
        .fold(0.0, f64::max)
}

fn trial_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fraction of `b` bootstrap resamples whose selective risk over answered
/// records exceeds `alpha`. Resamples with nothing answered count as
/// non-violations.
pub fn bootstrap_violation_rate(answered: &[bool], labels: &[f64], alpha: f64, b: usize, seed: u64) -> Result<f64> {
    if answered.len() != labels.len() {
        return Err(Error::Schema("answer mask and labels differ in length".into()));
    }
    if b < 100 {
        return Err(Error::Config(format!("bootstrap needs at least 100 resamples, got {b}")));
    }
    let n = labels.len();
    if n == 0 {
        return Ok(0.0);
    }
    let violations: usize = (0..b as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let (mut count, mut loss) = (0usize, 0.0);
            for _ in 0..n {
                let i = rng.random_range(0..n);
                if answered[i] {
                    count += 1;
                    loss += 1.0 - labels[i];
                }
            }
            usize::from(count > 0 && loss / count as f64 > alpha)
        })
        .sum();
    Ok(violations as f64 / b as f64)
}

/// [`bootstrap_violation_rate`] with each record answered iff its confidence
/// reaches the policy threshold for its evidence coverage.
pub fn bootstrap_policy_violation_rate(
    confidences: &[f64],
    labels: &[f64],
    evidence_coverage: Option<&[f64]>,
    policy: &ThresholdPolicy,
    alpha: f64,
    b: usize,
    seed: u64,
) -> Result<f64> {
    let answered = confidences
        .iter()
        .enumerate()
        .map(|(i, &c)| Ok(c >= policy.tau_for(evidence_coverage.map(|v| v[i]))?))
        .collect::<Result<Vec<bool>>>()?;
    bootstrap_violation_rate(&answered, labels, alpha, b, seed)
}

pub fn rc_curve_csv(curve: &RcCurve) -> String {
    let mut s = String::from("tau,coverage,risk\n");
    for p in &curve.points {
        let _ = writeln!(s, "{},{},{}", p.tau, p.coverage, p.risk);
    }
    s
}

pub fn reliability_csv(bins: &[ReliabilityBin]) -> String {
    let mut s = String::from("mean_conf,frac_correct,count\n");
    for b in bins {
        let _ = writeln!(s, "{},{},{}", b.mean_conf, b.frac_correct, b.count);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub ece: f64,
    pub ece_adaptive: f64,
    pub brier: f64,
    pub nll: f64,
    pub aurc: f64,
    pub rho: f64,
    pub coverage_at_risk: f64,
    /// Coverage and risk of the supplied answer decisions, if any.
    pub coverage: Option<f64>,
    pub selective_risk: Option<f64>,
    pub violation_rate: Option<f64>,
}

/// Summary metrics. With an answer mask, also the achieved coverage and
/// risk and the bootstrap violation rate at level `rho` with `b` resamples.
pub fn summarize(confidences: &[f64], labels: &[f64], answered: Option<&[bool]>, rho: f64, b: usize, seed: u64) -> Result<EvalSummary> {
    if confidences.len() != labels.len() {
        return Err(Error::Schema("confidences and labels differ in length".into()));
    }
    if confidences.is_empty() {
        return Err(Error::InsufficientData { needed: 1, have: 0 });
    }
    let curve = rc_curve(confidences, labels);
    let (coverage, selective_risk, violation_rate) = match answered {
        Some(mask) => {
            let n_ans = mask.iter().filter(|a| **a).count();
            let loss: f64 = mask.iter().zip(labels).filter(|(a, _)| **a).map(|(_, r)| 1.0 - r).sum();
            (
                Some(n_ans as f64 / mask.len() as f64),
                Some(if n_ans == 0 { 0.0 } else { loss / n_ans as f64 }),
                Some(bootstrap_violation_rate(mask, labels, rho, b, seed)?),
            )
        }
        None => (None, None, None),
    };
    Ok(EvalSummary {
        n: confidences.len(),
        ece: metrics::ece(confidences, labels, BinScheme::Fixed15),
        ece_adaptive: metrics::ece(confidences, labels, BinScheme::Adaptive15),
        brier: metrics::brier(confidences, labels),
        nll: metrics::nll(confidences, labels),
        aurc: aurc(&curve),
        rho,
        coverage_at_risk: coverage_at_risk(&curve, rho),
        coverage,
        selective_risk,
        violation_rate,
    })
}
