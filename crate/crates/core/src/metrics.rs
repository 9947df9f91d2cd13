//! Calibration metrics over (confidence, label) pairs.
//!
//! Labels are passed as plain values in `[0, 1]` so graded targets can be
//! scored with the same functions as binary ones.

use serde::{Deserialize, Serialize};

/// Number of bins used by both ECE schemes.
pub const ECE_BINS: usize = 15;

const NLL_EPS: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinScheme {
    /// Fifteen equal-width bins on `[0, 1]`.
    Fixed15,
    /// Fifteen equal-mass bins with quantile edges; tied confidences always
    /// share a bin.
    Adaptive15,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub mean_conf: f64,
    pub frac_correct: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMetricsReport {
    pub nll: f64,
    pub brier: f64,
    pub ece_fixed: f64,
    pub ece_adaptive: f64,
    pub reliability_bins: Vec<ReliabilityBin>,
}

fn bin_index_fixed(c: f64, bins: usize) -> usize {
    ((c * bins as f64).floor() as isize).clamp(0, bins as isize - 1) as usize
}

/// Bin assignment per example.
pub fn assign_bins(confidences: &[f64], scheme: BinScheme) -> Vec<usize> {
    match scheme {
        BinScheme::Fixed15 => confidences.iter().map(|&c| bin_index_fixed(c, ECE_BINS)).collect(),
        BinScheme::Adaptive15 => {
            let edges = adaptive_edges(confidences, ECE_BINS);
            confidences
                .iter()
                .map(|&c| edges.iter().filter(|&&e| e <= c).count())
                .collect()
        }
    }
}

/// Lower edges of bins `1..bins` at equal-mass positions of the sorted
/// confidences.
fn adaptive_edges(confidences: &[f64], bins: usize) -> Vec<f64> {
    let n = confidences.len();
    if n == 0 {
        return Vec::new();
    }
    let mut sorted = confidences.to_vec();
    sorted.sort_by(f64::total_cmp);
    (1..bins)
        .map(|b| sorted[(b * n / bins).min(n - 1)])
        .collect()
}

/// Per-bin aggregates, empty bins skipped, in bin order.
pub fn reliability_data(confidences: &[f64], labels: &[f64], scheme: BinScheme) -> Vec<ReliabilityBin> {
    assert_eq!(confidences.len(), labels.len(), "confidences and labels differ in length");
    let idx = assign_bins(confidences, scheme);
    let mut sum_c = [0.0; ECE_BINS];
    let mut sum_r = [0.0; ECE_BINS];
    let mut count = [0usize; ECE_BINS];
    for ((&b, &c), &r) in idx.iter().zip(confidences).zip(labels) {
        sum_c[b] += c;
        sum_r[b] += r;
        count[b] += 1;
    }
    (0..ECE_BINS)
        .filter(|&b| count[b] > 0)
        .map(|b| ReliabilityBin {
            mean_conf: sum_c[b] / count[b] as f64,
            frac_correct: sum_r[b] / count[b] as f64,
            count: count[b],
        })
        .collect()
}

/// `sum_b (n_b / n) |mean_conf_b - frac_correct_b|` over occupied bins.
pub fn ece(confidences: &[f64], labels: &[f64], scheme: BinScheme) -> f64 {
    let n = confidences.len();
    if n == 0 {
        return 0.0;
    }
    reliability_data(confidences, labels, scheme)
        .iter()
        .map(|b| b.count as f64 / n as f64 * (b.mean_conf - b.frac_correct).abs())
        .sum()
}

/// Mean squared error between confidence and (possibly graded) correctness.
pub fn brier(confidences: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(confidences.len(), labels.len());
    if confidences.is_empty() {
        return 0.0;
    }
    confidences.iter().zip(labels).map(|(c, r)| (c - r).powi(2)).sum::<f64>() / confidences.len() as f64
}

/// Mean cross-entropy `-(r ln c + (1 - r) ln(1 - c))`; for graded labels this
/// is the Beta cross-entropy against the Bernoulli mean `r`.
pub fn nll(confidences: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(confidences.len(), labels.len());
    if confidences.is_empty() {
        return 0.0;
    }
    confidences
        .iter()
        .zip(labels)
        .map(|(&c, &r)| bce(r, c))
        .sum::<f64>()
        / confidences.len() as f64
}

pub(crate) fn bce(r: f64, c: f64) -> f64 {
    let c = c.clamp(NLL_EPS, 1.0 - NLL_EPS);
    let mut l = 0.0;
    if r > 0.0 {
        l -= r * c.ln();
    }
    if r < 1.0 {
        l -= (1.0 - r) * (1.0 - c).ln();
    }
    l
}

pub fn calibration_report(confidences: &[f64], labels: &[f64]) -> CalibrationMetricsReport {
    CalibrationMetricsReport {
        nll: nll(confidences, labels),
        brier: brier(confidences, labels),
        ece_fixed: ece(confidences, labels, BinScheme::Fixed15),
        ece_adaptive: ece(confidences, labels, BinScheme::Adaptive15),
        reliability_bins: reliability_data(confidences, labels, BinScheme::Fixed15),
    }
}

/// Selective training loss with hard indicators:
/// mean of `1{c >= tau} (1 - r)` plus `beta * max(0, kappa - cov)`.
pub fn selective_loss(confidences: &[f64], labels: &[f64], tau: f64, kappa: f64, beta: f64) -> f64 {
    assert_eq!(confidences.len(), labels.len());
    let n = confidences.len();
    if n == 0 {
        return beta * kappa.max(0.0);
    }
    let mut errors = 0.0;
    let mut answered = 0usize;
    for (&c, &r) in confidences.iter().zip(labels) {
        if c >= tau {
            answered += 1;
            errors += 1.0 - r;
        }
    }
    let cov = answered as f64 / n as f64;
    errors / n as f64 + beta * (kappa - cov).max(0.0)
}

pub(crate) fn huber(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a <= delta {
        0.5 * x * x
    } else {
        delta * (a - 0.5 * delta)
    }
}

pub(crate) fn huber_grad(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        x
    } else {
        delta * x.signum()
    }
}

/// Huber penalty (parameter `delta`) on the local density of confidences in
/// `[tau - delta, tau + delta]`, i.e. the window fraction over `2 delta`.
pub fn coverage_smoothing_penalty(confidences: &[f64], tau: f64, delta: f64) -> f64 {
    assert!(delta > 0.0, "window half-width must be positive");
    if confidences.is_empty() {
        return 0.0;
    }
    let inside = confidences.iter().filter(|&&c| (c - tau).abs() <= delta).count();
    let density = inside as f64 / confidences.len() as f64 / (2.0 * delta);
    huber(density, delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn ece_examples() {
        let ones = vec![1.0; 10];
        assert_eq!(ece(&ones, &ones, BinScheme::Fixed15), 0.0);
        assert_eq!(ece(&ones, &vec![0.0; 10], BinScheme::Fixed15), 1.0);

        let c = vec![0.7; 10];
        let r: Vec<f64> = (0..10).map(|i| if i < 7 { 1.0 } else { 0.0 }).collect();
        assert!(ece(&c, &r, BinScheme::Fixed15) < 1e-12);
        assert!(ece(&c, &r, BinScheme::Adaptive15) < 1e-12);
        assert_eq!(reliability_data(&c, &r, BinScheme::Adaptive15).len(), 1);
    }

    #[test]
    fn adaptive_bins_are_equal_mass() {
        let c: Vec<f64> = (0..150).map(|i| (i as f64 + 0.5) / 150.0).collect();
        let r = vec![1.0; 150];
        let bins = reliability_data(&c, &r, BinScheme::Adaptive15);
        assert_eq!(bins.len(), 15);
        assert!(bins.iter().all(|b| b.count == 10));
    }

    #[test]
    fn bin_counts_sum_to_n() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let c: Vec<f64> = (0..97).map(|_| rng.random::<f64>()).collect();
        let r: Vec<f64> = c.iter().map(|&p| if rng.random::<f64>() < p { 1.0 } else { 0.0 }).collect();
        for scheme in [BinScheme::Fixed15, BinScheme::Adaptive15] {
            let total: usize = reliability_data(&c, &r, scheme).iter().map(|b| b.count).sum();
            assert_eq!(total, 97);
        }
        let rep = calibration_report(&c, &r);
        assert!(rep.nll.is_finite() && rep.brier.is_finite());
    }

    #[test]
    fn brier_and_nll_examples() {
        assert_eq!(brier(&[0.5], &[1.0]), 0.25);
        assert_eq!(brier(&[1.0, 0.0, 0.3], &[1.0, 0.0, 0.3]), 0.0);
        assert!((nll(&[0.8], &[1.0]) - 0.2231).abs() < 1e-4);
        assert!((nll(&[0.8], &[1.0]) + 0.8f64.ln()).abs() < 1e-15);
        assert!(nll(&[1.0], &[0.0]).is_finite());
    }

    #[test]
    fn selective_loss_examples() {
        assert_eq!(selective_loss(&[0.1, 0.2], &[0.0, 1.0], 0.5, 0.0, 1.0), 0.0);
        assert_eq!(selective_loss(&[0.9, 0.9], &[1.0, 0.0], 0.5, 0.0, 1.0), 0.5);
        assert_eq!(selective_loss(&[0.1, 0.2], &[0.0, 1.0], 0.5, 1.0, 2.0), 2.0);
    }

    #[test]
    fn smoothing_penalty_examples() {
        assert_eq!(coverage_smoothing_penalty(&[0.0, 0.1, 0.95], 0.5, 0.05), 0.0);
        let all = vec![0.5; 20];
        let p = coverage_smoothing_penalty(&all, 0.5, 0.05);
        // density = 1 / (2 * 0.05) = 10; Huber linear branch.
        assert!((p - 0.05 * (10.0 - 0.025)).abs() < 1e-12);
        let some = [0.5, 0.9, 0.9, 0.9];
        assert!(coverage_smoothing_penalty(&some, 0.5, 0.05) < p);
    }

    #[test]
    fn smoothing_penalty_is_stable_in_n() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let draw = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| rng.random::<f64>()).collect()
        };
        let small = draw(20_000, &mut rng);
        let large = draw(40_000, &mut rng);
        let a = coverage_smoothing_penalty(&small, 0.5, 0.1);
        let b = coverage_smoothing_penalty(&large, 0.5, 0.1);
        assert!((a - b).abs() / a < 0.10, "{a} vs {b}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ece_zero_when_bins_match(groups in prop::collection::vec((1usize..8, 0usize..8), 1..8)) {
                // Each group sits at one confidence, alone in its bin, with
                // accuracy equal to that confidence.
                let mut c = Vec::new();
                let mut r = Vec::new();
                let mut used = std::collections::BTreeSet::new();
                for (hits, misses) in groups {
                    let total = hits + misses;
                    let acc = hits as f64 / total as f64;
                    let bin = ((acc * 15.0) as usize).min(14);
                    if !used.insert(bin) { continue; }
                    for i in 0..total {
                        c.push(acc);
                        r.push(if i < hits { 1.0 } else { 0.0 });
                    }
                }
                prop_assume!(!c.is_empty());
                prop_assert!(ece(&c, &r, BinScheme::Fixed15) < 1e-12);
            }
        }
    }
}
