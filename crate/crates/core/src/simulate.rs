//! Monte Carlo check of conformal threshold validity on synthetic data.
//!
//! A scorer is trained once on pre-shift data. Each trial then draws a
//! calibration set and a test set from the same (possibly shifted)
//! distribution, selects a threshold on the calibration set, and measures
//! selective risk on the test set.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evidence::{FeatureVector, RawSignalsRecord};
use crate::hashing::hash_canonical;
use crate::head::HeadConfig;
use crate::pipeline::{extract_features, fit_scorer, Scorer};
use crate::risk::{risk_at, validation_threshold, ConformalRule, Smoothing, DEFAULT_LTT_DELTA};
use crate::synthetic::{generate_synthetic, ShiftSpec, SyntheticSpec, TrueModel};
use crate::targets::CorrectnessLabel;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSpec {
    pub seed: u64,
    pub trials: usize,
    pub calibration_size: usize,
    pub test_size: usize,
    pub alpha: f64,
    /// Records for fitting the scorer; a quarter more are drawn for tuning.
    pub train_size: usize,
    pub true_model: TrueModel,
    /// Applied to calibration and test draws, never to scorer training.
    pub shift: Option<ShiftSpec>,
    pub rule: ConformalRule,
    pub head: HeadConfig,
    pub isotonic: bool,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 1000,
            calibration_size: 500,
            test_size: 500,
            alpha: 0.05,
            train_size: 2000,
            true_model: TrueModel::default(),
            shift: None,
            rule: ConformalRule::Ltt {
                delta: DEFAULT_LTT_DELTA,
            },
            head: HeadConfig::default(),
            isotonic: true,
            threads: None,
        }
    }
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 || self.calibration_size == 0 || self.test_size == 0 || self.train_size < 20 {
            return Err(Error::Config("simulation sizes must be positive and train_size >= 20".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha = {} outside (0, 1)", self.alpha)));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        self.true_model.validate()?;
        self.head.validate()
    }

    /// Hash of the spec without the thread count, which never changes results.
    pub fn spec_hash(&self) -> String {
        let spec = Self {
            threads: None,
            ..self.clone()
        };
        hash_canonical(&spec).expect("spec serializes")
    }
}

/// Test-set results of one threshold rule across trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSummary {
    /// Fraction of trials with test selective risk above `alpha`.
    pub violation_rate: f64,
    pub mean_risk: f64,
    pub risk_sd: f64,
    pub mean_coverage: f64,
    /// Trials in which the rule abstained on everything.
    pub abstain_all_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub spec_hash: String,
    pub seed: u64,
    pub trials: usize,
    pub alpha: f64,
    pub calibration_size: usize,
    pub test_size: usize,
    pub shift: Option<ShiftSpec>,
    pub rule: ConformalRule,
    /// Accuracy of the scorer's training population and of trial draws.
    pub base_accuracy_train: f64,
    pub base_accuracy_trials: f64,
    /// The configured conformal rule, thresholds refit every trial.
    pub crc: RuleSummary,
    /// The error-quantile rule, thresholds refit every trial.
    pub quantile_rule: RuleSummary,
    /// A validation threshold (`rho = alpha`) fit once on pre-shift data.
    pub validation_pre_shift: RuleSummary,
}

struct Trial {
    crc: (f64, f64, bool),
    quantile: (f64, f64, bool),
    validation: (f64, f64, bool),
    accuracy: f64,
}

fn labelled(records: &[RawSignalsRecord], config: &crate::evidence::FeatureConfig) -> Result<(Vec<FeatureVector>, Vec<CorrectnessLabel>)> {
    let z = extract_features(records, config)?;
    let l = records.iter().map(|r| r.label.expect("synthetic records are labelled")).collect();
    Ok((z, l))
}

fn draw(model: &TrueModel, n: usize, seed: u64, shift: Option<ShiftSpec>) -> Result<Vec<RawSignalsRecord>> {
    generate_synthetic(&SyntheticSpec {
        n,
        true_model: model.clone(),
        shift,
        seed,
    })
}

fn summarize(results: &[(f64, f64, bool)], alpha: f64) -> RuleSummary {
    let n = results.len() as f64;
    let mean_risk = results.iter().map(|r| r.0).sum::<f64>() / n;
    let var = results.iter().map(|r| (r.0 - mean_risk).powi(2)).sum::<f64>() / n;
    RuleSummary {
        violation_rate: results.iter().filter(|r| r.0 > alpha).count() as f64 / n,
        mean_risk,
        risk_sd: var.sqrt(),
        mean_coverage: results.iter().map(|r| r.1).sum::<f64>() / n,
        abstain_all_trials: results.iter().filter(|r| r.2).count(),
    }
}

fn evaluate(c: &[f64], r: &[f64], tau: f64) -> (f64, f64, bool) {
    let s = risk_at(c, r, tau);
    (s.risk, s.coverage, s.zero_coverage)
}

fn run_trial(spec: &SimulationSpec, scorer: &Scorer, validation_tau: f64, trial_seed: u64) -> Result<Trial> {
    let m = spec.calibration_size;
    let config = spec.true_model.feature_config();
    let records = draw(&spec.true_model, m + spec.test_size, trial_seed, spec.shift)?;
    let (z, l) = labelled(&records, &config)?;
    let c = scorer.confidences(&z)?;
    let r: Vec<f64> = l.iter().map(|x| x.value).collect();
    let (cal_c, test_c) = c.split_at(m);
    let (cal_r, test_r) = r.split_at(m);
    let (crc_tau, _) = spec.rule.threshold(cal_c, cal_r, spec.alpha)?;
    let (q_tau, _) = ConformalRule::Quantile {
        smoothing: Smoothing::None,
    }
    .threshold(cal_c, cal_r, spec.alpha)?;
    Ok(Trial {
        crc: evaluate(test_c, test_r, crc_tau),
        quantile: evaluate(test_c, test_r, q_tau),
        validation: evaluate(test_c, test_r, validation_tau),
        accuracy: r.iter().sum::<f64>() / r.len() as f64,
    })
}

fn trial_seeds(seed: u64, trials: usize) -> Vec<u64> {
    (0..trials as u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i + 1);
            rng.next_u64()
        })
        .collect()
}

/// Runs the validity experiment. Deterministic given the spec, whatever the
/// thread count.
pub fn run_simulation(spec: &SimulationSpec) -> Result<ValidityReport> {
    spec.validate()?;
    match spec.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| simulate(spec)),
        None => simulate(spec),
    }
}

fn simulate(spec: &SimulationSpec) -> Result<ValidityReport> {
    let config = spec.true_model.feature_config();
    let mut root = ChaCha8Rng::seed_from_u64(spec.seed);
    let (train_seed, tune_seed, val_seed) = (root.next_u64(), root.next_u64(), root.next_u64());

    let train = draw(&spec.true_model, spec.train_size, train_seed, None)?;
    let tune = draw(&spec.true_model, (spec.train_size / 4).max(20), tune_seed, None)?;
    let (tr_z, tr_l) = labelled(&train, &config)?;
    let (tu_z, tu_l) = labelled(&tune, &config)?;
    let head = HeadConfig {
        seed: spec.seed,
        ..spec.head.clone()
    };
    let scorer = fit_scorer((&tr_z, &tr_l), (&tu_z, &tu_l), &head, spec.isotonic)?;

    let pre = draw(&spec.true_model, spec.calibration_size, val_seed, None)?;
    let (pre_z, pre_l) = labelled(&pre, &config)?;
    let pre_c = scorer.confidences(&pre_z)?;
    let pre_r: Vec<f64> = pre_l.iter().map(|x| x.value).collect();
    let validation_tau = validation_threshold(&pre_c, &pre_r, spec.alpha)?;

    let trials: Vec<Trial> = trial_seeds(spec.seed, spec.trials)
        .into_par_iter()
        .map(|s| run_trial(spec, &scorer, validation_tau, s))
        .collect::<Result<_>>()?;

    let col = |f: fn(&Trial) -> (f64, f64, bool)| trials.iter().map(f).collect::<Vec<_>>();
    Ok(ValidityReport {
        spec_hash: spec.spec_hash(),
        seed: spec.seed,
        trials: spec.trials,
        alpha: spec.alpha,
        calibration_size: spec.calibration_size,
        test_size: spec.test_size,
        shift: spec.shift,
        rule: spec.rule,
        base_accuracy_train: tr_l.iter().map(|l| l.value).sum::<f64>() / tr_l.len() as f64,
        base_accuracy_trials: trials.iter().map(|t| t.accuracy).sum::<f64>() / trials.len() as f64,
        crc: summarize(&col(|t| t.crc), spec.alpha),
        quantile_rule: summarize(&col(|t| t.quantile), spec.alpha),
        validation_pre_shift: summarize(&col(|t| t.validation), spec.alpha),
    })
}
