//! Run configuration shared by training, inference and the CLI.

use serde::{Deserialize, Serialize};

use crate::evidence::FeatureConfig;
use crate::hashing::hash_canonical;
use crate::head::HeadConfig;
use crate::risk::{ConformalRule, PolicyMode, Smoothing, DEFAULT_LTT_DELTA, DEFAULT_MIN_BUCKET_SIZE};
use crate::targets::LabelKind;
use crate::{Error, Result};

/// Threshold rule for the conformal modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleChoice {
    /// Binomial learn-then-test for binary labels, soft rule for graded ones.
    #[default]
    Auto,
    Ltt,
    Quantile,
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub mode: PolicyMode,
    /// Risk budget: `rho` in validation mode, `alpha` in the conformal modes.
    pub alpha: f64,
    pub rule: RuleChoice,
    /// Used by the quantile rule only.
    pub smoothing: Smoothing,
    /// Test level of the learn-then-test rule.
    pub ltt_delta: f64,
    /// Interior evidence-coverage cut points for bucketed mode.
    pub bucket_edges: Vec<f64>,
    pub min_bucket_size: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            mode: PolicyMode::Conformal,
            alpha: 0.05,
            rule: RuleChoice::Auto,
            smoothing: Smoothing::None,
            ltt_delta: DEFAULT_LTT_DELTA,
            bucket_edges: vec![0.5],
            min_bucket_size: DEFAULT_MIN_BUCKET_SIZE,
        }
    }
}

impl PolicyConfig {
    pub fn resolve_rule(&self, kind: LabelKind) -> ConformalRule {
        match (self.rule, kind) {
            (RuleChoice::Auto, LabelKind::Graded) | (RuleChoice::Soft, _) => ConformalRule::Soft,
            (RuleChoice::Auto | RuleChoice::Ltt, _) => ConformalRule::Ltt { delta: self.ltt_delta },
            (RuleChoice::Quantile, _) => ConformalRule::Quantile {
                smoothing: self.smoothing,
            },
        }
    }
}

/// Retry gate: one retrieval refresh when `c` is within `margin` below the
/// threshold and evidence coverage is below `coverage_below`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryConfig {
    pub enabled: bool,
    pub margin: f64,
    pub coverage_below: f64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            margin: 0.05,
            coverage_below: 0.5,
        }
    }
}

/// Cut-offs of the refusal reason ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReasonConfig {
    pub verifier_below: f64,
    pub coverage_below: f64,
    pub cluster_mass_below: f64,
}

impl Default for ReasonConfig {
    fn default() -> Self {
        Self {
            verifier_below: 0.5,
            coverage_below: 0.5,
            cluster_mass_below: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub features: FeatureConfig,
    /// The head seed is replaced by `seed` during training.
    pub head: HeadConfig,
    pub isotonic: bool,
    pub policy: PolicyConfig,
    /// Train, tune and calibration fractions.
    pub splits: [f64; 3],
    pub retry: RetryConfig,
    pub reasons: ReasonConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            features: FeatureConfig::default(),
            head: HeadConfig::default(),
            isotonic: true,
            policy: PolicyConfig::default(),
            splits: [0.6, 0.2, 0.2],
            retry: RetryConfig::default(),
            reasons: ReasonConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.head.validate()?;
        let p = &self.policy;
        let alpha_ok = match p.mode {
            PolicyMode::Validation => (0.0..=1.0).contains(&p.alpha),
            _ => p.alpha > 0.0 && p.alpha < 1.0,
        };
        if !alpha_ok {
            return Err(Error::Config(format!("risk budget {} invalid for {:?} mode", p.alpha, p.mode)));
        }
        if !(p.ltt_delta > 0.0 && p.ltt_delta < 1.0) {
            return Err(Error::Config(format!("ltt_delta = {} outside (0, 1)", p.ltt_delta)));
        }
        if p.mode == PolicyMode::ConformalBucketed && !self.features.rag {
            return Err(Error::Config("bucketed mode needs the rag feature family".into()));
        }
        if p.bucket_edges.windows(2).any(|w| w[0] >= w[1]) || p.bucket_edges.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
            return Err(Error::Config(format!("bucket edges {:?} must increase strictly within (0, 1)", p.bucket_edges)));
        }
        if self.splits.iter().any(|f| !(*f > 0.0)) || (self.splits.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {:?} must be positive and sum to 1", self.splits)));
        }
        let r = &self.retry;
        if !(0.0..=1.0).contains(&r.margin) || !(0.0..=1.0).contains(&r.coverage_below) {
            return Err(Error::Config("retry margin and coverage cut-off must lie in [0, 1]".into()));
        }
        let q = &self.reasons;
        if [q.verifier_below, q.coverage_below, q.cluster_mass_below].iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::Config("reason cut-offs must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn config_hash(&self) -> String {
        hash_canonical(self).expect("config serializes")
    }
}
