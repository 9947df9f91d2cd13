//! Synthetic records with known ground truth.
//!
//! Each record has a latent quality `q ~ N(mean, sd)` that drives every
//! raw signal (token log-probs, entropies, sampled answers, claim scores,
//! verifier outcomes). The probability of correctness is a logistic link over
//! named features computed from the record itself, so `P(correct | features)`
//! is known exactly and stored in the debug field `true_prob`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::evidence::{assemble_features, names, ClaimScore, FeatureConfig, FeatureVector, RawSignalsRecord, SampleRecord, VerifierFlag};
use crate::head::sigmoid;
use crate::targets::{exact_label, CorrectnessLabel};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrueModel {
    pub quality_mean: f64,
    pub quality_sd: f64,
    /// Sampled generations per record.
    pub k_samples: usize,
    pub with_entropy: bool,
    pub with_rag: bool,
    pub with_verifier: bool,
    /// Correctness link: `P(correct) = sigmoid(intercept + sum w_f * f)`.
    pub intercept: f64,
    pub weights: BTreeMap<String, f64>,
}

impl Default for TrueModel {
    fn default() -> Self {
        let weights = [(names::SEQ_LOGLIK, 3.0), (names::SC_AGREE, 8.0), (names::RAG_COVERAGE, 4.0)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Self {
            quality_mean: 0.0,
            quality_sd: 1.0,
            k_samples: 5,
            with_entropy: true,
            with_rag: true,
            with_verifier: false,
            intercept: -3.0,
            weights,
        }
    }
}

impl TrueModel {
    /// Feature configuration covering every family the generator emits.
    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            seq: true,
            entropy: self.with_entropy,
            sc: true,
            sc_entailment: true,
            rag: self.with_rag,
            verifier: self.with_verifier,
            tool: self.with_verifier,
            ..FeatureConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_samples == 0 || !(self.quality_sd > 0.0) || !self.quality_mean.is_finite() || !self.intercept.is_finite() {
            return Err(Error::Config("true model needs k_samples > 0, quality_sd > 0 and finite parameters".into()));
        }
        let schema = self.feature_config().schema()?;
        for (name, w) in &self.weights {
            if schema.index_of(name).is_none() {
                return Err(Error::Config(format!("link weight for feature `{name}` the generator does not emit")));
            }
            if !w.is_finite() {
                return Err(Error::Config(format!("link weight for `{name}` is not finite")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Moves the latent quality mean; `P(correct | features)` is unchanged.
    MeanShift,
    /// Adds to the link intercept; `P(correct | features)` changes.
    LinkShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    #[serde(default)]
    pub true_model: TrueModel,
    #[serde(default)]
    pub shift: Option<ShiftSpec>,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            true_model: TrueModel::default(),
            shift: None,
            seed,
        }
    }
}

const ALT_KEYS: [&str; 3] = ["b", "c", "d"];

fn unit_noise(rng: &mut ChaCha8Rng, base: f64, spread: f64) -> f64 {
    (base + rng.random_range(-spread..=spread)).clamp(0.0, 1.0)
}

fn raw_record(id: String, q: f64, model: &TrueModel, rng: &mut ChaCha8Rng) -> RawSignalsRecord {
    let mut rec = RawSignalsRecord::new(id);
    let len = rng.random_range(8..=24);
    let lp = Normal::new(-1.0 - 0.5 * q, 0.6).expect("positive sd");
    rec.token_logprobs = Some((0..len).map(|_| -lp.sample(rng).exp()).collect());
    if model.with_entropy {
        let ent = Normal::new(-0.2 - 0.4 * q, 0.5).expect("positive sd");
        rec.token_entropies = Some((0..len).map(|_| ent.sample(rng).exp()).collect());
    }

    let k = model.k_samples;
    let p_main = sigmoid(0.3 + 1.2 * q);
    let p_pass = sigmoid(0.5 + q);
    let keys: Vec<&str> = (0..k)
        .map(|_| {
            if rng.random::<f64>() < p_main {
                "a"
            } else {
                ALT_KEYS[rng.random_range(0..ALT_KEYS.len())]
            }
        })
        .collect();
    let mut sim = vec![vec![1.0; k]; k];
    let mut ent = vec![vec![1.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let same = keys[i] == keys[j];
            let s = unit_noise(rng, if same { 0.9 } else { 0.3 }, 0.08);
            let e = unit_noise(rng, if same { 0.85 } else { 0.15 }, 0.1);
            sim[i][j] = s;
            sim[j][i] = s;
            ent[i][j] = e;
            ent[j][i] = e;
        }
    }
    rec.samples = keys
        .iter()
        .enumerate()
        .map(|(i, key)| SampleRecord {
            answer_key: key.to_string(),
            embedding_sim: Some(sim[i].clone()),
            entailment_pairs: Some(ent[i].clone()),
            verifier_pass: model.with_verifier.then(|| rng.random::<f64>() < p_pass),
        })
        .collect();

    if model.with_rag {
        let n_claims = rng.random_range(3..=6);
        let e_noise = Normal::new(0.8 * q, 1.0).expect("positive sd");
        let c_noise = Normal::new(-1.5 - q, 1.0).expect("positive sd");
        rec.claims = (0..n_claims)
            .map(|_| {
                let e = sigmoid(e_noise.sample(rng));
                let contra = sigmoid(c_noise.sample(rng));
                ClaimScore {
                    entailment: e,
                    contradicted: contra >= 0.5,
                    salient: rng.random::<f64>() < 0.8,
                    max_passage_entailment: e,
                    contradiction_score: contra,
                }
            })
            .collect();
    }
    if model.with_verifier {
        rec.verifier_flags = Some(
            (0..2)
                .map(|_| {
                    let pass = rng.random::<f64>() < p_pass;
                    VerifierFlag {
                        pass,
                        score: Some(unit_noise(rng, if pass { 0.8 } else { 0.2 }, 0.15)),
                    }
                })
                .collect(),
        );
    }
    rec
}

fn link_probability(features: &FeatureVector, model: &TrueModel, intercept_shift: f64) -> f64 {
    let s = model.intercept
        + intercept_shift
        + model
            .weights
            .iter()
            .map(|(name, w)| w * features.get(name).expect("validated feature name"))
            .sum::<f64>();
    sigmoid(s).clamp(1e-12, 1.0 - 1e-12)
}

/// Draws `spec.n` labelled records. Records carry `true_prob`; use
/// [`RawSignalsRecord::stripped`] before exporting them as training data.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<RawSignalsRecord>> {
    let model = &spec.true_model;
    model.validate()?;
    let config = model.feature_config();
    let (mean_shift, link_shift) = match spec.shift {
        Some(ShiftSpec { kind: ShiftKind::MeanShift, magnitude }) => (magnitude, 0.0),
        Some(ShiftSpec { kind: ShiftKind::LinkShift, magnitude }) => (0.0, magnitude),
        None => (0.0, 0.0),
    };
    let quality = Normal::new(model.quality_mean + mean_shift, model.quality_sd).expect("validated sd");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let q = quality.sample(&mut rng);
        let mut rec = raw_record(format!("syn-{}-{i}", spec.seed), q, model, &mut rng);
        let features = assemble_features(&rec, &config)?;
        let p = link_probability(&features, model, link_shift);
        rec.true_prob = Some(p);
        rec.label = Some(exact_label(rng.random::<f64>() < p));
        out.push(rec);
    }
    Ok(out)
}

/// Gaussian features `x0..x{d-1}` with a logistic correctness link.
#[derive(Debug, Clone)]
pub struct LogisticSample {
    pub features: Vec<FeatureVector>,
    pub labels: Vec<CorrectnessLabel>,
    pub true_probs: Vec<f64>,
}

pub fn synthetic_logistic(n: usize, weights: &[f64], intercept: f64, seed: u64) -> LogisticSample {
    let names: Vec<String> = (0..weights.len()).map(|j| format!("x{j}")).collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = LogisticSample {
        features: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        true_probs: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let x: Vec<f64> = weights.iter().map(|_| normal.sample(&mut rng)).collect();
        let p = sigmoid(intercept + x.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>());
        out.labels.push(exact_label(rng.random::<f64>() < p));
        out.true_probs.push(p);
        out.features.push(FeatureVector::from_parts(names.clone(), x));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_spec_gives_no_records() {
        assert!(generate_synthetic(&SyntheticSpec::new(0, 1)).unwrap().is_empty());
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let a = generate_synthetic(&SyntheticSpec::new(50, 9)).unwrap();
        assert_eq!(a, generate_synthetic(&SyntheticSpec::new(50, 9)).unwrap());
        assert_ne!(a, generate_synthetic(&SyntheticSpec::new(50, 10)).unwrap());
    }

    #[test]
    fn constant_link_gives_half_correct() {
        let mut spec = SyntheticSpec::new(10_000, 3);
        spec.true_model.intercept = 0.0;
        spec.true_model.weights.clear();
        let recs = generate_synthetic(&spec).unwrap();
        let freq = recs.iter().filter(|r| r.label.unwrap().value == 1.0).count() as f64 / 10_000.0;
        // 3 sigma of Binomial(10 000, 0.5) is 0.015.
        assert!((freq - 0.5).abs() <= 0.015, "{freq}");
        assert!(recs.iter().all(|r| r.true_prob == Some(0.5)));
    }

    #[test]
    fn records_are_valid_and_assemble() {
        let spec = SyntheticSpec {
            true_model: TrueModel {
                with_verifier: true,
                ..TrueModel::default()
            },
            ..SyntheticSpec::new(200, 4)
        };
        let config = spec.true_model.feature_config();
        for r in generate_synthetic(&spec).unwrap() {
            r.validate().unwrap();
            let p = r.true_prob.unwrap();
            assert!(p > 0.0 && p < 1.0);
            assert_eq!(assemble_features(&r, &config).unwrap().dim(), config.schema().unwrap().len());
        }
    }

    #[test]
    fn unknown_link_feature_is_rejected() {
        let mut spec = SyntheticSpec::new(5, 1);
        spec.true_model.weights.insert("tool_diag".into(), 1.0);
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn mean_shift_moves_accuracy() {
        let acc = |shift: Option<ShiftSpec>| {
            let spec = SyntheticSpec {
                shift,
                ..SyntheticSpec::new(4000, 5)
            };
            let recs = generate_synthetic(&spec).unwrap();
            recs.iter().map(|r| r.label.unwrap().value).sum::<f64>() / recs.len() as f64
        };
        let base = acc(None);
        let worse = acc(Some(ShiftSpec {
            kind: ShiftKind::MeanShift,
            magnitude: -1.0,
        }));
        assert!(worse < base - 0.05, "{base} vs {worse}");
    }

    #[test]
    fn logistic_sample_shapes() {
        let s = synthetic_logistic(100, &[1.0, -1.0, 0.5, 0.0], 0.2, 1);
        assert_eq!(s.features.len(), 100);
        assert_eq!(s.features[0].names, vec!["x0", "x1", "x2", "x3"]);
        assert!(s.true_probs.iter().all(|p| *p > 0.0 && *p < 1.0));
    }
}
