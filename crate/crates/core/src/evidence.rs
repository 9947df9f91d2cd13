//! Evidence layer: raw upstream signals and the fused feature vector.
//!
//! Every feature is computed from numeric fields that upstream producers
//! (the base model, the sampler, the NLI scorer, tools) have already written
//! into a [`RawSignalsRecord`]. Feature families can be switched on and off
//! through [`FeatureConfig`]; the enabled families determine the ordered
//! schema of the resulting [`FeatureVector`].

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::hashing::sha256_hex;
use crate::targets::CorrectnessLabel;
use crate::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSignalsRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_entropies: Option<Vec<f64>>,
    #[serde(default)]
    pub samples: Vec<SampleRecord>,
    #[serde(default)]
    pub claims: Vec<ClaimScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verifier_flags: Option<Vec<VerifierFlag>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_diag: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<CorrectnessLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bucket_hint: Option<String>,
    /// Ground-truth probability of correctness, only set by the synthetic
    /// generator. Never read by feature extraction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_prob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub answer_key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_sim: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entailment_pairs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verifier_pass: Option<bool>,
}

impl SampleRecord {
    pub fn keyed(key: impl Into<String>) -> Self {
        Self {
            answer_key: key.into(),
            embedding_sim: None,
            entailment_pairs: None,
            verifier_pass: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimScore {
    pub entailment: f64,
    pub contradicted: bool,
    pub salient: bool,
    pub max_passage_entailment: f64,
    pub contradiction_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifierFlag {
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

fn unit(x: f64) -> bool {
    x.is_finite() && (0.0..=1.0).contains(&x)
}

impl RawSignalsRecord {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            token_logprobs: None,
            token_entropies: None,
            samples: Vec::new(),
            claims: Vec::new(),
            verifier_flags: None,
            tool_diag: None,
            label: None,
            bucket_hint: None,
            true_prob: None,
        }
    }

    /// Checks the value-range invariants of every populated field.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidSignal(format!("record {}: {what}", self.id)));
        if let Some(lp) = &self.token_logprobs {
            if let Some(x) = lp.iter().find(|x| !x.is_finite() || **x > 0.0) {
                return bad(format!("token log-prob {x} is not a finite value <= 0"));
            }
        }
        if let Some(ents) = &self.token_entropies {
            if let Some(x) = ents.iter().find(|x| !x.is_finite() || **x < 0.0) {
                return bad(format!("token entropy {x} is not a finite value >= 0"));
            }
        }
        let k = self.samples.len();
        for (i, s) in self.samples.iter().enumerate() {
            for (name, row) in [("embedding_sim", &s.embedding_sim), ("entailment_pairs", &s.entailment_pairs)] {
                if let Some(row) = row {
                    if row.len() != k {
                        return bad(format!("sample {i} {name} has length {} but K = {k}", row.len()));
                    }
                    if row.iter().any(|x| !unit(*x)) {
                        return bad(format!("sample {i} {name} has entries outside [0,1]"));
                    }
                }
            }
            if let Some(row) = &s.embedding_sim {
                if (row[i] - 1.0).abs() > SYMMETRY_TOL {
                    return bad(format!("sample {i} self-similarity is {} not 1", row[i]));
                }
            }
        }
        for (j, c) in self.claims.iter().enumerate() {
            if !unit(c.entailment) || !unit(c.max_passage_entailment) || !unit(c.contradiction_score) {
                return bad(format!("claim {j} has scores outside [0,1]"));
            }
        }
        if let Some(flags) = &self.verifier_flags {
            if flags.iter().any(|f| f.score.is_some_and(|s| !unit(s))) {
                return bad("verifier score outside [0,1]".into());
            }
        }
        if let Some(d) = self.tool_diag {
            if !unit(d) {
                return bad(format!("tool_diag {d} outside [0,1]"));
            }
        }
        Ok(())
    }

    /// Copy with the synthetic ground-truth field removed.
    pub fn stripped(&self) -> Self {
        Self {
            true_prob: None,
            ..self.clone()
        }
    }
}

/// Mean of the emitted-token log-probabilities.
pub fn length_normalized_loglik(token_logprobs: &[f64]) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(Error::missing("seq", "no token log-probabilities"));
    }
    if let Some(x) = token_logprobs.iter().find(|x| !x.is_finite() || **x > 0.0) {
        return Err(Error::InvalidSignal(format!("token log-prob {x} must be finite and <= 0")));
    }
    Ok(mean(token_logprobs))
}

/// Mean per-position entropy in nats.
pub fn mean_token_entropy(token_entropies: &[f64]) -> Result<f64> {
    if token_entropies.is_empty() {
        return Err(Error::missing("entropy", "no token entropies"));
    }
    if let Some(x) = token_entropies.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::InvalidSignal(format!("token entropy {x} must be finite and >= 0")));
    }
    Ok(mean(token_entropies))
}

/// Mid-rank percentile of `bar_ell` in `reference_pool`:
/// `(#below + #ties / 2) / |pool|`.
pub fn rank_normalized_logprob(bar_ell: f64, reference_pool: &[f64]) -> Result<f64> {
    if reference_pool.is_empty() {
        return Err(Error::missing("seq", "empty reference pool"));
    }
    let below = reference_pool.iter().filter(|&&x| x < bar_ell).count() as f64;
    let ties = reference_pool.iter().filter(|&&x| x == bar_ell).count() as f64;
    Ok((below + 0.5 * ties) / reference_pool.len() as f64)
}

fn answer_counts(samples: &[SampleRecord]) -> Result<Vec<usize>> {
    if samples.is_empty() {
        return Err(Error::missing("sc", "no sampled answers"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in samples {
        *counts.entry(s.answer_key.as_str()).or_default() += 1;
    }
    // Sorted so that float summation order does not depend on hash order.
    let mut v: Vec<usize> = counts.into_values().collect();
    v.sort_unstable();
    Ok(v)
}

/// Largest share of samples agreeing on one answer key.
pub fn agreement_rate(samples: &[SampleRecord]) -> Result<f64> {
    let counts = answer_counts(samples)?;
    let max = counts.last().copied().unwrap_or(0);
    Ok(max as f64 / samples.len() as f64)
}

/// Entropy (nats) of the empirical answer distribution.
pub fn predictive_entropy(samples: &[SampleRecord]) -> Result<f64> {
    let counts = answer_counts(samples)?;
    let k = samples.len() as f64;
    let h: f64 = counts
        .iter()
        .map(|&c| {
            let p = c as f64 / k;
            -p * p.ln()
        })
        .sum();
    Ok(h.max(0.0))
}

/// Fraction of samples that pass the verifier.
pub fn verifier_consistency(samples: &[SampleRecord]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::missing("verifier", "no sampled answers"));
    }
    let mut passed = 0usize;
    for (i, s) in samples.iter().enumerate() {
        match s.verifier_pass {
            Some(true) => passed += 1,
            Some(false) => {}
            None => return Err(Error::missing("verifier", format!("sample {i} has no verifier_pass"))),
        }
    }
    Ok(passed as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemanticDispersion {
    pub largest_cluster_mass: f64,
    /// `None` when some sample carries no entailment row.
    pub avg_pairwise_entailment: Option<f64>,
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Clusters samples by linking pairs with similarity `>= link_threshold` and
/// reports the largest connected component's share of `K`, plus the mean
/// off-diagonal pairwise entailment.
pub fn semantic_dispersion(samples: &[SampleRecord], link_threshold: f64) -> Result<SemanticDispersion> {
    let k = samples.len();
    if k == 0 {
        return Err(Error::missing("sc", "no sampled answers"));
    }
    if k == 1 {
        return Ok(SemanticDispersion {
            largest_cluster_mass: 1.0,
            avg_pairwise_entailment: Some(0.0),
        });
    }
    let mut sims = Vec::with_capacity(k);
    for (i, s) in samples.iter().enumerate() {
        match &s.embedding_sim {
            Some(row) if row.len() == k => sims.push(row.as_slice()),
            Some(row) => {
                return Err(Error::InvalidSignal(format!(
                    "sample {i} similarity row has length {} but K = {k}",
                    row.len()
                )))
            }
            None => return Err(Error::missing("sc", format!("sample {i} has no embedding_sim row"))),
        }
    }
    let mut dsu = DisjointSet::new(k);
    for i in 0..k {
        for j in (i + 1)..k {
            if (sims[i][j] - sims[j][i]).abs() > SYMMETRY_TOL {
                return Err(Error::InvalidSignal(format!(
                    "similarity matrix is asymmetric at ({i},{j}): {} vs {}",
                    sims[i][j], sims[j][i]
                )));
            }
            if sims[i][j] >= link_threshold {
                dsu.union(i, j);
            }
        }
    }
    let mut sizes = vec![0usize; k];
    for i in 0..k {
        let r = dsu.find(i);
        sizes[r] += 1;
    }
    let largest = sizes.into_iter().max().unwrap_or(1);

    let avg_pairwise_entailment = samples
        .iter()
        .map(|s| s.entailment_pairs.as_deref().filter(|r| r.len() == k))
        .collect::<Option<Vec<_>>>()
        .map(|rows| {
            let mut total = 0.0;
            for (i, row) in rows.iter().enumerate() {
                for (j, e) in row.iter().enumerate() {
                    if i != j {
                        total += e;
                    }
                }
            }
            total / (k * (k - 1)) as f64
        });

    Ok(SemanticDispersion {
        largest_cluster_mass: largest as f64 / k as f64,
        avg_pairwise_entailment,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RagFeatures {
    pub coverage: f64,
    pub align: f64,
    pub conflict: f64,
    /// No salient claims were available; the three values are zero.
    pub degenerate: bool,
}

/// Retrieval compatibility over salient claims: supported fraction, mean
/// maximum entailment and contradiction rate.
pub fn rag_features(claims: &[ClaimScore], support_threshold: f64, conflict_threshold: f64) -> RagFeatures {
    let salient: Vec<&ClaimScore> = claims.iter().filter(|c| c.salient).collect();
    if salient.is_empty() {
        return RagFeatures {
            coverage: 0.0,
            align: 0.0,
            conflict: 0.0,
            degenerate: true,
        };
    }
    let n = salient.len() as f64;
    let supported = salient
        .iter()
        .filter(|c| c.max_passage_entailment >= support_threshold)
        .count() as f64;
    let conflicting = salient
        .iter()
        .filter(|c| c.contradiction_score >= conflict_threshold)
        .count() as f64;
    let align = salient.iter().map(|c| c.max_passage_entailment).sum::<f64>() / n;
    RagFeatures {
        coverage: supported / n,
        align,
        conflict: conflicting / n,
        degenerate: false,
    }
}

/// Signal families that can be toggled independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFamily {
    /// Length-normalized log-likelihood and its reference-pool percentile.
    Seq,
    /// Mean token entropy.
    Entropy,
    /// Agreement, predictive entropy and largest semantic cluster mass.
    Sc,
    /// Mean pairwise entailment among samples.
    ScEntailment,
    /// Retrieval coverage, alignment and conflict.
    Rag,
    /// Fraction of samples passing the verifier.
    Verifier,
    /// Tool pass rate and mean tool score.
    Tool,
    /// Tool diagnostic score.
    ToolDiag,
}

impl FeatureFamily {
    pub const ALL: [FeatureFamily; 8] = [
        FeatureFamily::Seq,
        FeatureFamily::Entropy,
        FeatureFamily::Sc,
        FeatureFamily::ScEntailment,
        FeatureFamily::Rag,
        FeatureFamily::Verifier,
        FeatureFamily::Tool,
        FeatureFamily::ToolDiag,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureFamily::Seq => "seq",
            FeatureFamily::Entropy => "entropy",
            FeatureFamily::Sc => "sc",
            FeatureFamily::ScEntailment => "sc_entailment",
            FeatureFamily::Rag => "rag",
            FeatureFamily::Verifier => "verifier",
            FeatureFamily::Tool => "tool",
            FeatureFamily::ToolDiag => "tool_diag",
        }
    }

    /// Needs access to model logits (excluded in API-only deployments).
    pub fn is_logit_derived(self) -> bool {
        matches!(self, FeatureFamily::Seq | FeatureFamily::Entropy)
    }
}

pub mod names {
    pub const SEQ_LOGLIK: &str = "seq_loglik";
    pub const SEQ_RANK_PCT: &str = "seq_rank_pct";
    pub const TOKEN_ENTROPY: &str = "token_entropy";
    pub const SC_AGREE: &str = "sc_agree";
    pub const SC_ENTROPY: &str = "sc_entropy";
    pub const SC_CLUSTER_MASS: &str = "sc_cluster_mass";
    pub const SC_PAIRWISE_ENTAILMENT: &str = "sc_pairwise_entailment";
    pub const RAG_COVERAGE: &str = "rag_coverage";
    pub const RAG_ALIGN: &str = "rag_align";
    pub const RAG_CONFLICT: &str = "rag_conflict";
    pub const VERIFIER_CONSISTENCY: &str = "verifier_consistency";
    pub const TOOL_PASS_RATE: &str = "tool_pass_rate";
    pub const TOOL_SCORE: &str = "tool_score";
    pub const TOOL_DIAG: &str = "tool_diag";

    /// Features computed directly from token log-probabilities, which the
    /// head rescales by its temperature.
    pub fn is_logit_derived(name: &str) -> bool {
        name == SEQ_LOGLIK || name == TOKEN_ENTROPY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub seq: bool,
    pub entropy: bool,
    pub sc: bool,
    pub sc_entailment: bool,
    pub rag: bool,
    pub verifier: bool,
    pub tool: bool,
    pub tool_diag: bool,
    /// Similarity at or above which two samples share a cluster.
    pub link_threshold: f64,
    pub support_threshold: f64,
    pub conflict_threshold: f64,
    /// Development-set log-likelihoods for the rank feature. When empty the
    /// rank feature is left out of the schema.
    pub reference_pool: Vec<f64>,
    /// Per-feature values used when a family's signals are absent. A family
    /// with missing signals and no imputation for each of its features is an
    /// error.
    pub imputation: BTreeMap<String, f64>,
    pub min_dim: usize,
    pub max_dim: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            seq: true,
            entropy: false,
            sc: true,
            sc_entailment: false,
            rag: false,
            verifier: false,
            tool: false,
            tool_diag: false,
            link_threshold: 0.75,
            support_threshold: 0.5,
            conflict_threshold: 0.5,
            reference_pool: Vec::new(),
            imputation: BTreeMap::new(),
            min_dim: 1,
            max_dim: 32,
        }
    }
}

impl FeatureConfig {
    /// No access to logits: drop the likelihood and entropy families.
    pub fn api_only(mut self) -> Self {
        self.seq = false;
        self.entropy = false;
        self
    }

    pub fn enabled(&self, family: FeatureFamily) -> bool {
        match family {
            FeatureFamily::Seq => self.seq,
            FeatureFamily::Entropy => self.entropy,
            FeatureFamily::Sc => self.sc,
            FeatureFamily::ScEntailment => self.sc_entailment,
            FeatureFamily::Rag => self.rag,
            FeatureFamily::Verifier => self.verifier,
            FeatureFamily::Tool => self.tool,
            FeatureFamily::ToolDiag => self.tool_diag,
        }
    }

    pub fn families(&self) -> Vec<FeatureFamily> {
        FeatureFamily::ALL.into_iter().filter(|f| self.enabled(*f)).collect()
    }

    fn family_features(&self, family: FeatureFamily) -> Vec<&'static str> {
        use names::*;
        match family {
            FeatureFamily::Seq if self.reference_pool.is_empty() => vec![SEQ_LOGLIK],
            FeatureFamily::Seq => vec![SEQ_LOGLIK, SEQ_RANK_PCT],
            FeatureFamily::Entropy => vec![TOKEN_ENTROPY],
            FeatureFamily::Sc => vec![SC_AGREE, SC_ENTROPY, SC_CLUSTER_MASS],
            FeatureFamily::ScEntailment => vec![SC_PAIRWISE_ENTAILMENT],
            FeatureFamily::Rag => vec![RAG_COVERAGE, RAG_ALIGN, RAG_CONFLICT],
            FeatureFamily::Verifier => vec![VERIFIER_CONSISTENCY],
            FeatureFamily::Tool => vec![TOOL_PASS_RATE, TOOL_SCORE],
            FeatureFamily::ToolDiag => vec![TOOL_DIAG],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("link_threshold", self.link_threshold),
            ("support_threshold", self.support_threshold),
            ("conflict_threshold", self.conflict_threshold),
        ] {
            if !unit(t) {
                return Err(Error::Config(format!("{name} = {t} must lie in [0,1]")));
            }
        }
        if self.reference_pool.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("reference_pool has non-finite entries".into()));
        }
        if self.imputation.values().any(|x| !x.is_finite()) {
            return Err(Error::Config("imputation values must be finite".into()));
        }
        if self.min_dim == 0 || self.min_dim > self.max_dim {
            return Err(Error::Config(format!(
                "dimension range [{}, {}] is empty",
                self.min_dim, self.max_dim
            )));
        }
        let schema = self.schema()?;
        let d = schema.len();
        if d < self.min_dim || d > self.max_dim {
            return Err(Error::Config(format!(
                "schema has {d} features, outside [{}, {}]",
                self.min_dim, self.max_dim
            )));
        }
        for key in self.imputation.keys() {
            if !schema.names.iter().any(|n| n == key) {
                return Err(Error::Config(format!("imputation for unknown feature `{key}`")));
            }
        }
        Ok(())
    }

    /// Ordered feature names for the enabled families.
    pub fn schema(&self) -> Result<FeatureSchema> {
        let mut names = Vec::new();
        let mut logit_derived = Vec::new();
        for family in self.families() {
            for name in self.family_features(family) {
                names.push(name.to_string());
                logit_derived.push(names::is_logit_derived(name));
            }
        }
        if names.is_empty() {
            return Err(Error::Config("every feature family is disabled".into()));
        }
        Ok(FeatureSchema { names, logit_derived })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub names: Vec<String>,
    /// Parallel to `names`: whether the feature is rescaled by temperature.
    pub logit_derived: Vec<bool>,
}

impl FeatureSchema {
    pub fn from_names(names: Vec<String>) -> Self {
        let logit_derived = names.iter().map(|n| names::is_logit_derived(n)).collect();
        Self { names, logit_derived }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Hex SHA-256 of the ordered names and temperature flags.
    pub fn hash(&self) -> String {
        let mut text = String::new();
        for (n, l) in self.names.iter().zip(&self.logit_derived) {
            text.push_str(n);
            text.push(if *l { '*' } else { ' ' });
            text.push('\n');
        }
        sha256_hex(text.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub names: Vec<String>,
    pub values: Vec<f64>,
    /// Set when the retrieval family had no salient claims to score.
    #[serde(default)]
    pub degenerate_evidence: bool,
    /// Families whose values came from the imputation table.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub imputed: Vec<FeatureFamily>,
}

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }

    /// Bare vector without provenance flags, for tests and synthetic data.
    pub fn from_parts(names: Vec<String>, values: Vec<f64>) -> Self {
        Self {
            names,
            values,
            degenerate_evidence: false,
            imputed: Vec::new(),
        }
    }
}

fn family_values(record: &RawSignalsRecord, config: &FeatureConfig, family: FeatureFamily) -> Result<(Vec<f64>, bool)> {
    let mut degenerate = false;
    let values = match family {
        FeatureFamily::Seq => {
            let lp = record
                .token_logprobs
                .as_deref()
                .ok_or_else(|| Error::missing("seq", "token_logprobs absent"))?;
            let bar = length_normalized_loglik(lp)?;
            if config.reference_pool.is_empty() {
                vec![bar]
            } else {
                vec![bar, rank_normalized_logprob(bar, &config.reference_pool)?]
            }
        }
        FeatureFamily::Entropy => {
            let ents = record
                .token_entropies
                .as_deref()
                .ok_or_else(|| Error::missing("entropy", "token_entropies absent"))?;
            vec![mean_token_entropy(ents)?]
        }
        FeatureFamily::Sc => {
            let disp = semantic_dispersion(&record.samples, config.link_threshold)?;
            vec![
                agreement_rate(&record.samples)?,
                predictive_entropy(&record.samples)?,
                disp.largest_cluster_mass,
            ]
        }
        FeatureFamily::ScEntailment => {
            let disp = semantic_dispersion(&record.samples, config.link_threshold)
                .map_err(|e| match e {
                    Error::MissingSignal { detail, .. } => Error::missing("sc_entailment", detail),
                    e => e,
                })?;
            vec![disp
                .avg_pairwise_entailment
                .ok_or_else(|| Error::missing("sc_entailment", "entailment_pairs absent"))?]
        }
        FeatureFamily::Rag => {
            let rag = rag_features(&record.claims, config.support_threshold, config.conflict_threshold);
            degenerate = rag.degenerate;
            vec![rag.coverage, rag.align, rag.conflict]
        }
        FeatureFamily::Verifier => vec![verifier_consistency(&record.samples)?],
        FeatureFamily::Tool => {
            let flags = record
                .verifier_flags
                .as_deref()
                .filter(|f| !f.is_empty())
                .ok_or_else(|| Error::missing("tool", "verifier_flags absent"))?;
            let n = flags.len() as f64;
            let pass = flags.iter().filter(|f| f.pass).count() as f64 / n;
            let score = flags
                .iter()
                .map(|f| f.score.unwrap_or(if f.pass { 1.0 } else { 0.0 }))
                .sum::<f64>()
                / n;
            vec![pass, score]
        }
        FeatureFamily::ToolDiag => vec![record
            .tool_diag
            .ok_or_else(|| Error::missing("tool_diag", "tool_diag absent"))?],
    };
    Ok((values, degenerate))
}

/// Builds the fused feature vector for `record` under `config`.
///
/// Deterministic: the same record and config always give a bit-identical
/// vector. A family whose signals are absent is imputed only when the
/// configuration supplies a value for each of its features.
pub fn assemble_features(record: &RawSignalsRecord, config: &FeatureConfig) -> Result<FeatureVector> {
    let schema = config.schema()?;
    let mut values = Vec::with_capacity(schema.len());
    let mut degenerate_evidence = false;
    let mut imputed = Vec::new();
    for family in config.families() {
        match family_values(record, config, family) {
            Ok((v, degenerate)) => {
                degenerate_evidence |= degenerate;
                values.extend(v);
            }
            Err(Error::MissingSignal { family: fam, detail }) => {
                let feats = config.family_features(family);
                let fill: Option<Vec<f64>> = feats.iter().map(|f| config.imputation.get(*f).copied()).collect();
                match fill {
                    Some(v) => {
                        imputed.push(family);
                        values.extend(v);
                    }
                    None => return Err(Error::MissingSignal { family: fam, detail }),
                }
            }
            Err(e) => return Err(e),
        }
    }
    if let Some(x) = values.iter().find(|x| !x.is_finite()) {
        return Err(Error::InvalidSignal(format!("record {}: non-finite feature {x}", record.id)));
    }
    debug_assert_eq!(values.len(), schema.len());
    Ok(FeatureVector {
        names: schema.names,
        values,
        degenerate_evidence,
        imputed,
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(ks: &[&str]) -> Vec<SampleRecord> {
        ks.iter().map(|k| SampleRecord::keyed(*k)).collect()
    }

    fn with_sims(mut samples: Vec<SampleRecord>, sim: &[Vec<f64>]) -> Vec<SampleRecord> {
        for (s, row) in samples.iter_mut().zip(sim) {
            s.embedding_sim = Some(row.clone());
        }
        samples
    }

    fn claim(max_e: f64, contra: f64) -> ClaimScore {
        ClaimScore {
            entailment: max_e,
            contradicted: contra >= 0.5,
            salient: true,
            max_passage_entailment: max_e,
            contradiction_score: contra,
        }
    }

    #[test]
    fn loglik_examples() {
        assert_eq!(length_normalized_loglik(&[-1.0, -3.0]).unwrap(), -2.0);
        assert_eq!(length_normalized_loglik(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(length_normalized_loglik(&[-2.3]).unwrap(), -2.3);
        assert!(matches!(length_normalized_loglik(&[]), Err(Error::MissingSignal { .. })));
        assert!(length_normalized_loglik(&[0.5]).is_err());
    }

    #[test]
    fn entropy_examples() {
        let ln4 = 4f64.ln();
        assert!((mean_token_entropy(&[ln4, ln4, ln4]).unwrap() - 1.3863).abs() < 1e-4);
        assert_eq!(mean_token_entropy(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(mean_token_entropy(&[1.0, 3.0]).unwrap(), 2.0);
        assert!(matches!(mean_token_entropy(&[]), Err(Error::MissingSignal { .. })));
    }

    #[test]
    fn rank_percentile_examples() {
        let pool = [-3.0, -2.0, -1.0, 0.0];
        assert_eq!(rank_normalized_logprob(-1.0, &pool).unwrap(), 0.625);
        assert_eq!(rank_normalized_logprob(-9.0, &pool).unwrap(), 0.0);
        assert_eq!(rank_normalized_logprob(0.5, &pool).unwrap(), 1.0);
        assert!(rank_normalized_logprob(0.0, &[]).is_err());
    }

    #[test]
    fn agreement_and_entropy_examples() {
        assert!((agreement_rate(&keys(&["A", "A", "A", "B", "B"])).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(agreement_rate(&keys(&["A", "A", "A"])).unwrap(), 1.0);
        assert!((agreement_rate(&keys(&["A", "B", "C"])).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(agreement_rate(&[]).is_err());

        assert_eq!(predictive_entropy(&keys(&["A", "A", "A"])).unwrap(), 0.0);
        assert!((predictive_entropy(&keys(&["A", "B"])).unwrap() - 2f64.ln()).abs() < 1e-12);
        let h = predictive_entropy(&keys(&["A", "A", "B", "B", "C", "C"])).unwrap();
        assert!((h - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn verifier_consistency_examples() {
        let mk = |flags: &[bool]| -> Vec<SampleRecord> {
            flags
                .iter()
                .map(|&p| SampleRecord {
                    verifier_pass: Some(p),
                    ..SampleRecord::keyed("a")
                })
                .collect()
        };
        assert_eq!(verifier_consistency(&mk(&[true, true, false, false])).unwrap(), 0.5);
        assert_eq!(verifier_consistency(&mk(&[true, true])).unwrap(), 1.0);
        assert_eq!(verifier_consistency(&mk(&[false, false])).unwrap(), 0.0);
        let mut partial = mk(&[true, false]);
        partial[1].verifier_pass = None;
        assert!(matches!(verifier_consistency(&partial), Err(Error::MissingSignal { .. })));
    }

    #[test]
    fn dispersion_examples() {
        let one = semantic_dispersion(&keys(&["A"]), 0.75).unwrap();
        assert_eq!(one.largest_cluster_mass, 1.0);
        assert_eq!(one.avg_pairwise_entailment, Some(0.0));

        let identity: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let d = semantic_dispersion(&with_sims(keys(&["A", "B", "C", "D"]), &identity), 0.75).unwrap();
        assert_eq!(d.largest_cluster_mass, 0.25);

        let ones = vec![vec![1.0; 3]; 3];
        let mut s = with_sims(keys(&["A", "A", "A"]), &ones);
        for (i, smp) in s.iter_mut().enumerate() {
            smp.entailment_pairs = Some((0..3).map(|j| if i == j { 1.0 } else { 0.8 }).collect());
        }
        let d = semantic_dispersion(&s, 0.75).unwrap();
        assert_eq!(d.largest_cluster_mass, 1.0);
        assert!((d.avg_pairwise_entailment.unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn dispersion_rejects_asymmetry() {
        let sim = vec![vec![1.0, 0.9], vec![0.2, 1.0]];
        let r = semantic_dispersion(&with_sims(keys(&["A", "B"]), &sim), 0.75);
        assert!(matches!(r, Err(Error::InvalidSignal(_))));
    }

    #[test]
    fn rag_examples() {
        let r = rag_features(&[claim(0.9, 0.0), claim(0.2, 0.8)], 0.5, 0.5);
        assert_eq!((r.coverage, r.conflict), (0.5, 0.5));
        assert!((r.align - 0.55).abs() < 1e-12);
        assert!(!r.degenerate);

        let r = rag_features(&[claim(0.9, 0.0), claim(0.7, 0.0)], 0.5, 0.5);
        assert_eq!((r.coverage, r.conflict), (1.0, 0.0));
        assert!((r.align - 0.8).abs() < 1e-12);

        let mut hidden = claim(0.9, 0.0);
        hidden.salient = false;
        let r = rag_features(&[hidden], 0.5, 0.5);
        assert_eq!((r.coverage, r.align, r.conflict, r.degenerate), (0.0, 0.0, 0.0, true));
    }

    fn example_record() -> RawSignalsRecord {
        let sim = vec![
            vec![1.0, 0.9, 0.9, 0.1, 0.1],
            vec![0.9, 1.0, 0.9, 0.1, 0.1],
            vec![0.9, 0.9, 1.0, 0.1, 0.1],
            vec![0.1, 0.1, 0.1, 1.0, 0.9],
            vec![0.1, 0.1, 0.1, 0.9, 1.0],
        ];
        RawSignalsRecord {
            token_logprobs: Some(vec![-1.0, -3.0]),
            samples: with_sims(keys(&["A", "A", "A", "B", "B"]), &sim),
            ..RawSignalsRecord::new("r1")
        }
    }

    #[test]
    fn assemble_seq_and_sc() {
        let cfg = FeatureConfig {
            reference_pool: vec![-3.0, -2.0, -1.0, 0.0],
            ..FeatureConfig::default()
        };
        let fv = assemble_features(&example_record(), &cfg).unwrap();
        assert_eq!(
            fv.names,
            ["seq_loglik", "seq_rank_pct", "sc_agree", "sc_entropy", "sc_cluster_mass"]
        );
        let h = -(0.6f64 * 0.6f64.ln() + 0.4 * 0.4f64.ln());
        let expected = [-2.0, 0.375, 0.6, h, 0.6];
        for (a, b) in fv.values.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn all_off_is_an_error() {
        let cfg = FeatureConfig {
            seq: false,
            sc: false,
            ..FeatureConfig::default()
        };
        assert!(matches!(assemble_features(&example_record(), &cfg), Err(Error::Config(_))));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn api_only_drops_logit_features() {
        let cfg = FeatureConfig {
            rag: true,
            verifier: true,
            sc_entailment: true,
            entropy: true,
            ..FeatureConfig::default()
        }
        .api_only();
        let schema = cfg.schema().unwrap();
        assert!(schema.index_of("seq_loglik").is_none());
        assert!(schema.index_of("seq_rank_pct").is_none());
        assert!(schema.index_of("token_entropy").is_none());
        for keep in ["sc_cluster_mass", "sc_pairwise_entailment", "rag_coverage", "verifier_consistency"] {
            assert!(schema.index_of(keep).is_some(), "{keep}");
        }
        assert!(schema.logit_derived.iter().all(|l| !l));
    }

    #[test]
    fn missing_family_is_named_unless_imputed() {
        let cfg = FeatureConfig {
            tool_diag: true,
            ..FeatureConfig::default()
        };
        match assemble_features(&example_record(), &cfg) {
            Err(Error::MissingSignal { family, .. }) => assert_eq!(family, "tool_diag"),
            other => panic!("unexpected {other:?}"),
        }
        let mut cfg = cfg;
        cfg.imputation.insert("tool_diag".into(), 0.5);
        let fv = assemble_features(&example_record(), &cfg).unwrap();
        assert_eq!(fv.get("tool_diag"), Some(0.5));
        assert_eq!(fv.imputed, vec![FeatureFamily::ToolDiag]);
    }

    #[test]
    fn degenerate_rag_sets_flag() {
        let cfg = FeatureConfig {
            rag: true,
            ..FeatureConfig::default()
        };
        let fv = assemble_features(&example_record(), &cfg).unwrap();
        assert!(fv.degenerate_evidence);
        assert_eq!(fv.get("rag_coverage"), Some(0.0));
    }

    #[test]
    fn record_validation() {
        let mut r = example_record();
        assert!(r.validate().is_ok());
        r.token_logprobs = Some(vec![0.1]);
        assert!(r.validate().is_err());
        let mut r = example_record();
        r.samples[0].embedding_sim = Some(vec![1.0, 0.5]);
        assert!(r.validate().is_err());
        let mut r = example_record();
        r.claims.push(claim(1.2, 0.0));
        assert!(r.validate().is_err());
    }

    #[test]
    fn record_json_uses_snake_case_and_rejects_unknown() {
        let line = r#"{"id":"x","token_logprobs":[-0.5],"samples":[{"answer_key":"A"}],"claims":[],"label":{"kind":"exact","value":1}}"#;
        let r: RawSignalsRecord = serde_json::from_str(line).unwrap();
        assert_eq!(r.token_logprobs, Some(vec![-0.5]));
        assert_eq!(r.label.unwrap().value, 1.0);
        assert!(serde_json::from_str::<RawSignalsRecord>(r#"{"id":"x","bogus":1}"#).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn key_strategy() -> impl Strategy<Value = Vec<String>> {
            prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 1..12)
                .prop_map(|v| v.into_iter().map(String::from).collect())
        }

        fn sim_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
            (2usize..8).prop_flat_map(|k| {
                prop::collection::vec(0.0f64..=1.0, k * k).prop_map(move |raw| {
                    let mut m = vec![vec![0.0; k]; k];
                    for i in 0..k {
                        m[i][i] = 1.0;
                        for j in (i + 1)..k {
                            m[i][j] = raw[i * k + j];
                            m[j][i] = raw[i * k + j];
                        }
                    }
                    m
                })
            })
        }

        proptest! {
            #[test]
            fn agreement_entropy_bounds(ks in key_strategy()) {
                let samples: Vec<_> = ks.iter().map(|k| SampleRecord::keyed(k.clone())).collect();
                let k = samples.len() as f64;
                let a = agreement_rate(&samples).unwrap();
                let h = predictive_entropy(&samples).unwrap();
                prop_assert!(a >= 1.0 / k - 1e-12 && a <= 1.0);
                prop_assert!(h >= 0.0 && h <= k.ln() + 1e-12);
                prop_assert_eq!(a == 1.0, h == 0.0);
            }

            #[test]
            fn sc_features_are_permutation_invariant(ks in key_strategy(), seed in any::<u64>()) {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let samples: Vec<_> = ks.iter().map(|k| SampleRecord::keyed(k.clone())).collect();
                let mut shuffled = samples.clone();
                shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                prop_assert_eq!(agreement_rate(&samples).unwrap(), agreement_rate(&shuffled).unwrap());
                prop_assert_eq!(predictive_entropy(&samples).unwrap(), predictive_entropy(&shuffled).unwrap());
            }

            #[test]
            fn cluster_mass_shrinks_with_threshold(m in sim_matrix(), t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
                let samples = with_sims(keys(&vec!["x"; m.len()]), &m);
                let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
                let a = semantic_dispersion(&samples, lo).unwrap().largest_cluster_mass;
                let b = semantic_dispersion(&samples, hi).unwrap().largest_cluster_mass;
                prop_assert!(b <= a);
            }

            #[test]
            fn cluster_mass_is_permutation_invariant(m in sim_matrix(), seed in any::<u64>(), t in 0.0f64..=1.0) {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let k = m.len();
                let mut perm: Vec<usize> = (0..k).collect();
                perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                let pm: Vec<Vec<f64>> = perm.iter().map(|&i| perm.iter().map(|&j| m[i][j]).collect()).collect();
                let a = semantic_dispersion(&with_sims(keys(&vec!["x"; k]), &m), t).unwrap();
                let b = semantic_dispersion(&with_sims(keys(&vec!["x"; k]), &pm), t).unwrap();
                prop_assert_eq!(a.largest_cluster_mass, b.largest_cluster_mass);
            }

            #[test]
            fn rag_rates_monotone_in_thresholds(
                scores in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..10),
                s1 in 0.0f64..=1.0, s2 in 0.0f64..=1.0,
            ) {
                let claims: Vec<_> = scores.iter().map(|&(e, c)| claim(e, c)).collect();
                let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
                let a = rag_features(&claims, lo, lo);
                let b = rag_features(&claims, hi, hi);
                prop_assert!(b.coverage <= a.coverage);
                prop_assert!(b.conflict <= a.conflict);
            }

            #[test]
            fn assemble_is_deterministic(ks in key_strategy(), lps in prop::collection::vec(-5.0f64..=0.0, 1..6)) {
                let r = RawSignalsRecord {
                    token_logprobs: Some(lps),
                    samples: ks.iter().map(|k| SampleRecord::keyed(k.clone())).collect(),
                    ..RawSignalsRecord::new("p")
                };
                let cfg = FeatureConfig { sc: false, ..FeatureConfig::default() };
                let a = assemble_features(&r, &cfg).unwrap();
                let b = assemble_features(&r, &cfg).unwrap();
                prop_assert_eq!(
                    a.values.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                    b.values.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
                );
            }
        }
    }
}
