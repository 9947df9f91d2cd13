//! Calibration head: a small model mapping fused evidence to a probability
//! of correctness.
//!
//! Two head kinds are supported, L2-regularized logistic regression and a
//! two-layer MLP with a GELU hidden layer. Logit-derived features are divided
//! by a temperature `T` before standardization, and `T` is learned jointly
//! with the weights.
//!
//! The training objective is
//!
//! ```text
//! J(theta, T) = mean BCE(r_i, c_i)
//!             + ece_weight * softECE(c)
//!             + selective_weight * L_sel(c)          (optional)
//!             + smoothing_weight * Huber(density(c))  (optional)
//!             + l2/2 * |w|^2 + l2 * ln(T)^2
//! ```
//!
//! `softECE` replaces hard bin membership with piecewise-linear (hat) weights
//! over adaptive bin centers so the whole objective is differentiable. Graded
//! labels use the same cross-entropy against the Bernoulli mean.
//!
//! The optimizer is full-batch gradient descent with Armijo backtracking, so
//! every accepted step strictly decreases `J`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::evidence::{FeatureSchema, FeatureVector};
use crate::isotonic::IsotonicMap;
use crate::metrics::{self, BinScheme, ECE_BINS};
use crate::targets::{label_values, CorrectnessLabel};
use crate::{Error, Result};

pub const MIN_TRAINING_EXAMPLES: usize = 20;
pub const CONFIDENCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Logistic,
    Mlp2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectiveTerm {
    pub weight: f64,
    /// Working threshold.
    pub tau: f64,
    /// Target coverage.
    pub kappa: f64,
    pub beta: f64,
    /// Width of the sigmoid standing in for `1{c >= tau}`.
    pub sharpness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingTerm {
    pub weight: f64,
    pub tau: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub hidden: usize,
    /// Weight of the soft adaptive ECE term.
    pub ece_weight: f64,
    pub selective: Option<SelectiveTerm>,
    pub smoothing: Option<SmoothingTerm>,
    pub l2_lambda: f64,
    pub learn_temperature: bool,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once the gradient norm falls below this.
    pub grad_tol: f64,
    /// Iterations between refreshes of the soft-ECE bin centers.
    pub refresh_every: usize,
    /// Iterations between validation ECE checks.
    pub eval_every: usize,
    /// Checks without improvement before stopping.
    pub patience: usize,
    /// No early stopping before this many iterations.
    pub warmup_iters: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            kind: HeadKind::Logistic,
            hidden: 16,
            ece_weight: 0.1,
            selective: None,
            smoothing: None,
            l2_lambda: 1e-4,
            learn_temperature: true,
            seed: 0,
            max_iters: 1500,
            grad_tol: 1e-7,
            refresh_every: 25,
            eval_every: 10,
            patience: 20,
            warmup_iters: 200,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.kind == HeadKind::Mlp2 && self.hidden == 0 {
            return bad("mlp2 head needs hidden > 0".into());
        }
        if !(self.ece_weight >= 0.0) || !(self.l2_lambda >= 0.0) {
            return bad("ece_weight and l2_lambda must be non-negative".into());
        }
        if let Some(s) = &self.selective {
            if !(0.0..=1.0).contains(&s.tau) || !(0.0..=1.0).contains(&s.kappa) || s.beta < 0.0 || s.weight < 0.0 || s.sharpness <= 0.0 {
                return bad(format!("invalid selective term {s:?}"));
            }
        }
        if let Some(s) = &self.smoothing {
            if s.delta <= 0.0 || s.weight < 0.0 || !(0.0..=1.0).contains(&s.tau) {
                return bad(format!("invalid smoothing term {s:?}"));
            }
        }
        if self.max_iters == 0 || self.refresh_every == 0 || self.eval_every == 0 {
            return bad("iteration counts must be positive".into());
        }
        Ok(())
    }
}

/// A fitted head. Weight layout:
///
/// - logistic: `[w_0 .. w_{d-1}, b]`
/// - mlp2: `[W1 (hidden x d, row-major), b1 (hidden), w2 (hidden), b2]`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadModel {
    pub kind: HeadKind,
    pub hidden: usize,
    pub schema: FeatureSchema,
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub temperature: f64,
    pub l2_lambda: f64,
    pub seed: u64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl HeadModel {
    pub fn dim(&self) -> usize {
        self.schema.len()
    }

    pub fn expected_weight_count(kind: HeadKind, d: usize, hidden: usize) -> usize {
        match kind {
            HeadKind::Logistic => d + 1,
            HeadKind::Mlp2 => hidden * d + 2 * hidden + 1,
        }
    }

    /// All-zero weights (confidence 0.5 everywhere) with unit scaling.
    pub fn zeros(kind: HeadKind, hidden: usize, schema: FeatureSchema) -> Self {
        let d = schema.len();
        Self {
            kind,
            hidden,
            input_mean: vec![0.0; d],
            input_scale: vec![1.0; d],
            weights: vec![0.0; Self::expected_weight_count(kind, d, hidden)],
            temperature: 1.0,
            l2_lambda: 0.0,
            seed: 0,
            schema,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Artifact(format!("temperature {} must be positive", self.temperature)));
        }
        if self.weights.len() != Self::expected_weight_count(self.kind, d, self.hidden) {
            return Err(Error::Artifact(format!(
                "{:?} head with d = {d} expects {} weights, found {}",
                self.kind,
                Self::expected_weight_count(self.kind, d, self.hidden),
                self.weights.len()
            )));
        }
        if self.input_mean.len() != d || self.input_scale.len() != d || self.schema.logit_derived.len() != d {
            return Err(Error::Artifact("head normalization does not match schema".into()));
        }
        if self.input_scale.iter().any(|s| !(*s > 0.0)) || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Artifact("head has invalid scales or weights".into()));
        }
        Ok(())
    }

    fn transformed(&self, z: &[f64], temperature: f64, out: &mut [f64]) {
        for j in 0..z.len() {
            let scaled = if self.schema.logit_derived[j] { z[j] / temperature } else { z[j] };
            out[j] = (scaled - self.input_mean[j]) / self.input_scale[j];
        }
    }

    fn score_with(&self, weights: &[f64], temperature: f64, z: &[f64], buf: &mut Vec<f64>) -> f64 {
        let d = z.len();
        buf.resize(d, 0.0);
        self.transformed(z, temperature, buf);
        match self.kind {
            HeadKind::Logistic => {
                weights[..d].iter().zip(buf.iter()).map(|(w, x)| w * x).sum::<f64>() + weights[d]
            }
            HeadKind::Mlp2 => {
                let h = self.hidden;
                let (w1, rest) = weights.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(h);
                let mut s = b2[0];
                for k in 0..h {
                    let a: f64 = w1[k * d..(k + 1) * d].iter().zip(buf.iter()).map(|(w, x)| w * x).sum::<f64>() + b1[k];
                    s += w2[k] * gelu(a);
                }
                s
            }
        }
    }

    /// Pre-sigmoid score.
    pub fn score(&self, z: &[f64]) -> f64 {
        let mut buf = Vec::with_capacity(z.len());
        self.score_with(&self.weights, self.temperature, z, &mut buf)
    }

    /// `sigmoid(score)` without isotonic post-map or clamping.
    pub fn raw_probability(&self, z: &[f64]) -> f64 {
        sigmoid(self.score(z))
    }

    /// For logistic heads: coefficients and intercept in raw feature units
    /// (temperature and standardization folded in).
    pub fn effective_linear(&self) -> Option<(Vec<f64>, f64)> {
        if self.kind != HeadKind::Logistic {
            return None;
        }
        let d = self.dim();
        let mut coef = Vec::with_capacity(d);
        let mut intercept = self.weights[d];
        for j in 0..d {
            let t = if self.schema.logit_derived[j] { 1.0 / self.temperature } else { 1.0 };
            coef.push(self.weights[j] * t / self.input_scale[j]);
            intercept -= self.weights[j] * self.input_mean[j] / self.input_scale[j];
        }
        Some((coef, intercept))
    }

    fn check_schema(&self, z: &FeatureVector) -> Result<()> {
        if z.names != self.schema.names {
            return Err(Error::Schema(format!(
                "feature vector schema {:?} does not match head schema {:?}",
                z.names, self.schema.names
            )));
        }
        Ok(())
    }
}

/// `iso(sigmoid(head(z)))` clamped to `[1e-6, 1 - 1e-6]`.
pub fn predict_confidence(model: &HeadModel, iso: Option<&IsotonicMap>, z: &FeatureVector) -> Result<f64> {
    model.check_schema(z)?;
    let p = model.raw_probability(&z.values);
    let p = iso.map_or(p, |m| m.eval(p));
    Ok(p.clamp(CONFIDENCE_FLOOR, 1.0 - CONFIDENCE_FLOOR))
}

/// Evaluation of the training objective and its gradient.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub value: f64,
    pub grad_weights: Vec<f64>,
    pub grad_temperature: f64,
}

/// Terms of the training objective other than cross-entropy.
#[derive(Debug, Clone)]
pub struct ObjectiveTerms {
    pub ece_weight: f64,
    /// Sorted, strictly increasing soft-ECE bin centers.
    pub centers: Vec<f64>,
    pub selective: Option<SelectiveTerm>,
    pub smoothing: Option<SmoothingTerm>,
    pub l2_lambda: f64,
}

/// Soft-ECE bin centers: means of equal-mass groups of the sorted confidences.
pub fn adaptive_centers(confidences: &[f64]) -> Vec<f64> {
    let n = confidences.len();
    if n == 0 {
        return Vec::new();
    }
    let mut sorted = confidences.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut centers: Vec<f64> = Vec::with_capacity(ECE_BINS);
    for b in 0..ECE_BINS {
        let lo = b * n / ECE_BINS;
        let hi = ((b + 1) * n / ECE_BINS).max(lo + 1).min(n);
        if lo >= n {
            break;
        }
        let m = sorted[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        if centers.last().is_none_or(|&last| m > last + 1e-9) {
            centers.push(m);
        }
    }
    centers
}

/// Hat-function weights of `c` over `centers`: at most two non-zero entries
/// `(bin, weight, d weight / dc)`.
fn hat_weights(c: f64, centers: &[f64]) -> [(usize, f64, f64); 2] {
    let last = centers.len() - 1;
    if centers.len() == 1 || c <= centers[0] {
        return [(0, 1.0, 0.0), (0, 0.0, 0.0)];
    }
    if c >= centers[last] {
        return [(last, 1.0, 0.0), (last, 0.0, 0.0)];
    }
    let hi = centers.partition_point(|&m| m <= c);
    let lo = hi - 1;
    let width = centers[hi] - centers[lo];
    let t = (c - centers[lo]) / width;
    [(lo, 1.0 - t, -1.0 / width), (hi, t, 1.0 / width)]
}

/// Soft adaptive ECE, `(1/n) sum_b |sum_i a_b(c_i) (c_i - r_i)|`.
pub fn soft_ece(confidences: &[f64], labels: &[f64], centers: &[f64]) -> f64 {
    if confidences.is_empty() || centers.is_empty() {
        return 0.0;
    }
    let mut sums = vec![0.0; centers.len()];
    for (&c, &r) in confidences.iter().zip(labels) {
        for (b, a, _) in hat_weights(c, centers) {
            sums[b] += a * (c - r);
        }
    }
    sums.iter().map(|s| s.abs()).sum::<f64>() / confidences.len() as f64
}

/// The differentiable training objective over a fixed data set.
pub struct TrainingObjective<'a> {
    features: &'a [Vec<f64>],
    labels: &'a [f64],
    template: &'a HeadModel,
    pub terms: ObjectiveTerms,
}

impl<'a> TrainingObjective<'a> {
    /// `template` supplies kind, schema and input normalization; its weights
    /// and temperature are ignored.
    pub fn new(features: &'a [Vec<f64>], labels: &'a [f64], template: &'a HeadModel, terms: ObjectiveTerms) -> Self {
        assert_eq!(features.len(), labels.len());
        Self {
            features,
            labels,
            template,
            terms,
        }
    }

    pub fn confidences(&self, weights: &[f64], temperature: f64) -> Vec<f64> {
        let mut buf = Vec::new();
        self.features
            .iter()
            .map(|z| sigmoid(self.template.score_with(weights, temperature, z, &mut buf)))
            .collect()
    }

    pub fn value(&self, weights: &[f64], temperature: f64) -> f64 {
        self.evaluate(weights, temperature, false).value
    }

    pub fn value_and_gradient(&self, weights: &[f64], temperature: f64) -> ObjectiveEval {
        self.evaluate(weights, temperature, true)
    }

    fn penalized_weight_mask(&self) -> Vec<bool> {
        let d = self.template.dim();
        let h = self.template.hidden;
        match self.template.kind {
            HeadKind::Logistic => (0..=d).map(|i| i < d).collect(),
            HeadKind::Mlp2 => {
                let mut m = vec![true; h * d];
                m.extend(std::iter::repeat_n(false, h));
                m.extend(std::iter::repeat_n(true, h));
                m.push(false);
                m
            }
        }
    }

    fn evaluate(&self, weights: &[f64], temperature: f64, with_grad: bool) -> ObjectiveEval {
        let n = self.features.len();
        let nf = n as f64;
        let t = &self.terms;
        let mut buf = Vec::new();
        let scores: Vec<f64> = self
            .features
            .iter()
            .map(|z| self.template.score_with(weights, temperature, z, &mut buf))
            .collect();
        let conf: Vec<f64> = scores.iter().map(|&s| sigmoid(s)).collect();

        // Cross-entropy via softplus for exactness at extreme scores.
        let mut value = scores
            .iter()
            .zip(self.labels)
            .map(|(&s, &r)| softplus(s) - r * s)
            .sum::<f64>()
            / nf;
        // dJ/dc_i from the non-BCE terms.
        let mut dc = vec![0.0; n];

        if t.ece_weight > 0.0 && !t.centers.is_empty() {
            let mut sums = vec![0.0; t.centers.len()];
            let hats: Vec<_> = conf.iter().map(|&c| hat_weights(c, &t.centers)).collect();
            for ((h, &c), &r) in hats.iter().zip(&conf).zip(self.labels) {
                for &(b, a, _) in h {
                    sums[b] += a * (c - r);
                }
            }
            value += t.ece_weight * sums.iter().map(|s| s.abs()).sum::<f64>() / nf;
            if with_grad {
                for i in 0..n {
                    let diff = conf[i] - self.labels[i];
                    for &(b, a, da) in &hats[i] {
                        dc[i] += t.ece_weight * sums[b].signum() * (a + da * diff) / nf;
                    }
                }
            }
        }

        if let Some(sel) = &t.selective {
            let gates: Vec<f64> = conf.iter().map(|&c| sigmoid((c - sel.tau) / sel.sharpness)).collect();
            let errors: f64 = gates.iter().zip(self.labels).map(|(g, r)| g * (1.0 - r)).sum::<f64>() / nf;
            let cov = gates.iter().sum::<f64>() / nf;
            let shortfall = sel.kappa - cov;
            value += sel.weight * (errors + sel.beta * shortfall.max(0.0));
            if with_grad {
                let short_active = if shortfall > 0.0 { 1.0 } else { 0.0 };
                for i in 0..n {
                    let dg = gates[i] * (1.0 - gates[i]) / sel.sharpness;
                    dc[i] += sel.weight * dg * ((1.0 - self.labels[i]) - sel.beta * short_active) / nf;
                }
            }
        }

        if let Some(sm) = &t.smoothing {
            let kernel = |c: f64| (1.0 - (c - sm.tau).abs() / sm.delta).max(0.0);
            let density = conf.iter().map(|&c| kernel(c)).sum::<f64>() / (nf * sm.delta);
            value += sm.weight * metrics::huber(density, sm.delta);
            if with_grad {
                let outer = sm.weight * metrics::huber_grad(density, sm.delta) / (nf * sm.delta);
                for i in 0..n {
                    let u = conf[i] - sm.tau;
                    if u.abs() < sm.delta {
                        dc[i] += outer * (-u.signum() / sm.delta);
                    }
                }
            }
        }

        let mask = self.penalized_weight_mask();
        let l2: f64 = weights.iter().zip(&mask).filter(|(_, m)| **m).map(|(w, _)| w * w).sum();
        let log_t = temperature.ln();
        value += 0.5 * t.l2_lambda * l2 + t.l2_lambda * log_t * log_t;

        if !with_grad {
            return ObjectiveEval {
                value,
                grad_weights: Vec::new(),
                grad_temperature: 0.0,
            };
        }

        let mut gw: Vec<f64> = weights
            .iter()
            .zip(&mask)
            .map(|(w, m)| if *m { t.l2_lambda * w } else { 0.0 })
            .collect();
        let mut gt = 2.0 * t.l2_lambda * log_t / temperature;
        let m = self.template;
        let d = m.dim();
        let mut x = vec![0.0; d];
        let mut dx = vec![0.0; d];
        for i in 0..n {
            let ds = (conf[i] - self.labels[i]) / nf + dc[i] * conf[i] * (1.0 - conf[i]);
            if ds == 0.0 {
                continue;
            }
            let z = &self.features[i];
            m.transformed(z, temperature, &mut x);
            match m.kind {
                HeadKind::Logistic => {
                    for j in 0..d {
                        gw[j] += ds * x[j];
                        dx[j] = ds * weights[j];
                    }
                    gw[d] += ds;
                }
                HeadKind::Mlp2 => {
                    let h = m.hidden;
                    dx.iter_mut().for_each(|v| *v = 0.0);
                    let w2_off = h * d + h;
                    for k in 0..h {
                        let row = &weights[k * d..(k + 1) * d];
                        let a: f64 = row.iter().zip(&x).map(|(w, xv)| w * xv).sum::<f64>() + weights[h * d + k];
                        gw[w2_off + k] += ds * gelu(a);
                        let da = ds * weights[w2_off + k] * gelu_grad(a);
                        for j in 0..d {
                            gw[k * d + j] += da * x[j];
                            dx[j] += da * row[j];
                        }
                        gw[h * d + k] += da;
                    }
                    gw[w2_off + h] += ds;
                }
            }
            for j in 0..d {
                if m.schema.logit_derived[j] {
                    gt += dx[j] * (-z[j] / (temperature * temperature)) / m.input_scale[j];
                }
            }
        }
        ObjectiveEval {
            value,
            grad_weights: gw,
            grad_temperature: gt,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadFit {
    pub model: HeadModel,
    /// Labels had a single value; the head is intercept-only.
    pub degenerate: bool,
    pub iterations: usize,
    /// Objective before and after each accepted step, under the same
    /// soft-ECE centers.
    pub trace: Vec<(f64, f64)>,
    pub best_validation_ece: Option<f64>,
}

fn feature_matrix(features: &[FeatureVector], schema: &FeatureSchema) -> Result<Vec<Vec<f64>>> {
    features
        .iter()
        .map(|f| {
            if f.names != schema.names {
                Err(Error::Schema(format!("inconsistent schema {:?} vs {:?}", f.names, schema.names)))
            } else {
                Ok(f.values.clone())
            }
        })
        .collect()
}

fn standardization(x: &[Vec<f64>], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() as f64;
    let mut mean = vec![0.0; d];
    for row in x {
        for j in 0..d {
            mean[j] += row[j] / n;
        }
    }
    let mut var = vec![0.0; d];
    for row in x {
        for j in 0..d {
            var[j] += (row[j] - mean[j]).powi(2) / n;
        }
    }
    let scale = var.iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    (mean, scale)
}

/// Fits a head by minimizing the training objective.
///
/// With a validation set, adaptive ECE on it is checked every
/// `eval_every` iterations after `warmup_iters`; training stops after
/// `patience` checks without improvement and the best checkpoint is kept.
pub fn fit_head(
    features: &[FeatureVector],
    labels: &[CorrectnessLabel],
    config: &HeadConfig,
    validation: Option<(&[FeatureVector], &[CorrectnessLabel])>,
) -> Result<HeadFit> {
    config.validate()?;
    if features.len() != labels.len() {
        return Err(Error::Schema(format!(
            "{} feature vectors but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let n = features.len();
    if n < MIN_TRAINING_EXAMPLES {
        return Err(Error::InsufficientData {
            needed: MIN_TRAINING_EXAMPLES,
            have: n,
        });
    }
    let (_, r) = label_values(labels)?;
    let schema = FeatureSchema::from_names(features[0].names.clone());
    let x = feature_matrix(features, &schema)?;
    let d = schema.len();
    let (input_mean, input_scale) = standardization(&x, d);

    let mut model = HeadModel {
        kind: config.kind,
        hidden: config.hidden,
        weights: vec![0.0; HeadModel::expected_weight_count(config.kind, d, config.hidden)],
        temperature: 1.0,
        l2_lambda: config.l2_lambda,
        seed: config.seed,
        input_mean,
        input_scale,
        schema,
    };
    let bias_index = model.weights.len() - 1;

    let base_rate = (r.iter().sum::<f64>() + 0.5) / (n as f64 + 1.0);
    let first = r[0];
    if r.iter().all(|&v| v == first) {
        model.weights[bias_index] = logit(base_rate);
        return Ok(HeadFit {
            model,
            degenerate: true,
            iterations: 0,
            trace: Vec::new(),
            best_validation_ece: None,
        });
    }
    model.weights[bias_index] = logit(base_rate);
    if config.kind == HeadKind::Mlp2 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden;
        let w1 = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("positive sd");
        let w2 = Normal::new(0.0, 0.1 / (h as f64).sqrt()).expect("positive sd");
        for k in 0..h * d {
            model.weights[k] = w1.sample(&mut rng);
        }
        for k in 0..h {
            model.weights[h * d + h + k] = w2.sample(&mut rng);
        }
    }

    let val = match validation {
        Some((vf, vl)) if !vf.is_empty() => {
            let vx = feature_matrix(vf, &model.schema)?;
            let (_, vr) = label_values(vl)?;
            Some((vx, vr))
        }
        _ => None,
    };

    let learn_t = config.learn_temperature && model.schema.logit_derived.iter().any(|l| *l);
    let terms = ObjectiveTerms {
        ece_weight: config.ece_weight,
        centers: Vec::new(),
        selective: config.selective,
        smoothing: config.smoothing,
        l2_lambda: config.l2_lambda,
    };
    let template = model.clone();
    let mut objective = TrainingObjective::new(&x, &r, &template, terms);

    let mut weights = model.weights.clone();
    let mut log_t = 0.0f64;
    let mut step = 1.0f64;
    let mut trace = Vec::new();
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    let mut checks_since_best = 0usize;
    let mut iterations = 0usize;

    for iter in 0..config.max_iters {
        if iter % config.refresh_every == 0 {
            objective.terms.centers = adaptive_centers(&objective.confidences(&weights, log_t.exp()));
        }
        let t = log_t.exp();
        let eval = objective.value_and_gradient(&weights, t);
        // Gradient in (weights, ln T).
        let g_logt = if learn_t { eval.grad_temperature * t } else { 0.0 };
        let gnorm2 = eval.grad_weights.iter().map(|g| g * g).sum::<f64>() + g_logt * g_logt;
        if gnorm2.sqrt() < config.grad_tol {
            break;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let trial_w: Vec<f64> = weights.iter().zip(&eval.grad_weights).map(|(w, g)| w - step * g).collect();
            let trial_logt = log_t - step * g_logt;
            let v = objective.value(&trial_w, trial_logt.exp());
            if v.is_finite() && v <= eval.value - 1e-4 * step * gnorm2 && v < eval.value {
                trace.push((eval.value, v));
                weights = trial_w;
                log_t = trial_logt;
                accepted = true;
                step = (step * 1.5).min(1e3);
                break;
            }
            step *= 0.5;
        }
        iterations = iter + 1;
        if !accepted {
            break;
        }
        if let Some((vx, vr)) = &val {
            if iterations >= config.warmup_iters && iterations % config.eval_every == 0 {
                let mut probe = model.clone();
                probe.weights = weights.clone();
                probe.temperature = log_t.exp();
                let vc: Vec<f64> = vx.iter().map(|z| probe.raw_probability(z)).collect();
                let e = metrics::ece(&vc, vr, BinScheme::Adaptive15);
                if best.as_ref().is_none_or(|(b, _, _)| e < *b - 1e-6) {
                    best = Some((e, weights.clone(), log_t));
                    checks_since_best = 0;
                } else {
                    checks_since_best += 1;
                    if checks_since_best >= config.patience {
                        break;
                    }
                }
            }
        }
    }

    let best_validation_ece = best.as_ref().map(|(e, _, _)| *e);
    if let Some((_, w, lt)) = best {
        weights = w;
        log_t = lt;
    }
    model.weights = weights;
    model.temperature = log_t.exp();
    Ok(HeadFit {
        model,
        degenerate: false,
        iterations,
        trace,
        best_validation_ece,
    })
}
