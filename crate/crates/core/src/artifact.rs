//! Serialized calibration artifact: head, isotonic map, threshold policy and
//! feature configuration, written as canonical JSON.
//!
//! Canonical form means sorted object keys, no insignificant whitespace and
//! shortest round-trip decimal encoding of every real, so the same inputs
//! always give byte-identical files.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ReasonConfig, RetryConfig};
use crate::evidence::FeatureConfig;
use crate::hashing::canonical_json;
use crate::head::HeadModel;
use crate::isotonic::IsotonicMap;
use crate::risk::{PolicyMode, ThresholdPolicy};
use crate::targets::LabelKind;
use crate::{Error, Result};

pub const ARTIFACT_VERSION: &str = "unicr-artifact/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSection {
    pub config: FeatureConfig,
    pub schema_hash: String,
    /// Per-feature mean and spread over answered calibration records, used
    /// to find the dominant failing feature of a refusal.
    pub answered_mean: Vec<f64>,
    pub answered_scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub threshold: ThresholdPolicy,
    pub retry: RetryConfig,
    pub reasons: ReasonConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    pub split_fractions: [f64; 3],
    pub split_sizes: [usize; 3],
    pub alpha_or_rho: f64,
    pub label_kind: LabelKind,
    pub config_hash: String,
    /// Seconds since the Unix epoch, taken from `SOURCE_DATE_EPOCH` when set
    /// and 0 otherwise.
    pub created: u64,
    pub head_degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationArtifact {
    pub version: String,
    pub head: HeadModel,
    pub isotonic: Option<IsotonicMap>,
    pub policy: PolicySection,
    pub feature_config: FeatureSection,
    pub provenance: Provenance,
}

/// Creation time recorded in new artifacts.
pub fn creation_time() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(0)
}

impl CalibrationArtifact {
    /// Checks version, schema hashes and internal consistency.
    pub fn verify(&self) -> Result<()> {
        if self.version != ARTIFACT_VERSION {
            return Err(Error::Artifact(format!(
                "version `{}` is not `{ARTIFACT_VERSION}`",
                self.version
            )));
        }
        self.head.validate()?;
        let schema = self.feature_config.config.schema()?;
        let expected = schema.hash();
        if self.feature_config.schema_hash != expected {
            return Err(Error::Artifact(format!(
                "schema hash {} does not match feature config ({expected})",
                self.feature_config.schema_hash
            )));
        }
        if self.head.schema != schema {
            return Err(Error::Artifact("head schema differs from feature config".into()));
        }
        let d = schema.len();
        let fs = &self.feature_config;
        if fs.answered_mean.len() != d || fs.answered_scale.len() != d || fs.answered_scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Artifact("answered-population statistics do not match schema".into()));
        }
        if let Some(iso) = &self.isotonic {
            iso.validate()?;
        }
        self.policy.threshold.validate()?;
        Ok(())
    }

    pub fn to_canonical_json(&self) -> Result<String> {
        Ok(canonical_json(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let artifact: Self = serde_json::from_str(text).map_err(|e| Error::Artifact(format!("malformed artifact: {e}")))?;
        artifact.verify()?;
        Ok(artifact)
    }
}

/// Writes `contents` to `path` through a temporary file in the same
/// directory and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn save_artifact(artifact: &CalibrationArtifact, path: &Path) -> Result<()> {
    let mut text = artifact.to_canonical_json()?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn load_artifact(path: &Path) -> Result<CalibrationArtifact> {
    CalibrationArtifact::from_json(&std::fs::read_to_string(path)?)
}

/// [`load_artifact`], also rejecting artifacts built under another policy mode.
pub fn load_artifact_checked(path: &Path, expected_mode: PolicyMode) -> Result<CalibrationArtifact> {
    let artifact = load_artifact(path)?;
    let mode = artifact.policy.threshold.mode;
    if mode != expected_mode {
        return Err(Error::Artifact(format!(
            "artifact was built in {mode:?} mode but {expected_mode:?} was requested"
        )));
    }
    Ok(artifact)
}
