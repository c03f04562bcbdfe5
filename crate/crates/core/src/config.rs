//! Workspace settings, stored as `config.toml` and overridable from the
//! command line.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::audit::{AttributionPolicy, AuditParams};
use crate::calibration::ThresholdPolicy;
use crate::embed::AnnParams;
use crate::error::{Error, Result};
use crate::image::CanonicalSize;

pub const DEFAULT_FILTER_SEED: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnConfig {
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for AnnConfig {
    fn default() -> Self {
        let p = AnnParams::default();
        Self {
            m: p.m,
            ef_construction: p.ef_construction,
            ef_search: AuditParams::default().ef_search,
            seed: p.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Coarse candidates per query.
    pub k: usize,
    /// Candidates re-scored with the full distance.
    pub rerank: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        let p = AuditParams::default();
        Self { k: p.k, rerank: p.rerank }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workspace_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub canonical_size: CanonicalSize,
    pub filter_seed: u64,
    #[serde(with = "policy_text")]
    pub threshold_policy: ThresholdPolicy,
    pub ann: AnnConfig,
    pub retrieval: RetrievalConfig,
    pub attribution: AttributionPolicy,
    pub paths: PathsConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            canonical_size: CanonicalSize::default(),
            filter_seed: DEFAULT_FILTER_SEED,
            threshold_policy: ThresholdPolicy::Youden,
            ann: AnnConfig::default(),
            retrieval: RetrievalConfig::default(),
            attribution: AttributionPolicy::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl CliConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(self) -> Result<Self> {
        if !(2..=256).contains(&self.ann.m) {
            return Err(Error::Config(format!("ann.m must be in 2..=256, got {}", self.ann.m)));
        }
        if self.ann.ef_construction == 0 {
            return Err(Error::Config("ann.ef_construction must be at least 1".into()));
        }
        self.audit_params()?;
        self.threshold_policy.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(self)
    }

    pub fn ann_params(&self) -> AnnParams {
        AnnParams {
            m: self.ann.m,
            ef_construction: self.ann.ef_construction,
            seed: self.ann.seed,
        }
    }

    pub fn audit_params(&self) -> Result<AuditParams> {
        AuditParams {
            k: self.retrieval.k,
            ef_search: self.ann.ef_search,
            rerank: self.retrieval.rerank,
        }
        .validate()
    }
}

/// Policies are written the way they are typed on the command line.
mod policy_text {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    use crate::calibration::ThresholdPolicy;

    pub fn serialize<S: Serializer>(policy: &ThresholdPolicy, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(policy)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ThresholdPolicy, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(D::Error::custom)
    }
}
