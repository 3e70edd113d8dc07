use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SessionError;
use crate::audit::AuditConfig;
use crate::domain::{FilterConfig, WeightConfig};
use crate::evaluate::ContentThresholds;
use crate::forest::ForestParams;
use crate::sampler::Mix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub batch_size: usize,
    /// Fixed mix for every round. When absent the round default applies.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mix: Option<Mix>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            batch_size: 100,
            mix: None,
        }
    }
}

impl SamplerConfig {
    pub fn mix_for(&self, round: u32) -> Mix {
        self.mix.unwrap_or_else(|| Mix::default_for_round(round))
    }
}

/// Everything a session needs besides the dataset. Serialized as TOML:
///
/// ```toml
/// seed = 42
/// baseline = true
/// audit_gate = true
///
/// [forest]
/// n_trees = 200
/// min_leaf = 1
/// mtry = 3
///
/// [sampler]
/// batch_size = 100
/// mix = { random = 0.3, uncertainty = 0.5, diversity = 0.2 }
///
/// [weights]
/// as_of = "2019-12-31"
/// half_life_years = 3.0
/// type_weights = { "Condemnation" = 2.0 }
///
/// [audit]
/// eps = 0.5
/// isolation = { min_depth = 3, max_leaf_allies = 2, min_opposite_mass = 20 }
///
/// [content]
/// crime_min = 0.0
/// ```
///
/// Omitted tables and keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub seed: u64,
    /// Train the code-violation baseline alongside the HITL model.
    pub baseline: bool,
    /// Refuse to train a round that has not been audited unless forced.
    pub audit_gate: bool,
    /// Probability at or above which a parcel is predicted VAD.
    pub threshold: f64,
    pub weights: WeightConfig,
    pub forest: ForestParams,
    pub sampler: SamplerConfig,
    pub audit: AuditConfig,
    pub content: ContentThresholds,
    pub filter: FilterConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            seed: 42,
            baseline: true,
            audit_gate: true,
            threshold: 0.5,
            weights: WeightConfig::default(),
            forest: ForestParams::default(),
            sampler: SamplerConfig::default(),
            audit: AuditConfig::default(),
            content: ContentThresholds::default(),
            filter: FilterConfig::default(),
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), SessionError> {
        self.forest.validate()?;
        self.weights
            .validate()
            .map_err(|e| SessionError::InvalidConfig(e.to_string()))?;
        if let Some(m) = &self.sampler.mix {
            m.validate()?;
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(SessionError::InvalidConfig(format!(
                "threshold must be in [0, 1], got {}",
                self.threshold
            )));
        }
        if !(self.audit.eps >= 0.0) {
            return Err(SessionError::InvalidConfig("audit.eps must be >= 0".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, SessionError> {
        let cfg: SessionConfig = toml::from_str(text).map_err(|e| SessionError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, SessionError> {
        toml::to_string(self).map_err(|e| SessionError::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, SessionError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}
