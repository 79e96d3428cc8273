//! Layered configuration. Built-in defaults are overridden by a TOML file,
//! then by `AMCR_*` environment variables, then by command-line flags. The
//! last two layers are resolved together by the CLI parser.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backends::JsonEndpoint;
use crate::detector::{AggregationRule, DEFAULT_BETA};
use crate::diffusion::ScheduleFamily;
use crate::error::{Error, Result};
use crate::mitigator::{FixtureSpec, MitigationConfig};
use crate::sanitizer::SanitizerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Hermetic seeded encoder with the planted fixture vocabulary.
    #[default]
    Test,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub dim: usize,
    pub endpoint: Option<JsonEndpoint>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Test,
            dim: 64,
            endpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    /// External slot parser; the rule-based parser is used when absent.
    pub slots: Option<JsonEndpoint>,
    /// External candidate generator; the synonym table is used when absent.
    pub candidates: Option<JsonEndpoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub beta: f64,
    pub tau: f64,
    pub rule: AggregationRule,
    /// Step weights; uniform over evaluated steps when absent.
    pub pi: Option<Vec<f64>>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            tau: 0.9,
            rule: AggregationRule::WeightedMean,
            pi: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub total_steps: usize,
    pub schedule: ScheduleFamily,
    /// Evaluated steps; spread evenly over the schedule when absent.
    pub steps: Option<Vec<usize>>,
    pub step_count: usize,
    /// Patch size and embedding dimension of the hermetic patch encoder.
    pub patch: usize,
    pub embed_dim: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        let f = FixtureSpec::default();
        Self {
            total_steps: f.total_steps,
            schedule: ScheduleFamily::Cosine,
            steps: None,
            step_count: f.steps.len(),
            patch: f.patch,
            embed_dim: f.embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    /// Per-layer weights; uniform when absent.
    pub layer_weights: Option<Vec<f64>>,
    /// Token indices to reduce over; all tokens when absent.
    pub tokens: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { steps: 200, lr: 1e-2 }
    }
}

/// Every tunable default in one place.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub providers: ProviderConfig,
    pub sanitizer: SanitizerConfig,
    pub detector: DetectorConfig,
    pub diffusion: DiffusionConfig,
    pub mask: MaskConfig,
    pub mitigation: MitigationConfig,
    pub finetune: FinetuneConfig,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Built-in defaults, overlaid with `path` when given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
            None => Ok(Self::default()),
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.sanitizer.validate()?;
        self.mitigation.validate()?;
        if !(self.detector.beta > 0.0) || !self.detector.beta.is_finite() {
            return Err(Error::Config(format!("detector.beta must be positive, got {}", self.detector.beta)));
        }
        if !self.detector.tau.is_finite() {
            return Err(Error::Config("detector.tau must be finite".into()));
        }
        if self.encoder.dim == 0 {
            return Err(Error::Config("encoder.dim must be positive".into()));
        }
        if self.encoder.kind == EncoderKind::Remote && self.encoder.endpoint.is_none() {
            return Err(Error::Config("encoder.kind = \"remote\" needs encoder.endpoint".into()));
        }
        if !(self.finetune.lr >= 0.0) {
            return Err(Error::Config("finetune.lr must be nonnegative".into()));
        }
        Ok(())
    }
}
