//! TOML run configuration. Every field has a default so a partial file (or
//! none at all) still yields a runnable setup; unknown keys are rejected.

use crate::curation::CurationConfig;
use crate::model::BudgetConfig;
use crate::training::{BETA_RANGE, EPOCH_RANGE};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderMode {
    Simulated,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub mode: ProviderMode,
    pub base_url: String,
    /// Name of the environment variable holding the API key; the key itself
    /// never appears in config or logs.
    pub api_key_env: String,
    pub plan_model: String,
    pub research_model: String,
    pub judge_model: String,
    pub base_model: String,
    pub requests_per_second: f64,
    pub burst: f64,
    /// Cost per input token in dollars; spend accounting multiplies usage by
    /// these rates.
    pub rate_in: f64,
    /// Cost per output token in dollars.
    pub rate_out: f64,
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub jitter: f64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            mode: ProviderMode::Simulated,
            base_url: "https://api.example.com/v1".into(),
            api_key_env: "ALAS_API_KEY".into(),
            plan_model: "sim:planner".into(),
            research_model: "sim:researcher".into(),
            judge_model: "sim:judge".into(),
            base_model: "sim:base".into(),
            requests_per_second: 10.0,
            burst: 50.0,
            rate_in: 2e-6,
            rate_out: 6e-6,
            max_attempts: 3,
            base_delay_ms: 1000,
            max_delay_ms: 30_000,
            jitter: 0.2,
        }
    }
}

/// What to do with a topic whose generation failed after all retries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailedTopicPolicy {
    /// Drop the topic from future iterations.
    Skip,
    /// Keep it eligible with its question quota halved each failure.
    Downweight,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub min_topics: usize,
    /// How many advanced subtopics of mastered areas one iteration may take.
    pub advanced_topic_cap: usize,
    pub failed_topic_policy: FailedTopicPolicy,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            min_topics: 10,
            advanced_topic_cap: 2,
            failed_topic_policy: FailedTopicPolicy::Downweight,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub probe_per_category: usize,
    pub judge_attempts: u32,
    pub calibration_fraction: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig { probe_per_category: 10, judge_attempts: 3, calibration_fraction: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: u32,
    pub length_normalize: bool,
    pub poll_interval_ms: u64,
    pub max_polls: u32,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig { epochs: 2, length_normalize: false, poll_interval_ms: 10, max_polls: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// World definition for the simulated provider; required in simulated
    /// mode unless the caller supplies a world programmatically.
    pub world_path: Option<String>,
    /// Fraction of research replies deliberately malformed before return,
    /// for exercising the repair path end to end.
    pub malformed_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StorageConfig {
    pub root: String,
}

impl Default for StorageConfig {
    fn default() -> Self {
        StorageConfig { root: "alas_data".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub budget: BudgetConfig,
    pub curriculum: CurriculumConfig,
    pub curation: CurationConfig,
    pub evaluation: EvaluationConfig,
    pub training: TrainingConfig,
    pub provider: ProviderConfig,
    pub simulation: SimulationConfig,
    pub storage: StorageConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Unreadable {
            path: path.display().to_string(),
            source,
        })?;
        Config::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Config, ConfigError> {
        let config: Config = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.budget.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !EPOCH_RANGE.contains(&self.training.epochs) {
            return invalid(format!("training.epochs {} outside 1..=3", self.training.epochs));
        }
        if !(BETA_RANGE.0..=BETA_RANGE.1).contains(&self.budget.beta) {
            return invalid(format!("budget.beta {} outside [0.1, 0.5]", self.budget.beta));
        }
        if self.curriculum.min_topics == 0 {
            return invalid("curriculum.min_topics must be positive".into());
        }
        if self.evaluation.probe_per_category == 0 {
            return invalid("evaluation.probe_per_category must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.evaluation.calibration_fraction) {
            return invalid("evaluation.calibration_fraction must sit in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.curation.dedup_threshold) {
            return invalid("curation.dedup_threshold must sit in [0, 1]".into());
        }
        if self.curation.outlier_percentile <= 0.0 || self.curation.outlier_percentile >= 1.0 {
            return invalid("curation.outlier_percentile must sit in (0, 1)".into());
        }
        if self.curation.balance_tolerance < 0.0 {
            return invalid("curation.balance_tolerance must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.simulation.malformed_rate) {
            return invalid("simulation.malformed_rate must sit in [0, 1]".into());
        }
        if self.provider.requests_per_second <= 0.0 || self.provider.burst < 1.0 {
            return invalid("provider rate limit must allow at least one request".into());
        }
        if self.provider.max_attempts == 0 {
            return invalid("provider.max_attempts must be positive".into());
        }
        if self.provider.rate_in < 0.0 || self.provider.rate_out < 0.0 {
            return invalid("provider token rates must be non-negative".into());
        }
        if self.storage.root.trim().is_empty() {
            return invalid("storage.root must be set".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_yields_defaults() {
        let config = Config::from_toml("").unwrap();
        assert_eq!(config, Config::default());
        assert_eq!(config.budget.tau, 0.90);
        assert_eq!(config.training.epochs, 2);
        assert_eq!(config.provider.mode, ProviderMode::Simulated);
    }

    #[test]
    fn partial_section_overrides_only_named_fields() {
        let config = Config::from_toml(
            "[budget]\ntau = 0.8\n\n[training]\nepochs = 3\n",
        )
        .unwrap();
        assert_eq!(config.budget.tau, 0.8);
        assert_eq!(config.budget.delta, 0.01);
        assert_eq!(config.training.epochs, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = Config::from_toml("[training]\nepochz = 2\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        assert!(Config::from_toml("[training]\nepochs = 9\n").is_err());
        assert!(Config::from_toml("[budget]\nbeta = 0.9\n").is_err());
        assert!(Config::from_toml("[curation]\noutlier_percentile = 1.5\n").is_err());
        assert!(Config::from_toml("[simulation]\nmalformed_rate = 2.0\n").is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut config = Config::default();
        config.seed = 9;
        config.budget.max_iterations = 2;
        config.simulation.world_path = Some("worlds/a.json".into());
        let text = config.to_toml();
        assert_eq!(Config::from_toml(&text).unwrap(), config);
    }

    #[test]
    fn load_reports_missing_file() {
        let err = Config::load(Path::new("/nonexistent/alas.toml")).unwrap_err();
        assert!(matches!(err, ConfigError::Unreadable { .. }));
    }
}
