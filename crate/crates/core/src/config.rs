//! TOML run configuration: backend settings, pipeline constants and metric
//! settings. Unknown keys are rejected; absent keys take the defaults below.

use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Duration;

use crate::agents::AgentConfig;
use crate::aspects::AcquisitionConfig;
use crate::backend::HttpBackendConfig;
use crate::error::{Error, Result};
use crate::metrics::{EvalConfig, JudgeConfig};
use crate::orchestrator::EpisodeConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemperatureConfig {
    pub planner: f64,
    pub refiner: f64,
    pub reflector: f64,
    pub summarizer: f64,
    pub judge: f64,
}

impl Default for TemperatureConfig {
    fn default() -> Self {
        TemperatureConfig {
            planner: 0.0,
            refiner: 0.7,
            reflector: 0.0,
            summarizer: 0.0,
            judge: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSettings {
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub retries: u32,
    pub backoff_ms: u64,
    /// Requests per second; 0 disables rate limiting.
    pub rate_limit_per_sec: f64,
    pub max_in_flight: usize,
    pub max_output_tokens: u32,
    pub timeout_secs: u64,
    /// Cache responses keyed by request content.
    pub cache: bool,
    pub temperature: TemperatureConfig,
}

impl Default for BackendSettings {
    fn default() -> Self {
        BackendSettings {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-3.5-turbo".into(),
            api_key_env: "REFINERY_API_KEY".into(),
            retries: 3,
            backoff_ms: 500,
            rate_limit_per_sec: 0.0,
            max_in_flight: 4,
            max_output_tokens: 512,
            timeout_secs: 60,
            cache: false,
            temperature: TemperatureConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSettings {
    /// Maximum refinement rounds per sample.
    pub max_rounds: u32,
    /// Word cap for generated explanations.
    pub max_length: usize,
    /// Predicted ratings at or above this read as a positive preference.
    pub preference_threshold: f64,
    pub characteristics_budget: usize,
    pub personalities_budget: usize,
    pub pros_cons_snippets: usize,
    pub summarize_pros_cons: bool,
    pub seed: u64,
    /// Test users sampled for evaluation.
    pub sample_users: usize,
    /// Parse-repair attempts per agent call.
    pub repair_attempts: u32,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            max_rounds: 6,
            max_length: 20,
            preference_threshold: 3.0,
            characteristics_budget: 1500,
            personalities_budget: 1000,
            pros_cons_snippets: 5,
            summarize_pros_cons: false,
            seed: 42,
            sample_users: 200,
            repair_attempts: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSettings {
    /// Judge model override; empty means the backend model.
    pub judge_model: String,
    pub judge_max_tokens: u32,
}

impl Default for MetricSettings {
    fn default() -> Self {
        MetricSettings {
            judge_model: String::new(),
            judge_max_tokens: 16,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub backend: BackendSettings,
    pub pipeline: PipelineSettings,
    pub metrics: MetricSettings,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.into()))
            }
        };
        check(self.pipeline.max_rounds >= 1, "pipeline.max_rounds must be >= 1")?;
        check(self.pipeline.max_length >= 1, "pipeline.max_length must be >= 1")?;
        check(
            self.pipeline.preference_threshold > 1.0 && self.pipeline.preference_threshold < 5.0,
            "pipeline.preference_threshold must lie strictly between 1 and 5",
        )?;
        check(
            self.pipeline.characteristics_budget >= 100,
            "pipeline.characteristics_budget must be >= 100",
        )?;
        check(
            self.pipeline.personalities_budget >= 100,
            "pipeline.personalities_budget must be >= 100",
        )?;
        check(
            self.pipeline.pros_cons_snippets >= 1,
            "pipeline.pros_cons_snippets must be >= 1",
        )?;
        check(self.pipeline.sample_users >= 1, "pipeline.sample_users must be >= 1")?;
        check(self.pipeline.repair_attempts >= 1, "pipeline.repair_attempts must be >= 1")?;
        check(self.backend.retries >= 1, "backend.retries must be >= 1")?;
        check(self.backend.max_in_flight >= 1, "backend.max_in_flight must be >= 1")?;
        check(
            self.backend.rate_limit_per_sec >= 0.0,
            "backend.rate_limit_per_sec must be >= 0",
        )?;
        check(self.backend.max_output_tokens >= 1, "backend.max_output_tokens must be >= 1")?;
        for (name, value) in [
            ("planner", self.backend.temperature.planner),
            ("refiner", self.backend.temperature.refiner),
            ("reflector", self.backend.temperature.reflector),
            ("summarizer", self.backend.temperature.summarizer),
            ("judge", self.backend.temperature.judge),
        ] {
            if value < 0.0 {
                return Err(Error::Config(format!(
                    "backend.temperature.{name} must be >= 0"
                )));
            }
        }
        Ok(())
    }

    pub fn acquisition(&self) -> AcquisitionConfig {
        AcquisitionConfig {
            characteristics_budget: self.pipeline.characteristics_budget,
            personalities_budget: self.pipeline.personalities_budget,
            pros_cons_snippets: self.pipeline.pros_cons_snippets,
            summarize_pros_cons: self.pipeline.summarize_pros_cons,
            preference_threshold: self.pipeline.preference_threshold,
        }
    }

    pub fn agent(&self) -> AgentConfig {
        AgentConfig {
            repair_attempts: self.pipeline.repair_attempts,
            max_output_tokens: self.backend.max_output_tokens,
            planner_temperature: self.backend.temperature.planner,
            refiner_temperature: self.backend.temperature.refiner,
            reflector_temperature: self.backend.temperature.reflector,
            summarizer_temperature: self.backend.temperature.summarizer,
        }
    }

    pub fn judge(&self) -> JudgeConfig {
        JudgeConfig {
            repair_attempts: self.pipeline.repair_attempts,
            temperature: self.backend.temperature.judge,
            max_output_tokens: self.metrics.judge_max_tokens,
        }
    }

    pub fn episode(&self) -> EpisodeConfig {
        EpisodeConfig {
            max_rounds: self.pipeline.max_rounds,
            max_length: self.pipeline.max_length,
            acquisition: self.acquisition(),
            agent: self.agent(),
            judge: self.judge(),
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            preference_threshold: self.pipeline.preference_threshold,
            judge: self.judge(),
        }
    }

    /// Build the live-backend config, reading the API key from the configured
    /// environment variable. The judge model override applies when `for_judges`.
    pub fn http_backend(&self, for_judges: bool) -> HttpBackendConfig {
        let model = if for_judges && !self.metrics.judge_model.is_empty() {
            self.metrics.judge_model.clone()
        } else {
            self.backend.model.clone()
        };
        let interval = if self.backend.rate_limit_per_sec > 0.0 {
            Duration::from_secs_f64(1.0 / self.backend.rate_limit_per_sec)
        } else {
            Duration::ZERO
        };
        HttpBackendConfig {
            base_url: self.backend.base_url.clone(),
            model,
            api_key: std::env::var(&self.backend.api_key_env).ok(),
            retries: self.backend.retries,
            backoff: Duration::from_millis(self.backend.backoff_ms),
            min_request_interval: interval,
            max_in_flight: self.backend.max_in_flight,
            timeout: Duration::from_secs(self.backend.timeout_secs),
        }
    }
}

/// Parse and validate a TOML config file.
pub fn load_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let config: Config =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}
