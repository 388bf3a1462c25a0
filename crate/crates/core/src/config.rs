//! Run configuration file (TOML).
//!
//! ```toml
//! [train]
//! dataset = "train.json"
//! batch_size = 3
//! epochs = 2
//!
//! [train.models]
//! actor = "gpt-4-turbo"
//!
//! [train.feedback]
//! kind = "rule_check"
//!
//! [gateway]
//! backend = "scripted"
//! script = "script.toml"
//!
//! [task]
//! kind = "toy"
//! required_tokens = ["PLAN:"]
//!
//! [guards]
//! repair_attempts = 3
//! ```
//!
//! Relative paths are resolved against the directory of the config file.
//! Secrets never live here; the API key comes from the environment.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actor::{DEFAULT_FINISH_MARKER, DEFAULT_MAX_ROUNDS, DEFAULT_THINK_CLOSE, DEFAULT_THINK_OPEN};
use crate::gateway::{Gateway, HttpBackend, HttpConfig, RetryPolicy, SamplingParams, Script, ScriptError};
use crate::guardrails::GuardConfig;
use crate::optimizer::DEFAULT_OPTIMIZER_RETRIES;
use crate::prompt::SegmentationConfig;
use crate::summarizer::DEFAULT_TRANSCRIPT_BUDGET;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error("cannot set up gateway: {0}")]
    Gateway(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub gateway: GatewayConfig,
    pub task: TaskConfig,
    pub guards: GuardConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: Option<PathBuf>,
    /// Use only the first `sample_limit` samples of the dataset.
    pub sample_limit: Option<usize>,
    /// Use exactly these samples, in this order.
    pub sample_ids: Option<Vec<String>>,
    pub batch_size: usize,
    pub epochs: u32,
    pub max_rounds: u32,
    pub convergence_patience: u32,
    /// Hard cap on logical gateway calls.
    pub call_budget: Option<u64>,
    /// Expected samples-per-epoch × epochs, checked before the run starts.
    pub episode_budget: Option<u64>,
    pub seed: u64,
    pub temperature: f64,
    pub max_output: Option<u32>,
    pub shuffle: bool,
    pub parallelism: usize,
    pub transcript_budget: usize,
    pub optimizer_retries: u32,
    pub models: ModelConfig,
    pub feedback: FeedbackConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            sample_limit: None,
            sample_ids: None,
            batch_size: 1,
            epochs: 1,
            max_rounds: DEFAULT_MAX_ROUNDS,
            convergence_patience: 1,
            call_budget: None,
            episode_budget: None,
            seed: 42,
            temperature: 0.0,
            max_output: None,
            shuffle: false,
            parallelism: 1,
            transcript_budget: DEFAULT_TRANSCRIPT_BUDGET,
            optimizer_retries: DEFAULT_OPTIMIZER_RETRIES,
            models: ModelConfig::default(),
            feedback: FeedbackConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub actor: String,
    pub summarizer: String,
    pub optimizer: String,
    pub repair: String,
    pub reflection: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let m = "gpt-4-turbo".to_string();
        Self {
            actor: m.clone(),
            summarizer: m.clone(),
            optimizer: m.clone(),
            repair: m.clone(),
            reflection: m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    None,
    Reflexion,
    ThinkTrace,
    RuleCheck,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedbackConfig {
    pub kind: FeedbackKind,
    pub finish_marker: String,
    pub think_open: String,
    pub think_close: String,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self {
            kind: FeedbackKind::Reflexion,
            finish_marker: DEFAULT_FINISH_MARKER.into(),
            think_open: DEFAULT_THINK_OPEN.into(),
            think_close: DEFAULT_THINK_CLOSE.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub backend: BackendKind,
    pub script: Option<PathBuf>,
    pub base_url: String,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Http,
            script: None,
            base_url: "https://api.openai.com/v1".into(),
            timeout_secs: 120,
            max_attempts: 3,
            base_delay_ms: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Built-in trip planning task with a rule checker.
    Toy,
    /// Any slot-filled task; no built-in checker.
    Generic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub required_tokens: Vec<String>,
    pub segmentation: SegmentationConfig,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::Generic,
            required_tokens: Vec::new(),
            segmentation: SegmentationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: "<inline>".into(),
            message: e.to_string(),
        })
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: shown.clone(),
            source,
        })?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: shown,
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.train.dataset);
        fix(&mut self.gateway.script);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks settings that do not depend on the dataset.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.train;
        let positive = [
            ("batch_size", t.batch_size as u64),
            ("epochs", t.epochs as u64),
            ("max_rounds", t.max_rounds as u64),
            ("convergence_patience", t.convergence_patience as u64),
            ("transcript_budget", t.transcript_budget as u64),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError::Invalid(format!("train.{name} must be positive")));
        }
        if t.call_budget == Some(0) {
            return Err(ConfigError::Invalid("train.call_budget must be positive".into()));
        }
        if !(0.0..=2.0).contains(&t.temperature) {
            return Err(ConfigError::Invalid("train.temperature must be within [0, 2]".into()));
        }
        if self.gateway.max_attempts == 0 {
            return Err(ConfigError::Invalid("gateway.max_attempts must be positive".into()));
        }
        self.task
            .segmentation
            .compile()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Checks the relation between the config and the number of training
    /// samples actually used.
    pub fn validate_for_samples(&self, samples: usize) -> Result<(), ConfigError> {
        let t = &self.train;
        if samples == 0 {
            return Err(ConfigError::Invalid("the training set is empty".into()));
        }
        if t.batch_size > samples {
            return Err(ConfigError::Invalid(format!(
                "train.batch_size {} exceeds the {samples} training samples",
                t.batch_size
            )));
        }
        if let Some(budget) = t.episode_budget {
            let planned = samples as u64 * t.epochs as u64;
            if planned != budget {
                return Err(ConfigError::Invalid(format!(
                    "{samples} samples × {} epochs = {planned} episodes, but train.episode_budget is {budget}",
                    t.epochs
                )));
            }
        }
        Ok(())
    }

    pub fn sampling(&self, model: &str) -> SamplingParams {
        SamplingParams {
            model: model.to_string(),
            temperature: self.train.temperature,
            seed: Some(self.train.seed),
            max_output: self.train.max_output,
        }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.gateway.max_attempts,
            base_delay: Duration::from_millis(self.gateway.base_delay_ms),
        }
    }

    /// Builds the gateway for this config. A scripted backend uses `script`
    /// when given, otherwise the configured script file.
    pub fn build_gateway(&self, script: Option<Script>) -> Result<Gateway, ConfigError> {
        match self.gateway.backend {
            BackendKind::Scripted => {
                let script = match script {
                    Some(s) => s,
                    None => {
                        let path = self.gateway.script.as_ref().ok_or_else(|| {
                            ConfigError::Invalid("the scripted backend needs gateway.script or --script".into())
                        })?;
                        crate::gateway::load_script(path)?
                    }
                };
                Ok(Gateway::with_retry(
                    crate::gateway::ScriptedBackend::new(script),
                    RetryPolicy::no_delay(self.gateway.max_attempts),
                ))
            }
            BackendKind::Http => {
                let mut http = HttpConfig::from_env(self.gateway.base_url.clone());
                http.timeout = Duration::from_secs(self.gateway.timeout_secs);
                let backend = HttpBackend::new(http).map_err(|e| ConfigError::Gateway(e.to_string()))?;
                Ok(Gateway::with_retry(backend, self.retry_policy()))
            }
        }
    }
}
