//! Run configuration: one TOML file holding backend, models, prices,
//! schedule, metric, tools and dataset paths.
//!
//! ```toml
//! clock = "logical"
//!
//! [backend]
//! kind = "mock"          # mock | http
//! script = "mock.json"   # omit for the built-in toy responder
//!
//! [replay]
//! mode = "record"        # record | replay
//! store = "store.jsonl"
//!
//! [models]
//! executor_model = "gpt-4o-mini"
//! meta_model = "gpt-4o"
//!
//! [prices.gpt-4o]
//! input_per_1m = 2.5
//! output_per_1m = 10.0
//!
//! [train]
//! batch_size = 5
//! mode = "full"
//! seed = 7
//!
//! [metric]
//! name = "exact_match"
//!
//! [[tools]]
//! name = "wikipedia_search_topk"
//! corpus = "corpus.jsonl"
//!
//! [data]
//! train = "train.jsonl"
//! val = "val.jsonl"
//! ```
//!
//! Relative paths resolve against the directory of the config file.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::engine::Engine;
use crate::evaluation::Metric;
use crate::llm::{ChatBackend, HttpBackend, LlmClient, ModelSettings, ReplayBackend, ReplayMode, ScriptedMock};
use crate::prompts::Templates;
use crate::run_store::{Clock, Ledger, PriceTable};
use crate::tools::{Corpus, SearchTool, ToolRegistry};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendConfig {
    Mock {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        script: Option<PathBuf>,
    },
    Http {
        endpoint: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        api_key_env: Option<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
}

fn default_timeout() -> u64 {
    120
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Mock { script: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayConfig {
    pub mode: ReplayMode,
    pub store: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockKind {
    #[default]
    Logical,
    System,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolConfig {
    pub name: String,
    pub corpus: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub clock: ClockKind,
    /// Directory of `<template>.system.txt` / `.user.txt` overrides.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<PathBuf>,
    /// Start from this checkpoint instead of bootstrapping.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay: Option<ReplayConfig>,
    #[serde(default)]
    pub models: ModelSettings,
    #[serde(default)]
    pub prices: PriceTable,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_metric")]
    pub metric: Metric,
    #[serde(default)]
    pub tools: Vec<ToolConfig>,
    #[serde(default)]
    pub data: DataConfig,
}

fn default_metric() -> Metric {
    Metric::ExactMatch
}

impl Default for Config {
    fn default() -> Self {
        Self {
            clock: ClockKind::Logical,
            templates_dir: None,
            initial_checkpoint: None,
            backend: BackendConfig::default(),
            replay: None,
            models: ModelSettings::default(),
            prices: PriceTable::new(),
            train: TrainConfig::default(),
            metric: Metric::ExactMatch,
            tools: Vec::new(),
            data: DataConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{what} not found: {path}")]
    Missing { what: &'static str, path: PathBuf },
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::parse(&text).map_err(|message| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = std::path::absolute(&base).unwrap_or(base);
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: Config = toml::from_str(text).map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Makes every relative path absolute against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let BackendConfig::Mock { script: Some(p) } = &mut self.backend {
            fix(p);
        }
        if let Some(r) = &mut self.replay {
            fix(&mut r.store);
        }
        for p in [
            &mut self.templates_dir,
            &mut self.initial_checkpoint,
            &mut self.data.train,
            &mut self.data.val,
            &mut self.data.test,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        for t in &mut self.tools {
            fix(&mut t.corpus);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate().map_err(ConfigError::Invalid)
    }

    fn backend(&self) -> Result<Arc<dyn ChatBackend>, ConfigError> {
        let backend_err = |e: crate::llm::BackendError| ConfigError::Invalid(e.to_string());
        if let Some(ReplayConfig {
            mode: ReplayMode::Replay,
            store,
        }) = &self.replay
        {
            if !store.exists() {
                return Err(ConfigError::Missing {
                    what: "replay store",
                    path: store.clone(),
                });
            }
            return Ok(Arc::new(ReplayBackend::replay(store).map_err(backend_err)?));
        }
        let inner: Arc<dyn ChatBackend> = match &self.backend {
            BackendConfig::Mock { script: None } => Arc::new(ScriptedMock::toy()),
            BackendConfig::Mock { script: Some(p) } => {
                if !p.exists() {
                    return Err(ConfigError::Missing {
                        what: "mock script",
                        path: p.clone(),
                    });
                }
                Arc::new(ScriptedMock::from_file(p).map_err(backend_err)?)
            }
            BackendConfig::Http {
                endpoint,
                api_key_env,
                timeout_secs,
            } => Arc::new(
                HttpBackend::new(endpoint.clone(), api_key_env.as_deref(), Duration::from_secs(*timeout_secs))
                    .map_err(backend_err)?,
            ),
        };
        match &self.replay {
            Some(ReplayConfig {
                mode: ReplayMode::Record,
                store,
            }) => Ok(Arc::new(ReplayBackend::record(store, inner).map_err(backend_err)?)),
            _ => Ok(inner),
        }
    }

    pub fn tools(&self) -> Result<ToolRegistry, ConfigError> {
        let mut reg = ToolRegistry::new();
        for t in &self.tools {
            if !t.corpus.exists() {
                return Err(ConfigError::Missing {
                    what: "corpus",
                    path: t.corpus.clone(),
                });
            }
            let corpus = Corpus::load(&t.corpus).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            reg = reg
                .with(Arc::new(SearchTool::new(t.name.clone(), Arc::new(corpus))))
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(reg)
    }

    pub fn build_engine(&self) -> Result<Engine, ConfigError> {
        self.validate()?;
        let clock = match self.clock {
            ClockKind::Logical => Clock::logical(),
            ClockKind::System => Clock::System,
        };
        let ledger = Arc::new(Ledger::new(self.prices.clone(), clock));
        let mut client = LlmClient::new(self.backend()?, ledger, self.models.clone());
        client.budget = self.train.budget;
        let mut engine = Engine::new(client, self.tools()?);
        if let Some(dir) = &self.templates_dir {
            engine.templates = Templates::with_overrides(dir).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(engine)
    }
}
