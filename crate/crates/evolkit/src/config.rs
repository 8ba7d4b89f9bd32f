//! Run configuration.
//!
//! ```toml
//! store = "knowledge"
//! workers = 4
//! repeats = 3
//! seed = 0
//! selection = "random"          # or "completion"
//! std = "sample"                # or "population"
//! max_steps = 15
//!
//! [gateway]
//! mode = "replay"               # "live" | "replay" | "record"
//! fixtures = ["fixtures/run.jsonl"]
//! record_to = "fixtures/run.jsonl"
//! temperature = 0.0
//! max_output = 4096
//!
//! [gateway.models]
//! retrace = "gpt-4o"
//! critique = "o3"
//! selection = "o3"
//!
//! [gateway.live]
//! endpoint = "https://api.openai.com/v1/chat/completions"
//! api_key_env = "OPENAI_API_KEY"
//!
//! [executor]
//! default_success = false
//! step_ms = 1000
//! rules = [{ keyword = "Ctrl+A", success = true }, { keyword = "drag", success = false }]
//! ```
//!
//! Relative paths are resolved against the config file's directory.
//! Credentials come only from the environment variable named by
//! `gateway.live.api_key_env`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use evolkit_core::{StageSettings, StdConvention, DEFAULT_MAX_STEPS};
use serde::{Deserialize, Serialize};

use crate::harness::ScriptedExecutor;
use crate::live::LiveConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayMode {
    Live,
    #[default]
    Replay,
    Record,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    Random,
    Completion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelTags {
    pub retrace: String,
    pub critique: String,
    /// Falls back to the critique tag when empty.
    pub selection: String,
}

impl Default for ModelTags {
    fn default() -> Self {
        Self {
            retrace: "gpt-4o".into(),
            critique: "o3".into(),
            selection: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub mode: GatewayMode,
    pub fixtures: Vec<PathBuf>,
    pub record_to: Option<PathBuf>,
    pub temperature: f64,
    pub max_output: u32,
    pub models: ModelTags,
    pub live: LiveConfig,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            mode: GatewayMode::default(),
            fixtures: Vec::new(),
            record_to: None,
            temperature: 0.0,
            max_output: StageSettings::DEFAULT_MAX_OUTPUT,
            models: ModelTags::default(),
            live: LiveConfig::default(),
        }
    }
}

/// Per-stage sampling settings derived from the gateway section.
#[derive(Debug, Clone, PartialEq)]
pub struct Stages {
    pub retrace: StageSettings,
    pub critique: StageSettings,
    pub selection: StageSettings,
}

impl GatewayConfig {
    pub fn stages(&self) -> Stages {
        let stage = |tag: &str| StageSettings {
            model_tag: tag.into(),
            temperature: self.temperature,
            max_output: self.max_output,
        };
        let selection = if self.models.selection.is_empty() {
            &self.models.critique
        } else {
            &self.models.selection
        };
        Stages {
            retrace: stage(&self.models.retrace),
            critique: stage(&self.models.critique),
            selection: stage(selection),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub store: PathBuf,
    pub workers: usize,
    pub repeats: usize,
    pub seed: u64,
    pub selection: SelectionMode,
    pub std: StdConvention,
    pub max_steps: usize,
    pub gateway: GatewayConfig,
    pub executor: ScriptedExecutor,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            store: PathBuf::from("knowledge"),
            workers: 1,
            repeats: 3,
            seed: 0,
            selection: SelectionMode::default(),
            std: StdConvention::default(),
            max_steps: DEFAULT_MAX_STEPS,
            gateway: GatewayConfig::default(),
            executor: ScriptedExecutor::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut cfg: Config = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_owned(),
            source: Box::new(source),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.store);
        self.gateway.fixtures.iter_mut().for_each(fix);
        if let Some(p) = self.gateway.record_to.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if self.gateway.temperature.is_nan() || self.gateway.temperature < 0.0 {
            return bad("gateway.temperature must be >= 0");
        }
        if self.selection == SelectionMode::Completion && self.repeats != 3 {
            return bad("completion selection compares exactly 3 repeats; set repeats = 3");
        }
        if self.gateway.mode == GatewayMode::Record && self.gateway.record_to.is_none() {
            return bad("record mode needs gateway.record_to");
        }
        Ok(())
    }
}
