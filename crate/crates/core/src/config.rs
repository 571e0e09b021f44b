//! TOML configuration and the services it describes.
//!
//! ```toml
//! seed = 7
//! clock = "fixed"            # or "system"
//!
//! [generation]
//! backend = "scripted"       # or "http"
//! script = "script.json"     # relative to this file
//!
//! [embedding]
//! backend = "hashing"        # or "http"
//! dimension = 64
//!
//! [sandbox]
//! kind = "mock"              # or "subprocess"
//! mockTable = "mock.json"
//!
//! [run]
//! maxPhases = 3
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Embedder, Generator, HashingEmbedder, HttpEmbedder, HttpGenerator, PromptName, ScriptedBackend};
use crate::journal::{Clock, Deadline, FixedClock, Journal, JournalMode, Offline, Services, SystemClock};
use crate::orchestrator::{RunConfig, TaskSpec};
use crate::sandbox::{Environment, MockEnv, MockRow, SandboxConfig, SubprocessEnv};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn unreadable(path: &Path, reason: impl ToString) -> ConfigError {
    ConfigError::Unreadable {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerationBackend {
    Http,
    #[default]
    Scripted,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct GenerationConfig {
    pub backend: GenerationBackend,
    pub base_url: String,
    pub model: String,
    pub api_key_env: Option<String>,
    /// Scripted rules as JSON.
    pub script: Option<PathBuf>,
    /// Echo unmatched prompts instead of failing.
    pub lenient: bool,
    pub model_overrides: BTreeMap<PromptName, String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingBackend {
    Http,
    #[default]
    Hashing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct EmbeddingConfig {
    pub backend: EmbeddingBackend,
    pub dimension: usize,
    /// Hashing seed; falls back to the top-level seed.
    pub seed: Option<u64>,
    pub base_url: String,
    pub model: String,
    pub api_key_env: Option<String>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            backend: EmbeddingBackend::Hashing,
            dimension: 64,
            seed: None,
            base_url: String::new(),
            model: String::new(),
            api_key_env: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct LimitsConfig {
    pub max_concurrent_requests: usize,
    pub request_timeout_sec: f64,
}

impl Default for LimitsConfig {
    fn default() -> Self {
        Self {
            max_concurrent_requests: 8,
            request_timeout_sec: 600.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SandboxKind {
    #[default]
    Subprocess,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct SandboxSection {
    pub kind: SandboxKind,
    pub interpreter: String,
    pub timeout_sec: f64,
    pub max_concurrent: usize,
    pub tail_lines: usize,
    pub tail_chars: usize,
    pub mock_table: Option<PathBuf>,
}

impl Default for SandboxSection {
    fn default() -> Self {
        let d = SandboxConfig::default();
        Self {
            kind: SandboxKind::Subprocess,
            interpreter: d.interpreter,
            timeout_sec: d.timeout_sec,
            max_concurrent: 4,
            tail_lines: d.tail_lines,
            tail_chars: d.tail_chars,
            mock_table: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct WarmConfig {
    /// Skip research phases and only bootstrap before distilling wisdom.
    pub fast_mode: bool,
}

impl Default for WarmConfig {
    fn default() -> Self {
        Self { fast_mode: true }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockKind {
    #[default]
    System,
    Fixed,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct AppConfig {
    pub seed: u64,
    pub clock: ClockKind,
    pub generation: GenerationConfig,
    pub embedding: EmbeddingConfig,
    pub limits: LimitsConfig,
    pub run: RunConfig,
    pub sandbox: SandboxSection,
    pub warm: WarmConfig,
}

impl AppConfig {
    /// Parses a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| unreadable(path, e))?;
        let mut cfg: AppConfig = toml::from_str(&text).map_err(|e| unreadable(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.generation.script, &mut cfg.sandbox.mock_table].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.run.request_timeout_sec = cfg.limits.request_timeout_sec;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.run.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.embedding.dimension == 0 {
            return Err(ConfigError::Invalid("embedding.dimension must be positive".into()));
        }
        if self.limits.max_concurrent_requests == 0 || self.sandbox.max_concurrent == 0 {
            return Err(ConfigError::Invalid("concurrency limits must be positive".into()));
        }
        Ok(())
    }

    fn api_key(var: &Option<String>) -> Option<String> {
        var.as_deref().and_then(|v| std::env::var(v).ok())
    }

    pub fn generator(&self) -> Result<Box<dyn Generator>, ConfigError> {
        let g = &self.generation;
        Ok(match g.backend {
            GenerationBackend::Scripted => {
                let path = g
                    .script
                    .as_deref()
                    .ok_or_else(|| ConfigError::Invalid("generation.script is required for the scripted backend".into()))?;
                let text = fs::read_to_string(path).map_err(|e| unreadable(path, e))?;
                let backend = ScriptedBackend::from_json(&text).map_err(|e| unreadable(path, e))?;
                Box::new(if g.lenient { backend.lenient() } else { backend })
            }
            GenerationBackend::Http => {
                if g.base_url.is_empty() || g.model.is_empty() {
                    return Err(ConfigError::Invalid("generation.baseUrl and generation.model are required".into()));
                }
                let mut http = HttpGenerator::new(&g.base_url, &g.model, Self::api_key(&g.api_key_env));
                http.model_overrides = g.model_overrides.clone();
                Box::new(http)
            }
        })
    }

    pub fn embedder(&self) -> Result<Box<dyn Embedder>, ConfigError> {
        let e = &self.embedding;
        Ok(match e.backend {
            EmbeddingBackend::Hashing => Box::new(HashingEmbedder::new(e.dimension, e.seed.unwrap_or(self.seed))),
            EmbeddingBackend::Http => Box::new(HttpEmbedder {
                base_url: e.base_url.clone(),
                model: e.model.clone(),
                api_key: Self::api_key(&e.api_key_env),
                dimension: e.dimension,
                timeout: Duration::from_secs_f64(self.limits.request_timeout_sec),
            }),
        })
    }

    pub fn environment(&self, task: &TaskSpec, workspaces: &Path) -> Result<Box<dyn Environment>, ConfigError> {
        let s = &self.sandbox;
        Ok(match s.kind {
            SandboxKind::Mock => {
                let path = s
                    .mock_table
                    .as_deref()
                    .ok_or_else(|| ConfigError::Invalid("sandbox.mockTable is required for the mock sandbox".into()))?;
                let text = fs::read_to_string(path).map_err(|e| unreadable(path, e))?;
                let rows: Vec<MockRow> = serde_json::from_str(&text).map_err(|e| unreadable(path, e))?;
                Box::new(MockEnv::new(rows))
            }
            SandboxKind::Subprocess => Box::new(SubprocessEnv::new(
                task.data_dir.clone(),
                workspaces.to_path_buf(),
                SandboxConfig {
                    interpreter: s.interpreter.clone(),
                    timeout_sec: s.timeout_sec,
                    tail_lines: s.tail_lines,
                    tail_chars: s.tail_chars,
                },
                s.max_concurrent,
            )),
        })
    }

    pub fn clock(&self) -> Box<dyn Clock> {
        match self.clock {
            ClockKind::System => Box::new(SystemClock),
            ClockKind::Fixed => Box::new(FixedClock::from_seed(self.seed)),
        }
    }

    /// Live services for a task, journaled into `usage`.
    pub fn services(&self, task: &TaskSpec, run_dir: &Path, mode: JournalMode, usage: &Path) -> Result<Services, ConfigError> {
        let journal = Journal::to_file(mode, usage).map_err(|e| unreadable(usage, e))?;
        let budget = self.run.wall_clock_budget_sec.map(Duration::from_secs_f64);
        Ok(Services::new(
            self.generator()?,
            self.embedder()?,
            self.environment(task, &run_dir.join("workspaces"))?,
            self.clock(),
        )
        .with_journal(journal)
        .with_deadline(Deadline::new(budget))
        .with_request_limit(self.limits.max_concurrent_requests))
    }

    /// Services answering only from recordings.
    pub fn replay_services(&self, mode: JournalMode, usage: &Path) -> Result<Services, ConfigError> {
        let journal = Journal::to_file(mode, usage).map_err(|e| unreadable(usage, e))?;
        Ok(Services::new(
            Box::new(Offline { dimension: self.embedding.dimension }),
            Box::new(Offline { dimension: self.embedding.dimension }),
            Box::new(Offline { dimension: self.embedding.dimension }),
            Box::new(FixedClock::from_seed(self.seed)),
        )
        .with_journal(journal))
    }
}
