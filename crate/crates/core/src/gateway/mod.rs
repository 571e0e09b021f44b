//! Model backends, the prompt registry and structured-output parsing.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_log::ThreadTag;

mod hashing;
mod http;
mod plan;
mod prompts;
mod scripted;

pub use hashing::HashingEmbedder;
pub use http::{HttpEmbedder, HttpGenerator};
pub use plan::{parse_research_plan, Direction, ResearchPlan};
pub use prompts::{
    placeholders, render_prompt, template, with_metric_convention, Bindings,
    METRIC_CONVENTION,
};
pub use scripted::{ScriptOutcome, ScriptRule, ScriptedBackend};

#[derive(Debug, Clone, Error, PartialEq, Serialize, Deserialize)]
pub enum GatewayError {
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("backend failure: {message}")]
    BackendFailure {
        message: String,
        retry_after: Option<u64>,
    },
    #[error("script has no response for {prompt} on thread {thread}")]
    ScriptExhausted { prompt: PromptName, thread: ThreadTag },
    #[error("no binding for placeholder {{{0}}}")]
    MissingBinding(String),
    #[error("unknown prompt template {0:?}")]
    UnknownTemplate(String),
    #[error("malformed research plan: {0}")]
    MalformedPlan(String),
    #[error("research plan has {0} directions, at least 3 are required")]
    TooFewDirections(usize),
    #[error("response contains no fenced code block")]
    NoCodeBlock,
    #[error("response contains {0} fenced code blocks")]
    MultipleBlocks(usize),
    #[error("input text is empty")]
    EmptyInput,
    #[error("embedding dimension drifted: expected {expected}, got {got}")]
    DimensionDrift { expected: usize, got: usize },
}

impl GatewayError {
    pub fn failure(message: impl Into<String>) -> Self {
        GatewayError::BackendFailure {
            message: message.into(),
            retry_after: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptName {
    Descriptor,
    Draft,
    Debug,
    Plan,
    Improve,
    PromoteP1,
    PromoteP2,
}

impl PromptName {
    pub const ALL: [PromptName; 7] = [
        PromptName::Descriptor,
        PromptName::Draft,
        PromptName::Debug,
        PromptName::Plan,
        PromptName::Improve,
        PromptName::PromoteP1,
        PromptName::PromoteP2,
    ];
}

impl fmt::Display for PromptName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for PromptName {
    type Err = GatewayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptName::ALL
            .into_iter()
            .find(|p| p.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| GatewayError::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GenerationRequest {
    pub prompt_name: PromptName,
    pub rendered_prompt: String,
    #[serde(default)]
    pub config: BTreeMap<String, serde_json::Value>,
    pub timeout: Duration,
    #[serde(default)]
    pub thread: ThreadTag,
}

impl GenerationRequest {
    pub fn new(prompt_name: PromptName, rendered_prompt: impl Into<String>) -> Self {
        Self {
            prompt_name,
            rendered_prompt: rendered_prompt.into(),
            config: BTreeMap::new(),
            timeout: Duration::from_secs(600),
            thread: ThreadTag::Main,
        }
    }

    pub fn on(mut self, thread: ThreadTag) -> Self {
        self.thread = thread;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: usize,
    pub output_tokens: usize,
}

pub trait Generator: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<Completion, GatewayError>;
}

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    /// Backend output before validation and normalization.
    fn embed_raw(&self, text: &str) -> Result<Vec<f64>, GatewayError>;
}

/// Checks the request and forwards it to the backend.
pub fn generate(backend: &dyn Generator, request: &GenerationRequest) -> Result<Completion, GatewayError> {
    if request.rendered_prompt.is_empty() {
        return Err(GatewayError::EmptyInput);
    }
    backend.generate(request)
}

/// Unit-norm embedding of `text`.
pub fn embed(backend: &dyn Embedder, text: &str) -> Result<Vec<f64>, GatewayError> {
    if text.trim().is_empty() {
        return Err(GatewayError::EmptyInput);
    }
    let v = backend.embed_raw(text)?;
    if v.len() != backend.dimension() {
        return Err(GatewayError::DimensionDrift {
            expected: backend.dimension(),
            got: v.len(),
        });
    }
    normalize(v).ok_or_else(|| GatewayError::failure("backend returned a zero vector"))
}

pub fn normalize(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

/// What to do when a response holds more than one fenced block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum MultipleBlocksPolicy {
    #[default]
    FirstWins,
    Error,
}

fn code_blocks(text: &str) -> Vec<&str> {
    let mut blocks = Vec::new();
    let mut open: Option<usize> = None;
    let mut pos = 0;
    for line in text.split_inclusive('\n') {
        if line.trim_start().starts_with("```") {
            match open.take() {
                None => open = Some(pos + line.len()),
                Some(start) => blocks.push(&text[start..pos]),
            }
        }
        pos += line.len();
    }
    // An unterminated block runs to the end of the text.
    if let Some(start) = open {
        blocks.push(&text[start..]);
    }
    blocks
}

/// Body of the first fenced block, without the fence lines.
pub fn extract_first_code_block(text: &str) -> Option<&str> {
    code_blocks(text).into_iter().next()
}

pub fn extract_code_block(text: &str, policy: MultipleBlocksPolicy) -> Result<&str, GatewayError> {
    let blocks = code_blocks(text);
    match (blocks.len(), policy) {
        (0, _) => Err(GatewayError::NoCodeBlock),
        (1, _) | (_, MultipleBlocksPolicy::FirstWins) => Ok(blocks[0]),
        (n, MultipleBlocksPolicy::Error) => Err(GatewayError::MultipleBlocks(n)),
    }
}
