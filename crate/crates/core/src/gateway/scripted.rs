use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Completion, GatewayError, GenerationRequest, Generator, PromptName};
use crate::event_log::{QuarterCharCounter, ThreadTag, TokenCounter};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum ScriptOutcome {
    Response { text: String },
    /// Returns the rendered prompt unchanged.
    Echo,
    Timeout,
    Failure {
        message: String,
        #[serde(default, rename = "retryAfter")]
        retry_after: Option<u64>,
    },
}

/// One canned answer. A rule matches when every given field matches; the
/// first unconsumed match wins, and `repeat` rules are never consumed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default)]
    pub prompt: Option<PromptName>,
    #[serde(default)]
    pub contains: Option<String>,
    /// Thread in display form: `main` or `p1_d2_s1`.
    #[serde(default)]
    pub thread: Option<String>,
    #[serde(default)]
    pub repeat: bool,
    pub outcome: ScriptOutcome,
}

impl ScriptRule {
    pub fn respond(prompt: PromptName, text: impl Into<String>) -> Self {
        Self::with_outcome(prompt, ScriptOutcome::Response { text: text.into() })
    }

    pub fn with_outcome(prompt: PromptName, outcome: ScriptOutcome) -> Self {
        Self {
            prompt: Some(prompt),
            contains: None,
            thread: None,
            repeat: false,
            outcome,
        }
    }

    pub fn on(mut self, thread: ThreadTag) -> Self {
        self.thread = Some(thread.to_string());
        self
    }

    pub fn containing(mut self, needle: impl Into<String>) -> Self {
        self.contains = Some(needle.into());
        self
    }

    pub fn repeating(mut self) -> Self {
        self.repeat = true;
        self
    }

    fn matches(&self, request: &GenerationRequest) -> bool {
        self.prompt.is_none_or(|p| p == request.prompt_name)
            && self
                .contains
                .as_deref()
                .is_none_or(|c| request.rendered_prompt.contains(c))
            && self
                .thread
                .as_deref()
                .is_none_or(|t| t == request.thread.to_string())
    }
}

#[derive(Debug)]
struct State {
    rules: Vec<ScriptRule>,
    consumed: Vec<bool>,
}

/// Offline backend answering from an ordered rule list.
///
/// Rules pinned to a trajectory thread keep parallel phases deterministic;
/// unpinned rules are shared by whichever thread asks first.
#[derive(Debug)]
pub struct ScriptedBackend {
    state: Mutex<State>,
    strict: bool,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        let consumed = vec![false; rules.len()];
        Self {
            state: Mutex::new(State { rules, consumed }),
            strict: true,
        }
    }

    /// Unmatched requests are echoed instead of failing.
    pub fn lenient(mut self) -> Self {
        self.strict = false;
        self
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str(json)?))
    }

    pub fn remaining(&self) -> usize {
        let state = self.state.lock().expect("script lock");
        state
            .rules
            .iter()
            .zip(&state.consumed)
            .filter(|(r, used)| !r.repeat && !**used)
            .count()
    }
}

impl Generator for ScriptedBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<Completion, GatewayError> {
        let outcome = {
            let mut state = self.state.lock().expect("script lock");
            let found = (0..state.rules.len())
                .find(|&n| !state.consumed[n] && state.rules[n].matches(request));
            match found {
                Some(n) => {
                    if !state.rules[n].repeat {
                        state.consumed[n] = true;
                    }
                    state.rules[n].outcome.clone()
                }
                None if self.strict => {
                    return Err(GatewayError::ScriptExhausted {
                        prompt: request.prompt_name,
                        thread: request.thread,
                    })
                }
                None => ScriptOutcome::Echo,
            }
        };
        let text = match outcome {
            ScriptOutcome::Response { text } => text,
            ScriptOutcome::Echo => request.rendered_prompt.clone(),
            ScriptOutcome::Timeout => return Err(GatewayError::Timeout(request.timeout)),
            ScriptOutcome::Failure {
                message,
                retry_after,
            } => {
                return Err(GatewayError::BackendFailure {
                    message,
                    retry_after,
                })
            }
        };
        let counter = QuarterCharCounter;
        Ok(Completion {
            prompt_tokens: counter.count(&request.rendered_prompt),
            output_tokens: counter.count(&text),
            text,
        })
    }
}
