use std::collections::BTreeMap;
use std::io;
use std::time::Duration;

use serde_json::{json, Value};

use super::{Completion, Embedder, GatewayError, GenerationRequest, Generator, PromptName};

fn map_error(err: ureq::Error, timeout: Duration) -> GatewayError {
    match err {
        ureq::Error::Status(code, response) => {
            let retry_after = response
                .header("retry-after")
                .and_then(|v| v.trim().parse::<u64>().ok());
            let body = response.into_string().unwrap_or_default();
            GatewayError::BackendFailure {
                message: format!("HTTP {code}: {}", body.chars().take(500).collect::<String>()),
                retry_after,
            }
        }
        ureq::Error::Transport(t) => {
            let timed_out = std::error::Error::source(&t)
                .and_then(|s| s.downcast_ref::<io::Error>())
                .is_some_and(|e| matches!(e.kind(), io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock));
            if timed_out {
                GatewayError::Timeout(timeout)
            } else {
                GatewayError::failure(t.to_string())
            }
        }
    }
}

fn post(url: &str, api_key: Option<&str>, timeout: Duration, body: Value) -> Result<Value, GatewayError> {
    let mut request = ureq::post(url).timeout(timeout);
    if let Some(key) = api_key {
        request = request.set("Authorization", &format!("Bearer {key}"));
    }
    let response = request.send_json(body).map_err(|e| map_error(e, timeout))?;
    response
        .into_json::<Value>()
        .map_err(|e| GatewayError::failure(format!("unreadable response body: {e}")))
}

/// Chat-completions client: `POST {base_url}/chat/completions`.
#[derive(Debug, Clone)]
pub struct HttpGenerator {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub model_overrides: BTreeMap<PromptName, String>,
}

impl HttpGenerator {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key,
            model_overrides: BTreeMap::new(),
        }
    }

    pub fn model_for(&self, prompt: PromptName) -> &str {
        self.model_overrides.get(&prompt).unwrap_or(&self.model)
    }
}

impl Generator for HttpGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<Completion, GatewayError> {
        let mut body = json!({
            "model": self.model_for(request.prompt_name),
            "messages": [{"role": "user", "content": request.rendered_prompt}],
        });
        for (k, v) in &request.config {
            body[k] = v.clone();
        }
        let url = format!("{}/chat/completions", self.base_url);
        let value = post(&url, self.api_key.as_deref(), request.timeout, body)?;
        let text = value["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| GatewayError::failure("response has no choices[0].message.content"))?
            .to_string();
        let usage = |field: &str| value["usage"][field].as_u64().unwrap_or(0) as usize;
        Ok(Completion {
            prompt_tokens: usage("prompt_tokens"),
            output_tokens: usage("completion_tokens"),
            text,
        })
    }
}

/// Embeddings client: `POST {base_url}/embeddings`.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub dimension: usize,
    pub timeout: Duration,
}

impl Embedder for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        let url = format!("{}/embeddings", self.base_url.trim_end_matches('/'));
        let value = post(
            &url,
            self.api_key.as_deref(),
            self.timeout,
            json!({"model": self.model, "input": text}),
        )?;
        value["data"][0]["embedding"]
            .as_array()
            .and_then(|xs| xs.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
            .ok_or_else(|| GatewayError::failure("response has no data[0].embedding"))
    }
}
