//! OpenAI-compatible chat-completion backend over HTTP.
//!
//! Images travel inline as base64 `data:` URLs. Transport failures, 429 and
//! 5xx responses are retried with exponential backoff; anything else is
//! returned at once. Model output is never retried here.

use std::thread;
use std::time::Duration;

use base64::Engine as _;
use evolkit_core::{
    BackendKind, ChatModel, CompletionRequest, CompletionResult, GatewayError, Part,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiveConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    /// Name of the environment variable holding the bearer token. Empty
    /// means no Authorization header.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 300,
            max_attempts: 3,
            backoff_ms: 1000,
        }
    }
}

pub struct LiveModel {
    config: LiveConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

fn mime_of(bytes: &[u8]) -> &'static str {
    if bytes.starts_with(b"\x89PNG") {
        "image/png"
    } else if bytes.starts_with(&[0xFF, 0xD8]) {
        "image/jpeg"
    } else if bytes.starts_with(b"GIF8") {
        "image/gif"
    } else if bytes.len() > 12 && &bytes[..4] == b"RIFF" && &bytes[8..12] == b"WEBP" {
        "image/webp"
    } else {
        "image/png"
    }
}

/// The JSON body sent for `request`.
pub fn wire_body(request: &CompletionRequest) -> Value {
    let b64 = base64::engine::general_purpose::STANDARD;
    let messages: Vec<Value> = request
        .messages
        .iter()
        .map(|m| {
            let content: Vec<Value> = m
                .parts
                .iter()
                .map(|p| match p {
                    Part::Text(t) => json!({"type": "text", "text": t}),
                    Part::Image(img) => json!({
                        "type": "image_url",
                        "image_url": {
                            "url": format!("data:{};base64,{}", mime_of(img.bytes()), b64.encode(img.bytes()))
                        }
                    }),
                })
                .collect();
            json!({"role": m.role.as_str(), "content": content})
        })
        .collect();
    json!({
        "model": request.model_tag,
        "temperature": request.temperature,
        "max_tokens": request.max_output,
        "messages": messages,
    })
}

enum Attempt {
    Done(Result<String, GatewayError>),
    Retry(String),
}

impl LiveModel {
    /// Reads the credential named by `config.api_key_env` from the
    /// environment.
    pub fn new(config: LiveConfig) -> Self {
        let api_key = (!config.api_key_env.is_empty())
            .then(|| std::env::var(&config.api_key_env).ok())
            .flatten();
        if api_key.is_none() && !config.api_key_env.is_empty() {
            log::warn!(
                "environment variable {} is not set; sending no credential",
                config.api_key_env
            );
        }
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .new_agent();
        Self {
            config,
            api_key,
            agent,
        }
    }

    fn attempt(&self, body: &str, max_output: u32) -> Attempt {
        let mut req = self
            .agent
            .post(&self.config.endpoint)
            .content_type("application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        if status == 429 || status >= 500 {
            return Attempt::Retry(format!("HTTP {status}: {}", snippet(&text)));
        }
        if !(200..300).contains(&status) {
            return Attempt::Done(Err(GatewayError::Transport {
                attempts: 0,
                message: format!("HTTP {status}: {}", snippet(&text)),
            }));
        }
        Attempt::Done(parse_response(&text, max_output))
    }
}

fn snippet(s: &str) -> &str {
    let end = s.char_indices().nth(300).map_or(s.len(), |(i, _)| i);
    &s[..end]
}

fn parse_response(text: &str, max_output: u32) -> Result<String, GatewayError> {
    let bad = |m: String| GatewayError::Transport {
        attempts: 0,
        message: m,
    };
    let v: Value =
        serde_json::from_str(text).map_err(|e| bad(format!("response is not JSON: {e}")))?;
    let choice = &v["choices"][0];
    if choice["finish_reason"] == "length" {
        return Err(GatewayError::BudgetExceeded { max_output });
    }
    choice["message"]["content"]
        .as_str()
        .map(str::to_owned)
        .ok_or_else(|| {
            bad(format!(
                "response has no message content: {}",
                snippet(text)
            ))
        })
}

impl ChatModel for LiveModel {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        let body = wire_body(request).to_string();
        let attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        for n in 1..=attempts {
            match self.attempt(&body, request.max_output) {
                Attempt::Done(Ok(text)) => {
                    return Ok(CompletionResult {
                        text,
                        request_digest: request.digest(),
                        backend: BackendKind::Live,
                    })
                }
                Attempt::Done(Err(GatewayError::Transport { message, .. })) => {
                    return Err(GatewayError::Transport {
                        attempts: n,
                        message,
                    })
                }
                Attempt::Done(Err(e)) => return Err(e),
                Attempt::Retry(msg) => {
                    log::warn!(
                        "attempt {n}/{attempts} to {} failed: {msg}",
                        self.config.endpoint
                    );
                    last = msg;
                    if n < attempts {
                        thread::sleep(Duration::from_millis(self.config.backoff_ms << (n - 1)));
                    }
                }
            }
        }
        Err(GatewayError::Transport {
            attempts,
            message: last,
        })
    }
}
