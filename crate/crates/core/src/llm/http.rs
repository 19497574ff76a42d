use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde_json::{json, Value};

use super::{backoff, ChatBackend, ChatPart, ChatRequest, ChatResponse, LlmError, API_KEY_ENV};

pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

#[derive(Debug, Clone, PartialEq)]
pub struct HttpSettings {
    /// Everything before `/chat/completions`.
    pub base_url: String,
    pub max_retries: u32,
    pub backoff_base: Duration,
    pub timeout: Duration,
}

impl Default for HttpSettings {
    fn default() -> Self {
        HttpSettings {
            base_url: DEFAULT_BASE_URL.to_string(),
            max_retries: 3,
            backoff_base: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
        }
    }
}

/// OpenAI-compatible `/chat/completions` client.
pub struct HttpBackend {
    settings: HttpSettings,
    api_key: String,
    client: reqwest::blocking::Client,
}

enum Attempt {
    Retry(LlmError),
    Fatal(LlmError),
}

impl HttpBackend {
    pub fn new(settings: HttpSettings, api_key: String) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(settings.timeout)
            .build()
            .map_err(|e| LlmError::BackendUnavailable {
                message: e.to_string(),
                retries: 0,
            })?;
        Ok(HttpBackend {
            settings,
            api_key,
            client,
        })
    }

    /// Reads the key from `SPATIAL_PROMPT_API_KEY`.
    pub fn from_env(settings: HttpSettings) -> Result<Self, LlmError> {
        let key = std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or(LlmError::MissingApiKey { var: API_KEY_ENV })?;
        Self::new(settings, key)
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.settings.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, body: &Value) -> Result<(String, Option<String>), Attempt> {
        let resp = self
            .client
            .post(self.endpoint())
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
            .map_err(|e| {
                Attempt::Retry(LlmError::BackendUnavailable {
                    message: e.to_string(),
                    retries: 0,
                })
            })?;
        let status = resp.status();
        let text = resp.text().unwrap_or_default();
        if !status.is_success() {
            let err = LlmError::ProviderError {
                status: status.as_u16(),
                body_excerpt: text.chars().take(300).collect(),
            };
            let code = status.as_u16();
            return Err(if code == 408 || code == 429 || status.is_server_error() {
                Attempt::Retry(err)
            } else {
                // auth and other client errors will not improve on retry
                Attempt::Fatal(err)
            });
        }
        parse_completion(&text).map_err(|message| {
            Attempt::Fatal(LlmError::ProviderError {
                status: status.as_u16(),
                body_excerpt: message,
            })
        })
    }
}

pub(crate) fn request_body(request: &ChatRequest) -> Value {
    let content: Vec<Value> = request
        .parts
        .iter()
        .map(|p| match p {
            ChatPart::Text { text } => json!({"type": "text", "text": text}),
            ChatPart::Image { media_type, data } => json!({
                "type": "image_url",
                "image_url": {"url": format!("data:{media_type};base64,{}", BASE64.encode(data))}
            }),
        })
        .collect();
    json!({
        "model": request.model_tag,
        "temperature": request.temperature,
        "max_tokens": request.max_output_tokens,
        "messages": [{"role": "user", "content": content}],
    })
}

fn parse_completion(text: &str) -> Result<(String, Option<String>), String> {
    let v: Value = serde_json::from_str(text).map_err(|e| format!("unparseable response: {e}"))?;
    let message = &v["choices"][0]["message"]["content"];
    let answer = match message {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join(""),
        _ => return Err("response has no choices[0].message.content".into()),
    };
    Ok((answer, v["id"].as_str().map(str::to_string)))
}

impl ChatBackend for HttpBackend {
    fn tag(&self) -> &str {
        "http"
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let body = request_body(request);
        let start = Instant::now();
        let mut last = None;
        for attempt in 0..=self.settings.max_retries {
            if attempt > 0 {
                std::thread::sleep(backoff(self.settings.backoff_base, attempt - 1));
            }
            match self.attempt(&body) {
                Ok((answer_text, raw_ref)) => {
                    return Ok(ChatResponse {
                        answer_text,
                        latency_ms: start.elapsed().as_millis() as u64,
                        backend_tag: "http".into(),
                        raw_ref,
                    })
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) => {
                    log::warn!("chat request attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                }
            }
        }
        Err(match last.expect("at least one attempt") {
            LlmError::BackendUnavailable { message, .. } => LlmError::BackendUnavailable {
                message,
                retries: self.settings.max_retries,
            },
            other => other,
        })
    }
}
