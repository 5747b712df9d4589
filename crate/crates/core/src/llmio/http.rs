use std::collections::HashMap;
use std::sync::{Arc, LazyLock, Mutex};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{ChatResponse, Provider, ProviderConfig, RateLimiter};
use crate::error::LlmError;
use crate::prompt::{ChatRequest, Role};

const MAX_BACKOFF: Duration = Duration::from_secs(60);

/// Endpoint, model and per-minute limit.
type LimiterKey = (String, String, u32);

/// Limiters shared by every provider pointed at the same endpoint and model.
static LIMITERS: LazyLock<Mutex<HashMap<LimiterKey, Arc<RateLimiter>>>> = LazyLock::new(Default::default);

fn shared_limiter(config: &ProviderConfig) -> Arc<RateLimiter> {
    let key = (config.base_url.clone(), config.model.clone(), config.rate_limit_per_min);
    LIMITERS
        .lock()
        .unwrap()
        .entry(key)
        .or_insert_with(|| Arc::new(RateLimiter::per_minute(config.rate_limit_per_min)))
        .clone()
}

/// `base * 2^attempt`, capped at 60 s.
pub fn backoff_delay(base_ms: u64, attempt: u32) -> Duration {
    let factor = 1u64.checked_shl(attempt).unwrap_or(u64::MAX);
    Duration::from_millis(base_ms.saturating_mul(factor)).min(MAX_BACKOFF)
}

/// OpenAI-compatible chat-completions client.
pub struct HttpProvider {
    config: ProviderConfig,
    agent: ureq::Agent,
    limiter: Arc<RateLimiter>,
}

impl HttpProvider {
    pub fn new(config: ProviderConfig) -> Self {
        let limiter = shared_limiter(&config);
        Self::with_limiter(config, limiter)
    }

    pub fn with_limiter(config: ProviderConfig, limiter: Arc<RateLimiter>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpProvider { config, agent, limiter }
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn send_once(&self, url: &str, api_key: &str, body: &str) -> Result<(String, u16), LlmError> {
        let mut resp = self
            .agent
            .post(url)
            .header("Authorization", &format!("Bearer {api_key}"))
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(map_transport)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(map_transport)?;
        Ok((text, status))
    }
}

fn map_transport(e: ureq::Error) -> LlmError {
    match e {
        ureq::Error::Timeout(_) => LlmError::Timeout,
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => LlmError::Timeout,
        other => LlmError::Transport(other.to_string()),
    }
}

pub(crate) fn request_body(request: &ChatRequest) -> Value {
    let messages: Vec<Value> = request
        .messages
        .iter()
        .map(|m| {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            json!({ "role": role, "content": m.content })
        })
        .collect();
    let mut body = json!({
        "model": request.model,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    });
    let obj = body.as_object_mut().expect("object literal");
    for (k, v) in &request.extra_params {
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.clone()));
        obj.insert(k.clone(), value);
    }
    body
}

pub(crate) fn parse_completion(body: &str) -> Result<(String, u64, u64), LlmError> {
    let v: Value = serde_json::from_str(body).map_err(|e| LlmError::BadResponse(e.to_string()))?;
    let message =
        v.pointer("/choices/0/message").ok_or_else(|| LlmError::BadResponse("no choices[0].message".into()))?;
    let text = match message.get("content") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None => String::new(),
        Some(other) => return Err(LlmError::BadResponse(format!("content is not a string: {other}"))),
    };
    let usage = |field: &str| v.pointer(&format!("/usage/{field}")).and_then(Value::as_u64).unwrap_or(0);
    Ok((text, usage("prompt_tokens"), usage("completion_tokens")))
}

impl Provider for HttpProvider {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let api_key = std::env::var(&self.config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| LlmError::AuthMissing(self.config.api_key_env.clone()))?;
        let url = self.endpoint();
        let body = request_body(request).to_string();
        let mut retries = 0u32;
        loop {
            self.limiter.acquire();
            let started = Instant::now();
            let outcome = self.send_once(&url, &api_key, &body).and_then(|(text, status)| {
                if (200..300).contains(&status) {
                    parse_completion(&text)
                } else {
                    Err(LlmError::ProviderError { status, body: text })
                }
            });
            match outcome {
                Ok((text, prompt_tokens, completion_tokens)) => {
                    return Ok(ChatResponse {
                        text,
                        prompt_tokens,
                        completion_tokens,
                        latency_ms: started.elapsed().as_millis() as u64,
                        from_cache: false,
                        retries,
                    })
                }
                Err(e) if e.is_retryable() && retries < self.config.max_retries => {
                    let delay = backoff_delay(self.config.backoff_base_ms, retries);
                    log::warn!("attempt {} failed ({e}); retrying in {delay:?}", retries + 1);
                    std::thread::sleep(delay);
                    retries += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}
