//! Chat-completion transport: providers, response cache, retry and rate limiting.

mod cache;
mod http;
mod mock;
mod ratelimit;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::{CacheEntry, CacheHandle, ResponseCache};
pub use http::{backoff_delay, HttpProvider};
pub use mock::{MockFixtures, MockProvider, MockRule};
pub use ratelimit::{Clock, ManualClock, RateLimiter, SystemClock};

use crate::error::LlmError;
use crate::prompt::ChatRequest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub base_url: String,
    pub api_key_env: String,
    pub model: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub rate_limit_per_min: u32,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Mock,
            base_url: "https://api.openai.com/v1".to_string(),
            api_key_env: "LLM_API_KEY".to_string(),
            model: "gpt-3.5-turbo".to_string(),
            timeout_ms: 60_000,
            max_retries: 3,
            backoff_base_ms: 500,
            rate_limit_per_min: 60,
        }
    }
}

impl ProviderConfig {
    pub fn http(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        ProviderConfig {
            kind: ProviderKind::Http,
            base_url: base_url.into(),
            model: model.into(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.kind == ProviderKind::Http && (self.base_url.trim().is_empty() || self.model.trim().is_empty()) {
            return Err(LlmError::InvalidConfig("http provider needs base_url and model".into()));
        }
        if self.timeout_ms == 0 || self.backoff_base_ms == 0 || self.rate_limit_per_min == 0 {
            return Err(LlmError::InvalidConfig(
                "timeout_ms, backoff_base_ms and rate_limit_per_min must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
    pub from_cache: bool,
    /// Attempts beyond the first that the transport needed.
    #[serde(default)]
    pub retries: u32,
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        ChatResponse {
            text: text.into(),
            prompt_tokens: 0,
            completion_tokens: 0,
            latency_ms: 0,
            from_cache: false,
            retries: 0,
        }
    }
}

/// Anything that can answer a chat request.
pub trait Provider: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

impl<P: Provider + ?Sized> Provider for Arc<P> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request)
    }
}

#[derive(Serialize)]
struct CanonicalRequest<'a> {
    model: &'a str,
    messages: Vec<(&'a str, &'a str)>,
    temperature: f64,
    max_tokens: u32,
    extra_params: &'a std::collections::BTreeMap<String, String>,
}

/// Canonical JSON form of a request; the input to [`cache_key`].
pub fn request_digest(request: &ChatRequest) -> String {
    let canonical = CanonicalRequest {
        model: &request.model,
        messages: request
            .messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    crate::prompt::Role::System => "system",
                    crate::prompt::Role::User => "user",
                    crate::prompt::Role::Assistant => "assistant",
                };
                (role, m.content.as_str())
            })
            .collect(),
        temperature: request.temperature,
        max_tokens: request.max_tokens,
        extra_params: &request.extra_params,
    };
    serde_json::to_string(&canonical).expect("canonical request serializes")
}

/// SHA-256 of the canonical request, as 64 lowercase hex characters.
pub fn cache_key(request: &ChatRequest) -> String {
    digest_key(&request_digest(request))
}

pub(crate) fn digest_key(digest: &str) -> String {
    hex::encode(Sha256::digest(digest.as_bytes()))
}

/// Builds the provider described by `config`. Mock providers start with no
/// fixtures; use [`MockProvider::from_fixtures`] to script them.
pub fn build_provider(config: &ProviderConfig) -> Result<Arc<dyn Provider>, LlmError> {
    config.validate()?;
    Ok(match config.kind {
        ProviderKind::Http => Arc::new(HttpProvider::new(config.clone())),
        ProviderKind::Mock => Arc::new(MockProvider::new(MockFixtures::default())),
    })
}

/// One uncached completion through the provider described by `config`.
pub fn complete(request: &ChatRequest, config: &ProviderConfig) -> Result<ChatResponse, LlmError> {
    build_provider(config)?.complete(request)
}

/// Serves `request` from `cache` when present; otherwise asks `provider` and
/// records the answer.
pub fn cached_complete(
    request: &ChatRequest,
    provider: &dyn Provider,
    cache: &ResponseCache,
) -> Result<ChatResponse, LlmError> {
    let digest = request_digest(request);
    let key = digest_key(&digest);
    if let Some(hit) = cache.get(&key) {
        return Ok(hit);
    }
    let response = provider.complete(request)?;
    cache.insert(CacheEntry::new(key, digest, &response))?;
    Ok(ChatResponse { from_cache: false, ..response })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{GenerationConfig, Message};

    fn req(content: &str) -> ChatRequest {
        GenerationConfig::default().request(vec![Message::system("sys"), Message::user(content)])
    }

    #[test]
    fn key_is_deterministic_hex() {
        let a = cache_key(&req("hello"));
        assert_eq!(a, cache_key(&req("hello")));
        assert_eq!(a.len(), 64);
        assert!(a.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
        assert_ne!(a, cache_key(&req("hellp")));
    }

    #[test]
    fn key_ignores_param_insertion_order() {
        let mut a = req("x");
        a.extra_params.insert("a".into(), "1".into());
        a.extra_params.insert("b".into(), "2".into());
        let mut b = req("x");
        b.extra_params.insert("b".into(), "2".into());
        b.extra_params.insert("a".into(), "1".into());
        assert_eq!(cache_key(&a), cache_key(&b));
        b.extra_params.insert("a".into(), "3".into());
        assert_ne!(cache_key(&a), cache_key(&b));
    }

    #[test]
    fn key_covers_every_field() {
        let base = req("x");
        let mut m = base.clone();
        m.model = "other".into();
        let mut t = base.clone();
        t.temperature = 0.5;
        let mut n = base.clone();
        n.max_tokens = 10;
        let mut r = base.clone();
        r.messages[0].role = crate::prompt::Role::Assistant;
        for other in [m, t, n, r] {
            assert_ne!(cache_key(&base), cache_key(&other));
        }
    }

    #[test]
    fn http_config_requires_url_and_model() {
        let mut c = ProviderConfig::http("", "m");
        assert!(c.validate().is_err());
        c.base_url = "http://x".into();
        assert!(c.validate().is_ok());
        c.model = String::new();
        assert!(c.validate().is_err());
    }
}
