use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{cache_key, ChatResponse, Provider};
use crate::error::LlmError;
use crate::prompt::ChatRequest;

/// One scripted answer, selected by exact cache key or by a regular
/// expression over the last user message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regex: Option<String>,
    pub response: String,
}

impl MockRule {
    pub fn key(key: impl Into<String>, response: impl Into<String>) -> Self {
        MockRule { key: Some(key.into()), regex: None, response: response.into() }
    }

    pub fn regex(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        MockRule { key: None, regex: Some(pattern.into()), response: response.into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockFixtures {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
}

impl MockFixtures {
    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| LlmError::InvalidConfig(format!("fixture file {}: {e}", path.display())))
    }
}

/// Offline provider answering from a fixture table. Counts every call.
#[derive(Debug)]
pub struct MockProvider {
    exact: HashMap<String, String>,
    patterns: Vec<(Regex, String)>,
    default: Option<String>,
    calls: AtomicUsize,
}

impl MockProvider {
    pub fn new(fixtures: MockFixtures) -> Self {
        Self::from_fixtures(fixtures).expect("fixture regexes compile")
    }

    pub fn from_fixtures(fixtures: MockFixtures) -> Result<Self, LlmError> {
        let mut exact = HashMap::new();
        let mut patterns = Vec::new();
        for (i, rule) in fixtures.rules.into_iter().enumerate() {
            match (rule.key, rule.regex) {
                (Some(k), None) => {
                    exact.insert(k, rule.response);
                }
                (None, Some(p)) => {
                    let re = Regex::new(&p).map_err(|e| LlmError::InvalidConfig(format!("fixture rule {i}: {e}")))?;
                    patterns.push((re, rule.response));
                }
                _ => {
                    return Err(LlmError::InvalidConfig(format!(
                        "fixture rule {i} needs exactly one of `key` or `regex`"
                    )))
                }
            }
        }
        Ok(MockProvider { exact, patterns, default: fixtures.default, calls: AtomicUsize::new(0) })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    fn resolve(&self, request: &ChatRequest) -> Result<&str, LlmError> {
        let key = cache_key(request);
        if let Some(r) = self.exact.get(&key) {
            return Ok(r);
        }
        let last = request.last_user_message().unwrap_or_default();
        if let Some((_, r)) = self.patterns.iter().find(|(re, _)| re.is_match(last)) {
            return Ok(r);
        }
        self.default.as_deref().ok_or(LlmError::MockMiss(key))
    }
}

impl Provider for MockProvider {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.resolve(request).map(ChatResponse::text)
    }
}
