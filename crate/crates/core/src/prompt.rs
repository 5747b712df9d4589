//! Rendering of the three chain-step instructions into chat requests.
//!
//! A template's instruction becomes the system message. The user message is
//! a sequence of `Input`/`Output` blocks, one per exemplar, followed by the
//! query block and the step's output cue.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{LabelScheme, StanceSample};
use crate::error::PromptError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Judge,
    QueryGen,
    IfThenInfer,
}

impl Step {
    pub fn file_stem(self) -> &'static str {
        match self {
            Step::Judge => "judge",
            Step::QueryGen => "query_gen",
            Step::IfThenInfer => "if_then_infer",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message { role: Role::Assistant, content: content.into() }
    }
}

/// Provider-agnostic chat-completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub extra_params: BTreeMap<String, String>,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), PromptError> {
        match self.messages.last() {
            None => return Err(PromptError::InvalidTemplate("request has no messages".into())),
            Some(m) if m.role != Role::User => {
                return Err(PromptError::InvalidTemplate("last message must be from the user".into()))
            }
            _ => {}
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(PromptError::InvalidTemplate("temperature must be >= 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(PromptError::InvalidTemplate("max_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn last_user_message(&self) -> Option<&str> {
        self.messages.iter().rev().find(|m| m.role == Role::User).map(|m| m.content.as_str())
    }
}

/// Decoding parameters shared by every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub extra_params: BTreeMap<String, String>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            model: "gpt-3.5-turbo".to_string(),
            temperature: 0.0,
            max_tokens: 256,
            extra_params: BTreeMap::new(),
        }
    }
}

impl GenerationConfig {
    pub fn for_model(&self, model: &str) -> GenerationConfig {
        GenerationConfig { model: model.to_string(), ..self.clone() }
    }

    pub fn request(&self, messages: Vec<Message>) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            extra_params: self.extra_params.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub input_text: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge: Option<String>,
    pub expected_output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub step: Step,
    pub instruction: String,
    pub input_pattern: String,
    /// Framing placed before the knowledge text when `{knowledge}` is filled.
    #[serde(default = "default_knowledge_prefix")]
    pub knowledge_prefix: String,
    #[serde(default = "default_output_cue")]
    pub output_cue: String,
    #[serde(default, rename = "exemplar")]
    pub exemplars: Vec<Exemplar>,
}

fn default_knowledge_prefix() -> String {
    "Given knowledge:".to_string()
}

fn default_output_cue() -> String {
    "Output:".to_string()
}

const DEFAULT_JUDGE: &str = include_str!("../../../templates/judge.toml");
const DEFAULT_QUERY_GEN: &str = include_str!("../../../templates/query_gen.toml");
const DEFAULT_IF_THEN: &str = include_str!("../../../templates/if_then_infer.toml");

impl PromptTemplate {
    pub fn from_toml(source: &str) -> Result<Self, PromptError> {
        let template: PromptTemplate =
            toml::from_str(source).map_err(|e| PromptError::InvalidTemplate(e.to_string()))?;
        template.validate()?;
        Ok(template)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("template serializes")
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let source = fs::read_to_string(path).map_err(|source| PromptError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&source).map_err(|e| PromptError::Format { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn default_for(step: Step) -> Self {
        let src = match step {
            Step::Judge => DEFAULT_JUDGE,
            Step::QueryGen => DEFAULT_QUERY_GEN,
            Step::IfThenInfer => DEFAULT_IF_THEN,
        };
        Self::from_toml(src).expect("bundled template is valid")
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let count = |name: &str| self.input_pattern.matches(name).count();
        for required in ["{text}", "{target}"] {
            if count(required) != 1 {
                return Err(PromptError::InvalidTemplate(format!(
                    "input_pattern must contain {required} exactly once"
                )));
            }
        }
        let knowledge = count("{knowledge}");
        if knowledge > 1 || (knowledge == 1 && self.step != Step::IfThenInfer) {
            return Err(PromptError::InvalidTemplate(
                "{knowledge} may appear at most once and only in the if-then step".into(),
            ));
        }
        let labels = count("{labels}");
        if labels > 1 || (labels == 1 && self.step == Step::Judge) {
            return Err(PromptError::InvalidTemplate(
                "{labels} may appear at most once and not in the judge step".into(),
            ));
        }
        if let Some(i) = self.exemplars.iter().position(|e| e.expected_output.trim().is_empty()) {
            return Err(PromptError::InvalidTemplate(format!("exemplar {i} has an empty expected_output")));
        }
        Ok(())
    }

    fn expect_step(&self, expected: Step) -> Result<(), PromptError> {
        if self.step != expected {
            return Err(PromptError::TemplateMismatch { expected, found: self.step });
        }
        Ok(())
    }

    fn fill(&self, text: &str, target: &str, knowledge: Option<&str>, labels: &str) -> String {
        let pattern = self.input_pattern.as_str();
        let mut out = String::with_capacity(pattern.len() + text.len() + target.len());
        let mut rest = pattern;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let tail = &rest[open..];
            let (value, len): (Option<String>, usize) = if tail.starts_with("{text}") {
                (Some(text.to_string()), 6)
            } else if tail.starts_with("{target}") {
                (Some(target.to_string()), 8)
            } else if tail.starts_with("{labels}") {
                (Some(labels.to_string()), 8)
            } else if tail.starts_with("{knowledge}") {
                (knowledge.map(|k| format!("{} {}", self.knowledge_prefix, k.trim())), 11)
            } else {
                out.push('{');
                rest = &tail[1..];
                continue;
            };
            rest = &tail[len..];
            match value {
                Some(v) => out.push_str(&v),
                // Dropped placeholder: swallow one side of the surrounding spaces.
                None => {
                    if out.ends_with(' ') || out.is_empty() {
                        rest = rest.strip_prefix(' ').unwrap_or(rest);
                    }
                }
            }
        }
        out.push_str(rest);
        out
    }

    fn render(
        &self,
        sample: &StanceSample,
        knowledge: Option<&str>,
        labels: &str,
        gen: &GenerationConfig,
    ) -> ChatRequest {
        let mut blocks: Vec<String> = self
            .exemplars
            .iter()
            .map(|e| {
                format!(
                    "{}\nOutput: {}",
                    self.fill(&e.input_text, &e.target, e.knowledge.as_deref(), labels),
                    e.expected_output
                )
            })
            .collect();
        blocks.push(format!("{}\n{}", self.fill(&sample.text, &sample.target, knowledge, labels), self.output_cue));
        gen.request(vec![Message::system(self.instruction.clone()), Message::user(blocks.join("\n\n"))])
    }
}

/// One template per chain step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub judge: PromptTemplate,
    pub query_gen: PromptTemplate,
    pub if_then: PromptTemplate,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            judge: PromptTemplate::default_for(Step::Judge),
            query_gen: PromptTemplate::default_for(Step::QueryGen),
            if_then: PromptTemplate::default_for(Step::IfThenInfer),
        }
    }
}

impl TemplateSet {
    /// Loads `judge.toml`, `query_gen.toml` and `if_then_infer.toml` from `dir`;
    /// a missing file falls back to the bundled default.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        if !dir.is_dir() {
            return Err(PromptError::Io {
                path: dir.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "templates directory not found"),
            });
        }
        let load = |step: Step| -> Result<PromptTemplate, PromptError> {
            let path = dir.join(format!("{}.toml", step.file_stem()));
            if !path.exists() {
                return Ok(PromptTemplate::default_for(step));
            }
            let t = PromptTemplate::load(&path)?;
            t.expect_step(step)?;
            Ok(t)
        };
        Ok(TemplateSet {
            judge: load(Step::Judge)?,
            query_gen: load(Step::QueryGen)?,
            if_then: load(Step::IfThenInfer)?,
        })
    }
}

pub fn render_step1(
    sample: &StanceSample,
    template: &PromptTemplate,
    gen: &GenerationConfig,
) -> Result<ChatRequest, PromptError> {
    template.expect_step(Step::Judge)?;
    Ok(template.render(sample, None, "", gen))
}

pub fn render_step2(
    sample: &StanceSample,
    template: &PromptTemplate,
    scheme: &LabelScheme,
    gen: &GenerationConfig,
) -> Result<ChatRequest, PromptError> {
    template.expect_step(Step::QueryGen)?;
    Ok(template.render(sample, None, &scheme.render_choices(), gen))
}

pub fn render_step3(
    sample: &StanceSample,
    knowledge: Option<&str>,
    template: &PromptTemplate,
    scheme: &LabelScheme,
    gen: &GenerationConfig,
) -> Result<ChatRequest, PromptError> {
    template.expect_step(Step::IfThenInfer)?;
    let knowledge = knowledge.filter(|k| !k.trim().is_empty());
    Ok(template.render(sample, knowledge, &scheme.render_choices(), gen))
}
