//! Three-step orchestration: evidence judgment, optional knowledge query,
//! and if-then stance inference, with per-sample traces.

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::domain::{LabelScheme, StanceLabel, StanceSample};
use crate::error::{ChainError, LlmError};
use crate::llmio::{
    build_provider, cached_complete, ChatResponse, MockProvider, Provider, ProviderConfig, ResponseCache,
};
use crate::outparse::{parse_ifthen, parse_judgment_with, parse_step2, IfThenRule, Step2Kind};
use crate::prompt::{render_step1, render_step2, render_step3, ChatRequest, GenerationConfig, Message, TemplateSet};

pub const KNOWLEDGE_INSTRUCTION: &str = "Answer the question concisely.";
pub const FORMAT_REMINDER: &str =
    "Answer strictly in the format: [IF (reason) then (the attitude is [favor/against/none])].";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FallbackPolicy {
    pub default_label: StanceLabel,
    pub retry_on_unparsed: bool,
}

impl Default for FallbackPolicy {
    fn default() -> Self {
        FallbackPolicy { default_label: StanceLabel::Neutral, retry_on_unparsed: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub judge_provider: ProviderConfig,
    pub knowledge_provider: ProviderConfig,
    pub infer_provider: ProviderConfig,
    pub templates: TemplateSet,
    pub scheme: LabelScheme,
    pub generation: GenerationConfig,
    pub fallback: FallbackPolicy,
    pub short_circuit_direct_label: bool,
    pub judge_yes_means_sufficient: bool,
    pub max_parse_retries: u32,
    pub parallelism: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            judge_provider: ProviderConfig::default(),
            knowledge_provider: ProviderConfig::default(),
            infer_provider: ProviderConfig::default(),
            templates: TemplateSet::default(),
            scheme: LabelScheme::sem16(),
            generation: GenerationConfig::default(),
            fallback: FallbackPolicy::default(),
            short_circuit_direct_label: false,
            judge_yes_means_sufficient: true,
            max_parse_retries: 1,
            parallelism: 4,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<(), ChainError> {
        if self.parallelism == 0 {
            return Err(ChainError::InvalidConfig("parallelism must be at least 1".into()));
        }
        if self.max_parse_retries > 3 {
            return Err(ChainError::InvalidConfig("max_parse_retries must be at most 3".into()));
        }
        self.scheme.validate().map_err(|e| ChainError::InvalidConfig(e.to_string()))?;
        for t in [&self.templates.judge, &self.templates.query_gen, &self.templates.if_then] {
            t.validate()?;
        }
        for (i, ex) in self.templates.if_then.exemplars.iter().enumerate() {
            match parse_ifthen(&ex.expected_output, &self.scheme) {
                Ok(rule) if !rule.is_recovered() => {}
                _ => {
                    return Err(ChainError::InvalidConfig(format!(
                        "if-then exemplar {i} does not parse as a rule: {:?}",
                        ex.expected_output
                    )))
                }
            }
        }
        for p in [&self.judge_provider, &self.knowledge_provider, &self.infer_provider] {
            p.validate().map_err(|e| ChainError::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    }
}

/// Provider instances used for each step.
#[derive(Clone)]
pub struct Providers {
    pub judge: Arc<dyn Provider>,
    pub knowledge: Arc<dyn Provider>,
    pub infer: Arc<dyn Provider>,
}

impl Providers {
    pub fn uniform(provider: Arc<dyn Provider>) -> Self {
        Providers { judge: provider.clone(), knowledge: provider.clone(), infer: provider }
    }

    pub fn mock(mock: Arc<MockProvider>) -> Self {
        Self::uniform(mock)
    }

    pub fn from_config(config: &ChainConfig) -> Result<Self, LlmError> {
        Ok(Providers {
            judge: build_provider(&config.judge_provider)?,
            knowledge: build_provider(&config.knowledge_provider)?,
            infer: build_provider(&config.infer_provider)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    RuleParsed,
    DirectLabel,
    RecoveredKeyword,
    FallbackDefault,
}

/// Requests issued per step, whether answered by the provider or the cache.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempts {
    pub judge: u32,
    pub query_gen: u32,
    pub knowledge: u32,
    pub infer: u32,
}

impl Attempts {
    pub fn total(&self) -> u32 {
        self.judge + self.query_gen + self.knowledge + self.infer
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    pub judge_ms: u64,
    pub query_gen_ms: u64,
    pub knowledge_ms: u64,
    pub infer_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub sample_id: String,
    pub step1_raw: String,
    pub needs_knowledge: bool,
    pub step2_raw: Option<String>,
    pub step2: Option<Step2Kind>,
    pub query: Option<String>,
    pub knowledge: Option<String>,
    /// Step-3 output of the final attempt.
    pub step3_raw: Option<String>,
    /// Step-3 outputs of earlier attempts that failed to parse.
    #[serde(default)]
    pub step3_rejected: Vec<String>,
    pub rule: Option<IfThenRule>,
    pub predicted: StanceLabel,
    pub resolution: Resolution,
    pub attempts: Attempts,
    pub timing: Timing,
    #[serde(default)]
    pub notes: Vec<String>,
    #[serde(default)]
    pub error: Option<String>,
}

impl ChainTrace {
    fn start(sample_id: &str, default_label: StanceLabel) -> Self {
        ChainTrace {
            sample_id: sample_id.to_string(),
            step1_raw: String::new(),
            needs_knowledge: false,
            step2_raw: None,
            step2: None,
            query: None,
            knowledge: None,
            step3_raw: None,
            step3_rejected: Vec::new(),
            rule: None,
            predicted: default_label,
            resolution: Resolution::FallbackDefault,
            attempts: Attempts::default(),
            timing: Timing::default(),
            notes: Vec::new(),
            error: None,
        }
    }

    /// Copy with timing zeroed, for comparisons across runs.
    pub fn without_timing(&self) -> ChainTrace {
        ChainTrace { timing: Timing::default(), ..self.clone() }
    }
}

pub fn resolve_label(trace: &ChainTrace) -> StanceLabel {
    trace.predicted
}

/// A configured chain bound to its providers and response cache.
pub struct Pipeline {
    config: ChainConfig,
    providers: Providers,
    cache: Arc<ResponseCache>,
}

impl Pipeline {
    pub fn new(config: ChainConfig, providers: Providers, cache: Arc<ResponseCache>) -> Result<Self, ChainError> {
        config.validate()?;
        Ok(Pipeline { config, providers, cache })
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    fn call(
        &self,
        provider: &dyn Provider,
        request: &ChatRequest,
        counter: &mut u32,
        elapsed: &mut u64,
    ) -> Result<ChatResponse, LlmError> {
        let response = cached_complete(request, provider, &self.cache)?;
        *counter += 1;
        *elapsed += response.latency_ms;
        Ok(response)
    }

    pub fn run_sample(&self, sample: &StanceSample) -> Result<ChainTrace, ChainError> {
        let mut trace = ChainTrace::start(&sample.id, self.config.fallback.default_label);
        match self.drive(sample, &mut trace) {
            Ok(()) => Ok(trace),
            Err(ChainError::PipelineAbort { source, .. }) => {
                trace.error = Some(source.to_string());
                trace.resolution = Resolution::FallbackDefault;
                trace.predicted = self.config.fallback.default_label;
                trace.rule = None;
                Err(ChainError::PipelineAbort { trace: Box::new(trace), source })
            }
            Err(e) => Err(e),
        }
    }

    fn drive(&self, sample: &StanceSample, trace: &mut ChainTrace) -> Result<(), ChainError> {
        let cfg = &self.config;
        let scheme = &cfg.scheme;
        let abort = |source: LlmError| ChainError::PipelineAbort {
            trace: Box::new(ChainTrace::start(&sample.id, cfg.fallback.default_label)),
            source,
        };

        // Step 1: is the text alone enough evidence?
        let gen = cfg.generation.for_model(&cfg.judge_provider.model);
        let req = render_step1(sample, &cfg.templates.judge, &gen)?;
        let resp = self
            .call(&*self.providers.judge, &req, &mut trace.attempts.judge, &mut trace.timing.judge_ms)
            .map_err(abort)?;
        trace.step1_raw = resp.text;
        trace.needs_knowledge = match parse_judgment_with(&trace.step1_raw, cfg.judge_yes_means_sufficient) {
            Ok(j) => j.needs_knowledge,
            Err(_) => {
                trace.notes.push("judgment_unparsed".into());
                true
            }
        };

        // Step 2: ask for a knowledge query (or a direct answer).
        let mut direct: Option<StanceLabel> = None;
        if trace.needs_knowledge {
            let gen = cfg.generation.for_model(&cfg.infer_provider.model);
            let req = render_step2(sample, &cfg.templates.query_gen, scheme, &gen)?;
            let resp = self
                .call(&*self.providers.infer, &req, &mut trace.attempts.query_gen, &mut trace.timing.query_gen_ms)
                .map_err(abort)?;
            let outcome = parse_step2(&resp.text, scheme);
            trace.step2_raw = Some(resp.text);
            match &outcome.kind {
                Step2Kind::ApiCall { query } => {
                    trace.query = Some(query.clone());
                    let gen = cfg.generation.for_model(&cfg.knowledge_provider.model);
                    let req = gen.request(vec![Message::system(KNOWLEDGE_INSTRUCTION), Message::user(query.clone())]);
                    let resp = self
                        .call(
                            &*self.providers.knowledge,
                            &req,
                            &mut trace.attempts.knowledge,
                            &mut trace.timing.knowledge_ms,
                        )
                        .map_err(abort)?;
                    let k = resp.text.trim();
                    if k.is_empty() {
                        trace.notes.push("knowledge_empty".into());
                    } else {
                        trace.knowledge = Some(k.to_string());
                    }
                }
                Step2Kind::DirectLabel { label } => direct = Some(*label),
                Step2Kind::Unparsed => trace.notes.push("step2_unparsed".into()),
            }
            trace.step2 = Some(outcome.kind);
        }

        if let (Some(label), true) = (direct, cfg.short_circuit_direct_label) {
            trace.predicted = label;
            trace.resolution = Resolution::DirectLabel;
            return Ok(());
        }

        // Step 3: if-then inference, with format-repair retries.
        let gen = cfg.generation.for_model(&cfg.infer_provider.model);
        let base = render_step3(sample, trace.knowledge.as_deref(), &cfg.templates.if_then, scheme, &gen)?;
        let original_user = base.last_user_message().unwrap_or_default().to_string();
        let mut req = base;
        let max_attempts = if cfg.fallback.retry_on_unparsed { 1 + cfg.max_parse_retries } else { 1 };
        for attempt in 0..max_attempts {
            if attempt > 0 {
                let previous = trace.step3_raw.take().unwrap_or_default();
                req.messages.push(Message::assistant(previous.clone()));
                req.messages.push(Message::user(format!("{original_user}\n\n{FORMAT_REMINDER}")));
                trace.step3_rejected.push(previous);
            }
            let resp = self
                .call(&*self.providers.infer, &req, &mut trace.attempts.infer, &mut trace.timing.infer_ms)
                .map_err(abort)?;
            let parsed = parse_ifthen(&resp.text, scheme);
            trace.step3_raw = Some(resp.text);
            if let Ok(rule) = parsed {
                trace.predicted = rule.label;
                trace.resolution =
                    if rule.is_recovered() { Resolution::RecoveredKeyword } else { Resolution::RuleParsed };
                if direct.is_some_and(|d| d != rule.label) {
                    trace.notes.push("step2_direct_label_conflict".into());
                }
                trace.rule = Some(rule);
                return Ok(());
            }
        }

        match direct {
            Some(label) => {
                trace.predicted = label;
                trace.resolution = Resolution::DirectLabel;
                trace.notes.push("step3_unparsed_used_direct_label".into());
            }
            None => {
                trace.predicted = cfg.fallback.default_label;
                trace.resolution = Resolution::FallbackDefault;
            }
        }
        Ok(())
    }

    /// Runs every sample with at most `parallelism` in flight; output order
    /// matches input order.
    pub fn run_batch(&self, samples: &[StanceSample]) -> Result<Vec<ChainTrace>, ChainError> {
        let mut seen = HashSet::new();
        if let Some(dup) = samples.iter().find(|s| !seen.insert(s.id.as_str())) {
            return Err(ChainError::DuplicateId(dup.id.clone()));
        }
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let slots: Mutex<Vec<Option<ChainTrace>>> = Mutex::new(vec![None; samples.len()]);
        let next = AtomicUsize::new(0);
        let failed = AtomicUsize::new(0);
        let fatal: Mutex<Option<ChainError>> = Mutex::new(None);
        let workers = self.config.parallelism.min(samples.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= samples.len() || fatal.lock().unwrap().is_some() {
                        break;
                    }
                    let trace = match self.run_sample(&samples[i]) {
                        Ok(t) => t,
                        Err(ChainError::PipelineAbort { trace, source }) => {
                            log::warn!("sample {} fell back: {source}", samples[i].id);
                            failed.fetch_add(1, Ordering::SeqCst);
                            *trace
                        }
                        Err(e) => {
                            *fatal.lock().unwrap() = Some(e);
                            break;
                        }
                    };
                    slots.lock().unwrap()[i] = Some(trace);
                });
            }
        });
        if let Some(e) = fatal.into_inner().unwrap() {
            return Err(e);
        }
        let failed = failed.into_inner();
        if failed == samples.len() {
            return Err(ChainError::BatchAbort { failed, total: samples.len() });
        }
        Ok(slots.into_inner().unwrap().into_iter().map(|t| t.expect("every slot filled")).collect())
    }
}
