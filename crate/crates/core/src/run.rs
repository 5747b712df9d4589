//! Reproducible runs: corpus selection, batch inference, and the files
//! written to each run directory.
//!
//! A run directory holds `config.json` (effective settings), `manifest.json`
//! (corpus checksum and selection), `traces.jsonl`, `metrics.json` and
//! `report.md`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chain::{ChainConfig, ChainTrace, Pipeline, Providers};
use crate::corpus::{dev_split, file_checksum, load_corpus, ColumnMap, Corpus, Protocol, Selection};
use crate::domain::{Dataset, LabelScheme, StanceLabel};
use crate::error::{ChainError, CorpusError, LlmError, MetricsError, PromptError};
use crate::llmio::{MockFixtures, MockProvider, ProviderKind, ResponseCache};
use crate::metrics::{evaluate, report_markdown, MetricsReport};
use crate::prompt::TemplateSet;

pub const DEV_FRACTION: f64 = 0.15;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("no gold label for sample {0:?}")]
    MissingGold(String),
    #[error("trace record at line {0} is unreadable")]
    TraceCorrupt(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RunError {
    /// 1 usage/config, 2 data, 3 provider.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Usage(_) | RunError::Config(_) | RunError::Prompt(_) => 1,
            RunError::Chain(ChainError::InvalidConfig(_)) => 1,
            RunError::Chain(ChainError::BatchAbort { .. } | ChainError::PipelineAbort { .. }) | RunError::Llm(_) => 3,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

/// Settings as read from a config file or flags; unset fields fall through
/// to the next layer.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub corpus: Option<PathBuf>,
    pub dataset: Option<Dataset>,
    pub columns: Option<ColumnMap>,
    pub protocol: Option<String>,
    pub target: Option<String>,
    pub source: Option<String>,
    pub templates: Option<PathBuf>,
    pub provider: Option<ProviderKind>,
    pub model: Option<String>,
    pub knowledge_model: Option<String>,
    pub base_url: Option<String>,
    pub api_key_env: Option<String>,
    pub rate_limit_per_min: Option<u32>,
    pub fixtures: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub parallelism: Option<usize>,
    pub max_parse_retries: Option<u32>,
    pub short_circuit_direct_label: Option<bool>,
    pub limit: Option<usize>,
    pub out: Option<PathBuf>,
    pub run_id: Option<String>,
    pub seed: Option<u64>,
    pub chain: Option<ChainConfig>,
}

macro_rules! overlay {
    ($base:ident, $top:ident; $($f:ident),*) => {
        $( if $top.$f.is_some() { $base.$f = $top.$f; } )*
    };
}

impl RunSettings {
    pub fn from_file(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))
    }

    /// Fields set in `top` win.
    pub fn overlay(mut self, top: RunSettings) -> RunSettings {
        overlay!(self, top; corpus, dataset, columns, protocol, target, source, templates, provider, model,
            knowledge_model, base_url, api_key_env, rate_limit_per_min, fixtures, cache, parallelism,
            max_parse_retries, short_circuit_direct_label, limit, out, run_id, seed, chain);
        self
    }

    pub fn resolve(self) -> Result<RunConfig, RunError> {
        let corpus = self.corpus.ok_or_else(|| RunError::Usage("--corpus is required".into()))?;
        let dataset = self.dataset.unwrap_or(Dataset::Sem16);
        let protocol = match self.protocol.as_deref().unwrap_or("zero-shot") {
            "zero-shot" => Protocol::ZeroShot {
                target: self.target.ok_or_else(|| RunError::Usage("zero-shot needs --target".into()))?,
            },
            "cross-target" => Protocol::CrossTarget {
                source: self.source.ok_or_else(|| RunError::Usage("cross-target needs --source".into()))?,
                destination: self.target.ok_or_else(|| RunError::Usage("cross-target needs --target".into()))?,
            },
            "vast-all" => Protocol::VastAll,
            other => return Err(RunError::Usage(format!("unknown protocol {other:?}"))),
        };

        let mut chain = self.chain.unwrap_or_default();
        if dataset == Dataset::Vast && chain.scheme == LabelScheme::sem16() {
            chain.scheme = LabelScheme::vast();
        }
        if let Some(dir) = &self.templates {
            chain.templates = TemplateSet::load_dir(dir)?;
        }
        for p in [&mut chain.judge_provider, &mut chain.knowledge_provider, &mut chain.infer_provider] {
            if let Some(kind) = self.provider {
                p.kind = kind;
            }
            if let Some(m) = &self.model {
                p.model = m.clone();
            }
            if let Some(u) = &self.base_url {
                p.base_url = u.clone();
            }
            if let Some(k) = &self.api_key_env {
                p.api_key_env = k.clone();
            }
            if let Some(r) = self.rate_limit_per_min {
                p.rate_limit_per_min = r;
            }
        }
        if let Some(m) = self.knowledge_model {
            chain.knowledge_provider.model = m;
        }
        if let Some(p) = self.parallelism {
            chain.parallelism = p;
        }
        if let Some(r) = self.max_parse_retries {
            chain.max_parse_retries = r;
        }
        if let Some(s) = self.short_circuit_direct_label {
            chain.short_circuit_direct_label = s;
        }
        chain.generation.model = chain.infer_provider.model.clone();
        chain.validate()?;

        if chain.infer_provider.kind == ProviderKind::Mock && self.fixtures.is_none() {
            return Err(RunError::Usage("--provider mock needs --fixtures <file>".into()));
        }
        if self.limit == Some(0) {
            return Err(RunError::Usage("--limit must be positive".into()));
        }
        let out = self.out.unwrap_or_else(|| PathBuf::from("runs"));
        let cache = self
            .cache
            .unwrap_or_else(|| out.join("cache").join(format!("{}.jsonl", model_slug(&chain.infer_provider.model))));
        if let Some(id) = &self.run_id {
            check_run_id(id)?;
        }
        Ok(RunConfig {
            corpus,
            dataset,
            columns: self.columns.unwrap_or_else(|| ColumnMap::for_dataset(dataset)),
            protocol,
            chain,
            fixtures: self.fixtures,
            cache,
            out,
            run_id: self.run_id,
            limit: self.limit,
            seed: self.seed.unwrap_or(42),
        })
    }
}

fn check_run_id(id: &str) -> Result<(), RunError> {
    let ok =
        !id.is_empty() && !id.starts_with('.') && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
    if ok {
        Ok(())
    } else {
        Err(RunError::Usage(format!("run id {id:?} is not filesystem-safe")))
    }
}

pub fn model_slug(model: &str) -> String {
    let slug: String = model
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c.to_ascii_lowercase() } else { '-' })
        .collect();
    slug.trim_matches('-').to_string()
}

/// Fully resolved settings for one run; snapshotted as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub dataset: Dataset,
    pub columns: ColumnMap,
    pub protocol: Protocol,
    pub chain: ChainConfig,
    pub fixtures: Option<PathBuf>,
    pub cache: PathBuf,
    pub out: PathBuf,
    pub run_id: Option<String>,
    pub limit: Option<usize>,
    pub seed: u64,
}

impl RunConfig {
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub corpus_path: PathBuf,
    pub corpus_sha256: String,
    pub corpus_samples: usize,
    pub corpus_targets: Vec<String>,
    pub rejected_rows: Vec<usize>,
    pub columns: ColumnMap,
    pub selection: Selection,
    pub evaluated: usize,
    pub seed: u64,
    pub dev_fraction: f64,
    /// Ids a trained baseline would hold out for tuning; unused by the chain.
    pub dev_ids: Vec<String>,
    pub config_digest: String,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub traces: Vec<ChainTrace>,
    pub metrics: Option<BTreeMap<String, MetricsReport>>,
}

pub fn cmd_run(config: &RunConfig) -> Result<RunOutcome, RunError> {
    let input = RunInput::load(config)?;
    let providers = match config.chain.infer_provider.kind {
        ProviderKind::Mock => {
            let path =
                config.fixtures.as_ref().ok_or_else(|| RunError::Usage("mock provider needs fixtures".into()))?;
            let mock = MockFixtures::load(path)
                .and_then(MockProvider::from_fixtures)
                .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
            Providers::mock(Arc::new(mock))
        }
        ProviderKind::Http => Providers::from_config(&config.chain)?,
    };
    execute(config, input, providers)
}

/// [`cmd_run`] with caller-supplied providers.
pub fn run_with_providers(config: &RunConfig, providers: Providers) -> Result<RunOutcome, RunError> {
    execute(config, RunInput::load(config)?, providers)
}

struct RunInput {
    corpus: Corpus,
    checksum: String,
    samples: Vec<crate::domain::StanceSample>,
    selection: Selection,
}

impl RunInput {
    fn load(config: &RunConfig) -> Result<Self, RunError> {
        let corpus = load_corpus(&config.corpus, &config.columns, config.dataset)?;
        let checksum = file_checksum(&config.corpus)?;
        let (mut samples, selection) = config.protocol.select(&corpus)?;
        if let Some(k) = config.limit {
            samples.truncate(k);
        }
        Ok(RunInput { corpus, checksum, samples, selection })
    }
}

fn execute(config: &RunConfig, input: RunInput, providers: Providers) -> Result<RunOutcome, RunError> {
    let RunInput { corpus, checksum, samples, selection } = input;
    let cache = Arc::new(ResponseCache::open(&config.cache)?);
    let pipeline = Pipeline::new(config.chain.clone(), providers, cache)?;
    let traces = pipeline.run_batch(&samples)?;

    let digest = config.digest();
    let run_id = config
        .run_id
        .clone()
        .unwrap_or_else(|| format!("{}-{}", chrono::Utc::now().format("%Y%m%dT%H%M%SZ"), &digest[..8]));
    let run_dir = config.out.join(&run_id);
    fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;

    write_json(&run_dir.join("config.json"), config)?;
    let manifest = RunManifest {
        corpus_path: config.corpus.clone(),
        corpus_sha256: checksum,
        corpus_samples: corpus.len(),
        corpus_targets: corpus.targets.iter().cloned().collect(),
        rejected_rows: corpus.rejected_rows.clone(),
        columns: config.columns.clone(),
        evaluated: samples.len(),
        dev_ids: dev_ids(&corpus, &selection, config.seed),
        selection,
        seed: config.seed,
        dev_fraction: DEV_FRACTION,
        config_digest: digest,
    };
    write_json(&run_dir.join("manifest.json"), &manifest)?;
    write_traces(&run_dir.join("traces.jsonl"), &traces)?;

    let golds: HashMap<&str, StanceLabel> =
        samples.iter().filter_map(|s| s.gold_label.map(|g| (s.id.as_str(), g))).collect();
    let (g, p): (Vec<_>, Vec<_>) =
        traces.iter().filter_map(|t| golds.get(t.sample_id.as_str()).map(|&g| (g, t.predicted))).unzip();
    let metrics = if g.is_empty() {
        log::warn!("no gold labels among selected samples; skipping metrics");
        None
    } else {
        let mut reports = BTreeMap::new();
        reports.insert(config.protocol.setting_name(), evaluate(&g, &p)?);
        write_json(&run_dir.join("metrics.json"), &reports)?;
        let md = report_markdown(&reports)?;
        fs::write(run_dir.join("report.md"), md).map_err(io_err(&run_dir))?;
        Some(reports)
    };
    Ok(RunOutcome { run_dir, traces, metrics })
}

fn dev_ids(corpus: &Corpus, selection: &Selection, seed: u64) -> Vec<String> {
    let pool: Vec<_> = corpus.samples.iter().filter(|s| selection.other_targets.contains(&s.target)).cloned().collect();
    dev_split(&pool, DEV_FRACTION, seed).1.into_iter().map(|s| s.id).collect()
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn write_traces(path: &Path, traces: &[ChainTrace]) -> Result<(), RunError> {
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    for t in traces {
        let line = serde_json::to_string(t).expect("trace serializes");
        writeln!(file, "{line}").map_err(io_err(path))?;
    }
    Ok(())
}

pub fn read_traces(path: &Path) -> Result<Vec<ChainTrace>, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|_| RunError::TraceCorrupt(i + 1)))
        .collect()
}

/// Rescores stored traces against gold labels from `corpus`.
pub fn cmd_score(traces_path: &Path, corpus: &Corpus) -> Result<MetricsReport, RunError> {
    let traces = read_traces(traces_path)?;
    let golds: HashMap<&str, Option<StanceLabel>> =
        corpus.samples.iter().map(|s| (s.id.as_str(), s.gold_label)).collect();
    let mut g = Vec::with_capacity(traces.len());
    let mut p = Vec::with_capacity(traces.len());
    for t in &traces {
        match golds.get(t.sample_id.as_str()) {
            Some(Some(label)) => {
                g.push(*label);
                p.push(t.predicted);
            }
            _ => return Err(RunError::MissingGold(t.sample_id.clone())),
        }
    }
    Ok(evaluate(&g, &p)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheStats {
    pub entries: usize,
    pub bytes: u64,
    pub corrupt_lines: usize,
}

/// Read-only statistics; does not create or modify the file.
pub fn cache_stats(path: &Path) -> Result<CacheStats, RunError> {
    let bytes = fs::metadata(path).map_err(io_err(path))?.len();
    let text = fs::read(path).map_err(io_err(path))?;
    let mut keys = std::collections::HashSet::new();
    let mut corrupt = 0;
    for line in text.split(|&b| b == b'\n').filter(|l| !l.iter().all(u8::is_ascii_whitespace)) {
        match serde_json::from_slice::<crate::llmio::CacheEntry>(line) {
            Ok(e) => {
                keys.insert(e.key);
            }
            Err(_) => corrupt += 1,
        }
    }
    Ok(CacheStats { entries: keys.len(), bytes, corrupt_lines: corrupt })
}

pub fn cache_purge(path: &Path, confirmed: bool) -> Result<(), RunError> {
    if !confirmed {
        return Err(RunError::Usage(format!("refusing to delete {} without --yes", path.display())));
    }
    match fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(io_err(path)(e)),
    }
}
