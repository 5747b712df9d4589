use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use stancechain::corpus::{load_corpus, ColumnMap};
use stancechain::llmio::ProviderKind;
use stancechain::metrics::report_markdown;
use stancechain::run::{cache_purge, cache_stats, cmd_run, cmd_score, RunError, RunSettings};
use stancechain::Dataset;

#[derive(Parser)]
#[command(name = "stancechain", version, about = "Zero-shot stance detection with knowledge-augmented prompting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the chain over a corpus and write a run directory.
    Run(Box<RunArgs>),
    /// Rescore a traces.jsonl file against corpus gold labels.
    Score {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "sem16")]
        dataset: DatasetArg,
    },
    /// Inspect or delete a response cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Subcommand)]
enum CacheAction {
    Stats {
        #[arg(long)]
        cache: PathBuf,
    },
    Purge {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        yes: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Sem16,
    Vast,
    Custom,
}

impl From<DatasetArg> for Dataset {
    fn from(d: DatasetArg) -> Self {
        match d {
            DatasetArg::Sem16 => Dataset::Sem16,
            DatasetArg::Vast => Dataset::Vast,
            DatasetArg::Custom => Dataset::Custom,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    ZeroShot,
    CrossTarget,
    VastAll,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderArg {
    Http,
    Mock,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML settings file; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetArg>,
    #[arg(long, value_enum)]
    protocol: Option<ProtocolArg>,
    /// Held-out target (zero-shot) or destination target (cross-target).
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    source: Option<String>,
    /// Directory of judge.toml, query_gen.toml and if_then_infer.toml.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long, value_enum)]
    provider: Option<ProviderArg>,
    /// Mock response fixtures (JSON).
    #[arg(long)]
    fixtures: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    knowledge_model: Option<String>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    rate_limit: Option<u32>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    max_parse_retries: Option<u32>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn settings(self) -> Result<RunSettings, RunError> {
        let file = match &self.config {
            Some(p) => RunSettings::from_file(p)?,
            None => RunSettings::default(),
        };
        let flags = RunSettings {
            corpus: self.corpus,
            dataset: self.dataset.map(Into::into),
            protocol: self.protocol.map(|p| {
                match p {
                    ProtocolArg::ZeroShot => "zero-shot",
                    ProtocolArg::CrossTarget => "cross-target",
                    ProtocolArg::VastAll => "vast-all",
                }
                .to_string()
            }),
            target: self.target,
            source: self.source,
            templates: self.templates,
            provider: self.provider.map(|p| match p {
                ProviderArg::Http => ProviderKind::Http,
                ProviderArg::Mock => ProviderKind::Mock,
            }),
            model: self.model,
            knowledge_model: self.knowledge_model,
            base_url: self.base_url,
            api_key_env: self.api_key_env,
            rate_limit_per_min: self.rate_limit,
            fixtures: self.fixtures,
            cache: self.cache,
            parallelism: self.parallelism,
            max_parse_retries: self.max_parse_retries,
            limit: self.limit,
            out: self.out,
            run_id: self.run_id,
            seed: self.seed,
            ..Default::default()
        };
        Ok(file.overlay(flags))
    }
}

fn execute(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Run(args) => {
            let config = args.settings()?.resolve()?;
            let outcome = cmd_run(&config)?;
            if let Some(reports) = &outcome.metrics {
                print!("{}", report_markdown(reports)?);
            }
            println!("{}", outcome.run_dir.display());
        }
        Command::Score { traces, corpus, dataset } => {
            let dataset = Dataset::from(dataset);
            let corpus = load_corpus(&corpus, &ColumnMap::for_dataset(dataset), dataset)?;
            let report = cmd_score(&traces, &corpus)?;
            let reports = BTreeMap::from([("score".to_string(), report.clone())]);
            print!("{}", report_markdown(&reports)?);
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
        }
        Command::Cache { action: CacheAction::Stats { cache } } => {
            let s = cache_stats(&cache)?;
            println!("entries: {}\nbytes: {}\ncorrupt_lines: {}", s.entries, s.bytes, s.corrupt_lines);
        }
        Command::Cache { action: CacheAction::Purge { cache, yes } } => {
            cache_purge(&cache, yes)?;
            println!("removed {}", cache.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
