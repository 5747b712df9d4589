//! Acceptance gate. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{suite, synth, Stub, KEY_ENV};
use stancechain::corpus::{load_corpus, write_corpus, ColumnMap, Corpus};
use stancechain::llmio::{
    cached_complete, Clock, HttpProvider, ManualClock, MockFixtures, MockProvider, MockRule, ProviderConfig,
    ProviderKind, RateLimiter, ResponseCache,
};
use stancechain::metrics::evaluate;
use stancechain::outparse::fixtures::{check, parse_file};
use stancechain::prompt::{GenerationConfig, Message};
use stancechain::run::{cmd_run, RunSettings};
use stancechain::{
    ChainConfig, ChainTrace, Dataset, LabelScheme, Pipeline, Providers, Resolution, StanceLabel, StanceSample,
};

type Verdict = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn criterion(id: u32, name: &str, budget: Duration, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let took = start.elapsed();
    let verdict = verdict.and_then(|d| {
        if took <= budget {
            Ok(d)
        } else {
            Err(format!("{d}; took {took:.2?}, over the {budget:?} budget"))
        }
    });
    match &verdict {
        Ok(detail) => println!("PASS [{id}] {name}: {detail} ({took:.2?}, budget {budget:?})"),
        Err(why) => println!("FAIL [{id}] {name}: {why} ({took:.2?})"),
    }
    verdict.is_ok()
}

fn parser_fixtures() -> Verdict {
    let src = std::fs::read_to_string(suite::fixture("parser_cases.jsonl")).map_err(|e| e.to_string())?;
    let records = parse_file(&src)?;
    ensure(records.len() >= 40, || format!("only {} records", records.len()))?;
    let fig1 =
        "IF the target: Hillary Clinton ('email gate' has a negative impact on Hillary) then (the attitude is against)";
    ensure(records.iter().any(|r| r.raw == fig1), || "verbatim walkthrough rule missing".into())?;
    ensure(records.iter().any(|r| r.raw.starts_with("[RULE: IF")), || "RULE dialect missing".into())?;
    ensure(records.iter().any(|r| r.expected_reason.as_deref().is_some_and(|x| x.contains("then"))), || {
        "no multi-then reason".into()
    })?;
    let kinds: std::collections::BTreeSet<_> = records.iter().map(|r| r.expected_kind.as_str()).collect();
    for k in [
        "yes",
        "no",
        "judgment_unparsed",
        "api_call",
        "direct_label",
        "unparsed",
        "rule",
        "recovered",
        "ifthen_unparsed",
    ] {
        ensure(kinds.contains(k), || format!("no {k} record"))?;
    }
    let scheme = LabelScheme::sem16();
    let failures: Vec<String> = records.iter().filter_map(|r| check(r, &scheme).err()).collect();
    ensure(failures.is_empty(), || failures.join("; "))?;
    Ok(format!("{}/{} records agree", records.len(), records.len()))
}

/// Brute-force scores: per-class counts by scanning pairs, micro as accuracy.
fn oracle(golds: &[StanceLabel], preds: &[StanceLabel]) -> ([f64; 3], f64, f64) {
    let mut f1 = [0.0; 3];
    for (k, c) in StanceLabel::ALL.into_iter().enumerate() {
        let pairs = || golds.iter().zip(preds);
        let tp = pairs().filter(|(g, p)| **g == c && **p == c).count() as f64;
        let fp = pairs().filter(|(g, p)| **g != c && **p == c).count() as f64;
        let fn_ = pairs().filter(|(g, p)| **g == c && **p != c).count() as f64;
        let den = 2.0 * tp + fp + fn_;
        f1[k] = if den == 0.0 { 0.0 } else { 2.0 * tp / den };
    }
    let acc = golds.iter().zip(preds).filter(|(g, p)| g == p).count() as f64 / golds.len() as f64;
    (f1, acc, f1.iter().sum::<f64>() / 3.0)
}

fn metrics_oracle() -> Verdict {
    let close = |a: f64, b: f64, tol: f64| (a - b).abs() <= tol;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..1000 {
        let n = rng.gen_range(1..=60);
        let draw = |rng: &mut ChaCha8Rng| StanceLabel::ALL[rng.gen_range(0..3)];
        let g: Vec<_> = (0..n).map(|_| draw(&mut rng)).collect();
        let p: Vec<_> = (0..n).map(|_| draw(&mut rng)).collect();
        let r = evaluate(&g, &p).map_err(|e| e.to_string())?;
        let (f1, micro, macro_) = oracle(&g, &p);
        let ok = StanceLabel::ALL.into_iter().zip(f1).all(|(l, v)| close(r.f1(l), v, 1e-12))
            && close(r.micro_f1, micro, 1e-12)
            && close(r.macro_f1, macro_, 1e-12)
            && close(r.f1_m, (micro + macro_) / 2.0, 1e-12)
            && close(r.f1_avg_fa, (f1[0] + f1[1]) / 2.0, 1e-12);
        ensure(ok, || format!("trial {trial} disagrees: {r:?}"))?;
    }
    use StanceLabel::{Against as A, Favor as F, Neutral as N};
    let (g, p) = ([F, F, A, A, N, N], [F, A, A, A, N, F]);
    let (_, micro, macro_) = oracle(&g, &p);
    let f1_m = (micro + macro_) / 2.0;
    ensure(close(macro_, 0.65556, 1e-5) && close(micro, 0.66667, 1e-5) && close(f1_m, 0.66111, 1e-5), || {
        format!("oracle gives macro {macro_}, micro {micro}, f1_m {f1_m}")
    })?;
    let r = evaluate(&g, &p).map_err(|e| e.to_string())?;
    ensure(
        close(r.macro_f1, 0.65556, 1e-5) && close(r.micro_f1, 0.66667, 1e-5) && close(r.f1_m, 0.66111, 1e-5),
        || format!("worked example gives {r:?}"),
    )?;
    Ok("1000 trials within 1e-12; worked example macro 0.65556, micro 0.66667, f1_m 0.66111".into())
}

fn suite_pipeline(cache: Arc<ResponseCache>, tweak: impl FnOnce(&mut ChainConfig)) -> (Pipeline, Arc<MockProvider>) {
    let mock = Arc::new(MockProvider::from_fixtures(suite::fixtures()).unwrap());
    let mut cfg = ChainConfig::default();
    tweak(&mut cfg);
    (Pipeline::new(cfg, Providers::mock(mock.clone()), cache).unwrap(), mock)
}

fn stripped(traces: &[ChainTrace]) -> Vec<String> {
    traces.iter().map(|t| serde_json::to_string(&t.without_timing()).unwrap()).collect()
}

fn mock_determinism() -> Verdict {
    let samples = suite::samples();
    ensure(samples.len() >= 10, || format!("{} samples", samples.len()))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("cache.jsonl");
    let expected = suite::expected();
    let triples =
        |ts: &[ChainTrace]| ts.iter().map(|t| (t.sample_id.clone(), t.predicted, t.resolution)).collect::<Vec<_>>();
    let want: Vec<_> = expected.iter().map(|(id, l, r)| (id.to_string(), *l, *r)).collect();

    let (p, _) = suite_pipeline(Arc::new(ResponseCache::open(&path).unwrap()), |_| {});
    let cold = p.run_batch(&samples).map_err(|e| e.to_string())?;
    ensure(triples(&cold) == want, || format!("got {:?}", triples(&cold)))?;

    let (p, _) = suite_pipeline(Arc::new(ResponseCache::in_memory()), |c| c.parallelism = 1);
    let again = p.run_batch(&samples).map_err(|e| e.to_string())?;
    ensure(stripped(&again) == stripped(&cold), || "second cold run differs".into())?;

    let has = |f: &dyn Fn(&ChainTrace) -> bool| cold.iter().any(f);
    ensure(has(&|t| t.knowledge.is_some()), || "no knowledge path".into())?;
    ensure(has(&|t| t.resolution == Resolution::DirectLabel), || "no direct-label path".into())?;
    ensure(has(&|t| !t.step3_rejected.is_empty() && t.resolution != Resolution::FallbackDefault), || {
        "no retry-then-recover path".into()
    })?;
    ensure(has(&|t| t.resolution == Resolution::FallbackDefault), || "no fallback path".into())?;

    let (p, mock) = suite_pipeline(Arc::new(ResponseCache::open(&path).unwrap()), |_| {});
    let warm = p.run_batch(&samples).map_err(|e| e.to_string())?;
    ensure(mock.calls() == 0, || format!("warm run made {} provider calls", mock.calls()))?;
    ensure(stripped(&warm) == stripped(&cold), || "warm traces differ".into())?;
    Ok(format!("{} samples match expected triples; warm replay made 0 calls with identical traces", samples.len()))
}

fn fuzz_judgment(rng: &mut ChaCha8Rng) -> String {
    const PIECES: [&str; 16] = [
        "yes",
        "no",
        "Yes.",
        "NO",
        "maybe",
        "Output: [yes]",
        "[no]",
        "not sure",
        "nope",
        "yesss",
        "y e s",
        "",
        "The text is sufficient",
        "No, context needed",
        "none",
        "I think",
    ];
    let mut out = String::new();
    for _ in 0..rng.gen_range(1..=3) {
        out.push_str(PIECES[rng.gen_range(0..PIECES.len())]);
        out.push_str([" ", ", ", "\n", ""][rng.gen_range(0..4)]);
    }
    for _ in 0..rng.gen_range(0..4) {
        out.push(rng.gen_range(b' '..=b'~') as char);
    }
    out
}

fn violates(t: &ChainTrace) -> bool {
    !t.needs_knowledge
        && (t.step2_raw.is_some()
            || t.step2.is_some()
            || t.query.is_some()
            || t.knowledge.is_some()
            || t.attempts.query_gen > 0
            || t.attempts.knowledge > 0)
}

fn conditional_knowledge() -> Verdict {
    let (p, _) = suite_pipeline(Arc::new(ResponseCache::in_memory()), |_| {});
    let mut traces = p.run_batch(&suite::samples()).map_err(|e| e.to_string())?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let outputs: Vec<String> = (0..200).map(|_| fuzz_judgment(&mut rng)).collect();
    let mut rules: Vec<MockRule> = outputs
        .iter()
        .enumerate()
        .map(|(i, o)| {
            MockRule::regex(format!(r#"(?s)"fuzz sample {i}" to the target .*Output: \[yes/no\]\z"#), o.clone())
        })
        .collect();
    rules.push(MockRule::regex(r"(?s)or API call\.\nOutput:\z", "API call, QUERY [What is fuzz?]"));
    let samples: Vec<_> = (0..200)
        .map(|i| StanceSample::new(format!("f{i}"), format!("fuzz sample {i}"), "Atheism", None).unwrap())
        .collect();
    for polarity in [true, false] {
        let mock = MockProvider::new(MockFixtures {
            rules: rules.clone(),
            default: Some("[IF (generic) then (the attitude is favor)]".into()),
        });
        let cfg = ChainConfig { judge_yes_means_sufficient: polarity, ..ChainConfig::default() };
        let p = Pipeline::new(cfg, Providers::mock(Arc::new(mock)), Arc::new(ResponseCache::in_memory()))
            .map_err(|e| e.to_string())?;
        traces.extend(p.run_batch(&samples).map_err(|e| e.to_string())?);
    }
    let skipped = traces.iter().filter(|t| !t.needs_knowledge).count();
    let violations = traces.iter().filter(|t| violates(t)).count();
    ensure(skipped > 0 && skipped < traces.len(), || "fuzz did not exercise both branches".into())?;
    ensure(violations == 0, || format!("{violations} violations"))?;
    Ok(format!("{} traces ({skipped} without knowledge), 0 violations", traces.len()))
}

fn call_bound() -> Verdict {
    let mut worst = 0;
    let mut checked = 0;
    for retries in 0..=3u32 {
        for sample in suite::samples() {
            let (p, mock) = suite_pipeline(Arc::new(ResponseCache::in_memory()), |c| c.max_parse_retries = retries);
            let trace = p.run_sample(&sample).map_err(|e| e.to_string())?;
            let calls = mock.calls();
            let bound = 2 + (2 + retries as usize);
            ensure(calls <= bound, || format!("{} made {calls} calls, bound {bound}", sample.id))?;
            ensure(calls == trace.attempts.total() as usize, || format!("{}: attempts disagree with mock", sample.id))?;
            worst = worst.max(calls);
            checked += 1;
        }
    }
    Ok(format!("{checked} sample runs across max_parse_retries 0..=3; most calls in one sample {worst}"))
}

fn transport() -> Verdict {
    common::set_stub_key();
    let stub = Stub::start(vec![429, 500]);
    let mut cfg = ProviderConfig::http(stub.base_url.clone(), "stub-model");
    cfg.api_key_env = KEY_ENV.into();
    cfg.backoff_base_ms = 10;
    let request = |c: &str| GenerationConfig::default().request(vec![Message::user(c)]);
    let p = HttpProvider::with_limiter(cfg.clone(), Arc::new(RateLimiter::per_minute(1000)));
    let r = cached_complete(&request("hello"), &p, &ResponseCache::in_memory()).map_err(|e| e.to_string())?;
    ensure(r.retries == 2 && stub.hits() == 3, || format!("retries {}, server hits {}", r.retries, stub.hits()))?;

    let clock = Arc::new(ManualClock::default());
    let starts: Arc<Mutex<Vec<Duration>>> = Arc::default();
    let (c, s) = (clock.clone(), starts.clone());
    let counting = Stub::with_hook(vec![], Arc::new(move |_| s.lock().unwrap().push(c.now())));
    cfg.base_url = counting.base_url.clone();
    let limiter = Arc::new(RateLimiter::with_clock(30, Duration::from_secs(60), Box::new(clock.clone())));
    let p = HttpProvider::with_limiter(cfg, limiter);
    let cache = ResponseCache::in_memory();
    for i in 0..90 {
        cached_complete(&request(&format!("q{i}")), &p, &cache).map_err(|e| e.to_string())?;
    }
    let starts = starts.lock().unwrap();
    let peak = (0..starts.len())
        .map(|i| starts[i..].iter().take_while(|&&u| u < starts[i] + Duration::from_secs(60)).count())
        .max()
        .unwrap_or(0);
    ensure(starts.len() == 90 && peak <= 30, || format!("{} calls, peak {peak} per 60 s", starts.len()))?;
    Ok(format!("429,500,200 -> 2 retries; 90 calls at N=30 peaked at {peak} per 60 s window"))
}

fn roundtrip(path: &std::path::Path, map: &ColumnMap, dataset: Dataset) -> Result<Corpus, String> {
    let a = load_corpus(path, map, dataset).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let copy = dir.path().join(path.file_name().unwrap());
    write_corpus(&a, map, &copy).map_err(|e| e.to_string())?;
    let b = load_corpus(&copy, map, dataset).map_err(|e| e.to_string())?;
    ensure(a.samples == b.samples, || format!("{} changed after write/reload", path.display()))?;
    Ok(a)
}

fn corpus_roundtrip() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let golds = |c: &Corpus| c.samples.iter().map(|s| s.gold_label.unwrap()).collect::<Vec<_>>();
    let truth = |rows: &[(String, String, String, StanceLabel)]| rows.iter().map(|r| r.3).collect::<Vec<_>>();

    let sem = dir.path().join("sem16.tsv");
    let rows = synth::write_sem16(&sem, 50);
    let c = roundtrip(&sem, &ColumnMap::sem16(), Dataset::Sem16)?;
    ensure(c.len() == 50 && golds(&c) == truth(&rows), || "SEM16 rows differ from source".into())?;

    let vast = dir.path().join("vast.csv");
    let rows = synth::write_vast(&vast, 50);
    let c = roundtrip(&vast, &ColumnMap::vast(), Dataset::Vast)?;
    ensure(c.len() == 50 && golds(&c) == truth(&rows), || "VAST rows differ from source".into())?;

    let perm = dir.path().join("perm.csv");
    let rows = synth::write_permuted(&perm, 50);
    let c = roundtrip(&perm, &synth::permuted_map(), Dataset::Custom)?;
    ensure(golds(&c) == truth(&rows), || "permuted labels not remapped".into())?;
    ensure(c.samples.iter().zip(&rows).all(|(s, r)| s.id == r.0 && s.text == r.2), || {
        "permuted columns misread".into()
    })?;
    Ok("SEM16, VAST and permuted-map files survive load/write/reload".into())
}

/// Returns `None` when no endpoint is configured.
fn live_smoke() -> Option<Verdict> {
    std::env::var("LLM_API_KEY").ok().filter(|k| !k.is_empty())?;
    let base_url = std::env::var("LLM_BASE_URL").ok().filter(|u| !u.is_empty())?;
    Some((|| {
        let out = tempfile::tempdir().map_err(|e| e.to_string())?;
        let corpus = std::env::var("STANCECHAIN_LIVE_CORPUS")
            .map(Into::into)
            .unwrap_or_else(|_| suite::fixture("mock_corpus.tsv"));
        let settings = RunSettings {
            corpus: Some(corpus),
            protocol: Some("vast-all".into()),
            provider: Some(ProviderKind::Http),
            base_url: Some(base_url),
            model: std::env::var("LLM_MODEL").ok(),
            limit: Some(20),
            out: Some(out.path().to_path_buf()),
            ..RunSettings::default()
        };
        let config = settings.resolve().map_err(|e| e.to_string())?;
        let outcome = cmd_run(&config).map_err(|e| format!("exit {}: {e}", e.exit_code()))?;
        let total = outcome.traces.len();
        let compliant = outcome
            .traces
            .iter()
            .filter(|t| matches!(t.resolution, Resolution::RuleParsed | Resolution::DirectLabel))
            .count();
        let share = compliant as f64 / total.max(1) as f64;
        ensure(share >= 0.9, || format!("{compliant}/{total} format-compliant"))?;
        Ok(format!("{compliant}/{total} traces resolved by rule or direct label"))
    })())
}

fn main() {
    let secs = Duration::from_secs;
    let results = [
        criterion(1, "parser fixture suite", secs(1), parser_fixtures),
        criterion(2, "metrics oracle equivalence", secs(5), metrics_oracle),
        criterion(3, "mock end-to-end determinism", secs(10), mock_determinism),
        criterion(4, "conditional-knowledge invariant", secs(60), conditional_knowledge),
        criterion(5, "call-count bound", secs(60), call_bound),
        criterion(6, "transport robustness", secs(90), transport),
        criterion(7, "corpus loader round-trip", secs(1), corpus_roundtrip),
    ];
    let live = match live_smoke() {
        Some(v) => criterion(8, "live smoke run", secs(3600), || v),
        None => {
            println!("SKIP [8] live smoke run: set LLM_API_KEY and LLM_BASE_URL to enable");
            true
        }
    };
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} gated criteria passed", results.len());
    if !(results.iter().all(|&ok| ok) && live) {
        std::process::exit(1);
    }
}
