//! Minimal scripted HTTP server for transport tests.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

pub const OK_BODY: &str = r#"{"choices":[{"message":{"role":"assistant","content":"ok"}}],"usage":{"prompt_tokens":3,"completion_tokens":1}}"#;

pub type Hook = Arc<dyn Fn(&str) + Send + Sync>;

/// Serves one request per connection. The first responses follow `script`
/// (status codes); after that every request gets 200 with [`OK_BODY`].
pub struct Stub {
    pub base_url: String,
    pub hits: Arc<AtomicUsize>,
    pub bodies: Arc<Mutex<Vec<String>>>,
}

impl Stub {
    pub fn start(script: Vec<u16>) -> Stub {
        Self::with_hook(script, Arc::new(|_| {}))
    }

    /// `hook` runs with each request body before the reply is sent.
    pub fn with_hook(script: Vec<u16>, hook: Hook) -> Stub {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base_url = format!("http://{}/v1", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let (h, b) = (hits.clone(), bodies.clone());
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let n = h.fetch_add(1, Ordering::SeqCst);
                let status = script.get(n).copied().unwrap_or(200);
                if let Some(body) = serve(stream, status, &hook) {
                    b.lock().unwrap().push(body);
                }
            }
        });
        Stub { base_url, hits, bodies }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

fn serve(stream: TcpStream, status: u16, hook: &Hook) -> Option<String> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    let body = String::from_utf8_lossy(&body).into_owned();
    hook(&body);
    let payload = if status == 200 { OK_BODY.to_string() } else { format!(r#"{{"error":"scripted {status}"}}"#) };
    let reply = format!(
        "HTTP/1.1 {status} Scripted\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
    let mut stream = stream;
    stream.write_all(reply.as_bytes()).ok()?;
    stream.flush().ok()?;
    Some(body)
}

pub const KEY_ENV: &str = "STANCECHAIN_STUB_KEY";

/// Every test sets the same value, so concurrent calls are harmless.
pub fn set_stub_key() {
    std::env::set_var(KEY_ENV, "test-key");
}

pub mod suite {
    use std::path::PathBuf;

    use stancechain::corpus::{load_corpus, ColumnMap};
    use stancechain::llmio::MockFixtures;
    use stancechain::{Dataset, Resolution, StanceLabel, StanceSample};

    pub fn fixture(name: &str) -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
    }

    pub fn samples() -> Vec<StanceSample> {
        load_corpus(&fixture("mock_corpus.tsv"), &ColumnMap::sem16(), Dataset::Sem16).unwrap().samples
    }

    pub fn fixtures() -> MockFixtures {
        MockFixtures::load(&fixture("mock_suite.json")).unwrap()
    }

    /// Expected `(sample_id, predicted, resolution)` for the scripted suite.
    pub fn expected() -> Vec<(&'static str, StanceLabel, Resolution)> {
        use Resolution::*;
        use StanceLabel::*;
        vec![
            ("s01", Against, RuleParsed),
            ("s02", Favor, RuleParsed),
            ("s03", Against, DirectLabel),
            ("s04", Favor, RuleParsed),
            ("s05", Favor, RuleParsed),
            ("s06", Neutral, FallbackDefault),
            ("s07", Against, RecoveredKeyword),
            ("s08", Favor, RuleParsed),
            ("s09", Neutral, RuleParsed),
            ("s10", Against, RuleParsed),
            ("s11", Favor, RecoveredKeyword),
            ("s12", Against, RuleParsed),
        ]
    }
}

pub mod synth {
    use std::collections::BTreeMap;
    use std::path::Path;

    use stancechain::corpus::{ColumnMap, ColumnSpec};
    use stancechain::StanceLabel;

    const TARGETS: [&str; 5] = [
        "Atheism",
        "Climate Change is a Real Concern",
        "Feminist Movement",
        "Hillary Clinton",
        "Legalization of Abortion",
    ];
    const LABELS: [StanceLabel; 3] = [StanceLabel::Favor, StanceLabel::Against, StanceLabel::Neutral];

    /// `(id, target, text, label)` rows; texts include commas, quotes and non-ASCII.
    pub fn rows(n: usize) -> Vec<(String, String, String, StanceLabel)> {
        (0..n)
            .map(|i| {
                let text = match i % 5 {
                    0 => format!("Tweet number {i}, with a comma #SemST"),
                    1 => format!("She said \"enough\" at rally {i}"),
                    2 => format!("Café talk {i}: naïve takes everywhere"),
                    3 => format!("{i} reasons; none of them good"),
                    _ => format!("plain text {i}"),
                };
                (format!("{}", 10_000 + i), TARGETS[i % 5].to_string(), text, LABELS[(i / 5) % 3])
            })
            .collect()
    }

    pub fn write_sem16(path: &Path, n: usize) -> Vec<(String, String, String, StanceLabel)> {
        let rows = rows(n);
        let raw = |l: StanceLabel| match l {
            StanceLabel::Favor => "FAVOR",
            StanceLabel::Against => "AGAINST",
            StanceLabel::Neutral => "NONE",
        };
        let mut out = String::from("ID\tTarget\tTweet\tStance\n");
        for (id, t, x, l) in &rows {
            out.push_str(&format!("{id}\t{t}\t{x}\t{}\n", raw(*l)));
        }
        std::fs::write(path, out).unwrap();
        rows
    }

    pub fn write_vast(path: &Path, n: usize) -> Vec<(String, String, String, StanceLabel)> {
        let rows = rows(n);
        let mut w = csv::Writer::from_path(path).unwrap();
        w.write_record(["post", "new_topic", "label", "author"]).unwrap();
        for (_, t, x, l) in &rows {
            let code = match l {
                StanceLabel::Against => "0",
                StanceLabel::Favor => "1",
                StanceLabel::Neutral => "2",
            };
            w.write_record([x.as_str(), &t.to_lowercase(), code, "anon"]).unwrap();
        }
        w.flush().unwrap();
        rows
    }

    /// Columns shuffled, `;`-delimited, with its own label vocabulary.
    pub fn permuted_map() -> ColumnMap {
        ColumnMap {
            id_col: Some("tweet_id".into()),
            text_col: "body".into(),
            target_col: "topic".into(),
            label_col: Some("gold".into()),
            split_col: None,
            label_values: BTreeMap::from([
                ("pro".to_string(), StanceLabel::Favor),
                ("anti".to_string(), StanceLabel::Against),
                ("neither".to_string(), StanceLabel::Neutral),
            ]),
            delimiter: ';',
            has_header: true,
            quoting: true,
            default_split: stancechain::Split::Test,
        }
    }

    pub fn write_permuted(path: &Path, n: usize) -> Vec<(String, String, String, StanceLabel)> {
        let rows = rows(n);
        let mut w = csv::WriterBuilder::new().delimiter(b';').from_path(path).unwrap();
        w.write_record(["gold", "body", "topic", "tweet_id"]).unwrap();
        for (id, t, x, l) in &rows {
            let raw = match l {
                StanceLabel::Favor => "pro",
                StanceLabel::Against => "anti",
                StanceLabel::Neutral => "neither",
            };
            w.write_record([raw, x.as_str(), t.as_str(), id.as_str()]).unwrap();
        }
        w.flush().unwrap();
        rows
    }

    /// The permuted layout addressed by position, without a header.
    pub fn positional_map() -> ColumnMap {
        ColumnMap {
            id_col: Some(ColumnSpec::Index(3)),
            text_col: ColumnSpec::Index(1),
            target_col: ColumnSpec::Index(2),
            label_col: Some(ColumnSpec::Index(0)),
            has_header: false,
            ..permuted_map()
        }
    }
}
