//! Delimited-file corpora and the evaluation subsets drawn from them.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{Dataset, Split, StanceLabel, StanceSample};
use crate::error::CorpusError;

/// A column addressed by header name or by zero-based position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnSpec {
    Index(usize),
    Name(String),
}

impl From<&str> for ColumnSpec {
    fn from(s: &str) -> Self {
        ColumnSpec::Name(s.to_string())
    }
}

impl From<usize> for ColumnSpec {
    fn from(i: usize) -> Self {
        ColumnSpec::Index(i)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub id_col: Option<ColumnSpec>,
    pub text_col: ColumnSpec,
    pub target_col: ColumnSpec,
    pub label_col: Option<ColumnSpec>,
    pub split_col: Option<ColumnSpec>,
    /// Raw label value to stance; matched case-insensitively after trimming.
    pub label_values: BTreeMap<String, StanceLabel>,
    pub delimiter: char,
    pub has_header: bool,
    /// Whether fields may be double-quoted.
    #[serde(default = "yes")]
    pub quoting: bool,
    /// Split assigned when there is no split column.
    #[serde(default = "test_split")]
    pub default_split: Split,
}

fn yes() -> bool {
    true
}

fn test_split() -> Split {
    Split::Test
}

impl ColumnMap {
    /// Tab-separated `ID / Target / Tweet / Stance` with FAVOR/AGAINST/NONE.
    pub fn sem16() -> Self {
        ColumnMap {
            id_col: Some("ID".into()),
            text_col: "Tweet".into(),
            target_col: "Target".into(),
            label_col: Some("Stance".into()),
            split_col: None,
            label_values: [
                ("FAVOR", StanceLabel::Favor),
                ("AGAINST", StanceLabel::Against),
                ("NONE", StanceLabel::Neutral),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
            delimiter: '\t',
            has_header: true,
            quoting: false,
            default_split: Split::Test,
        }
    }

    /// Comma-separated `post / new_topic / label` with 0=con, 1=pro, 2=neutral.
    pub fn vast() -> Self {
        ColumnMap {
            id_col: None,
            text_col: "post".into(),
            target_col: "new_topic".into(),
            label_col: Some("label".into()),
            split_col: None,
            label_values: [("0", StanceLabel::Against), ("1", StanceLabel::Favor), ("2", StanceLabel::Neutral)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            delimiter: ',',
            has_header: true,
            quoting: true,
            default_split: Split::Test,
        }
    }

    pub fn for_dataset(dataset: Dataset) -> Self {
        match dataset {
            Dataset::Vast => Self::vast(),
            Dataset::Sem16 | Dataset::Custom => Self::sem16(),
        }
    }

    fn validate(&self) -> Result<(), CorpusError> {
        if !self.delimiter.is_ascii() {
            return Err(CorpusError::InvalidColumnMap("delimiter must be a single ASCII character".into()));
        }
        let mut cols = vec![&self.text_col, &self.target_col];
        cols.extend(self.label_col.as_ref());
        if cols.iter().enumerate().any(|(i, a)| cols[..i].contains(a)) {
            return Err(CorpusError::InvalidColumnMap("text, target and label columns must differ".into()));
        }
        let mut seen: BTreeMap<String, StanceLabel> = BTreeMap::new();
        for (raw, &label) in &self.label_values {
            if let Some(prev) = seen.insert(raw.trim().to_lowercase(), label) {
                if prev != label {
                    return Err(CorpusError::InvalidColumnMap(format!("label value {raw:?} is ambiguous")));
                }
            }
        }
        Ok(())
    }

    fn lookup_label(&self, raw: &str) -> Option<StanceLabel> {
        let needle = raw.trim().to_lowercase();
        self.label_values.iter().find(|(k, _)| k.trim().to_lowercase() == needle).map(|(_, &l)| l)
    }

    fn raw_for(&self, label: StanceLabel) -> Option<&str> {
        self.label_values.iter().find(|(_, &l)| l == label).map(|(k, _)| k.as_str())
    }

    fn columns(&self) -> [(Field, Option<&ColumnSpec>); 5] {
        [
            (Field::Id, self.id_col.as_ref()),
            (Field::Target, Some(&self.target_col)),
            (Field::Text, Some(&self.text_col)),
            (Field::Label, self.label_col.as_ref()),
            (Field::Split, self.split_col.as_ref()),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    Id,
    Target,
    Text,
    Label,
    Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub samples: Vec<StanceSample>,
    pub targets: BTreeSet<String>,
    /// 1-based data rows dropped for an empty text or target.
    #[serde(default)]
    pub rejected_rows: Vec<usize>,
}

impl Corpus {
    pub fn new(name: impl Into<String>, samples: Vec<StanceSample>) -> Self {
        let targets = samples.iter().map(|s| s.target.clone()).collect();
        Corpus { name: name.into(), samples, targets, rejected_rows: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn require_target(&self, target: &str) -> Result<(), CorpusError> {
        if self.targets.contains(target) {
            Ok(())
        } else {
            Err(CorpusError::UnknownTarget(target.to_string()))
        }
    }

    fn test_samples_for(&self, target: &str) -> Vec<StanceSample> {
        self.samples.iter().filter(|s| s.split == Split::Test && s.target == target).cloned().collect()
    }
}

fn decode(bytes: &[u8]) -> Result<&str, CorpusError> {
    let bytes = bytes.strip_prefix(b"\xEF\xBB\xBF").unwrap_or(bytes);
    std::str::from_utf8(bytes).map_err(|e| CorpusError::Encoding { offset: e.valid_up_to() })
}

pub fn file_checksum(path: &Path) -> Result<String, CorpusError> {
    let bytes = fs::read(path).map_err(|source| CorpusError::FileUnreadable { path: path.to_path_buf(), source })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn load_corpus(path: &Path, colmap: &ColumnMap, dataset: Dataset) -> Result<Corpus, CorpusError> {
    let bytes = fs::read(path).map_err(|source| CorpusError::FileUnreadable { path: path.to_path_buf(), source })?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "corpus".into());
    parse_corpus(decode(&bytes)?, &name, colmap, dataset)
}

/// Parses delimited text already in memory.
pub fn parse_corpus(text: &str, name: &str, colmap: &ColumnMap, dataset: Dataset) -> Result<Corpus, CorpusError> {
    colmap.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(colmap.delimiter as u8)
        .has_headers(false)
        .flexible(true)
        .quoting(colmap.quoting)
        .from_reader(text.as_bytes());
    let mut records = reader.records();

    let header: Option<Vec<String>> = if colmap.has_header {
        match records.next() {
            Some(r) => Some(r?.iter().map(|h| h.trim().to_string()).collect()),
            None => Some(Vec::new()),
        }
    } else {
        None
    };
    let resolve = |spec: &ColumnSpec| -> Result<usize, CorpusError> {
        match (spec, &header) {
            (ColumnSpec::Index(i), _) => Ok(*i),
            (ColumnSpec::Name(n), Some(h)) => h.iter().position(|c| c == n).ok_or_else(|| {
                CorpusError::SchemaMismatch { expected: format!("column {n:?}"), found: format!("header {h:?}") }
            }),
            (ColumnSpec::Name(n), None) => Err(CorpusError::SchemaMismatch {
                expected: format!("column {n:?} by name"),
                found: "no header row".into(),
            }),
        }
    };
    let is_empty_file = header.as_ref().is_some_and(|h| h.is_empty());
    let mut cols: Vec<(Field, usize)> = Vec::new();
    if !is_empty_file {
        for (field, spec) in colmap.columns() {
            if let Some(spec) = spec {
                cols.push((field, resolve(spec)?));
            }
        }
    }
    let col = |f: Field| cols.iter().find(|(g, _)| *g == f).map(|(_, i)| *i);

    let mut samples = Vec::new();
    let mut rejected_rows = Vec::new();
    let mut ids = HashSet::new();
    for (i, record) in records.enumerate() {
        let record = record?;
        let row = i + 1;
        if record.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        let get = |f: Field| -> Result<Option<&str>, CorpusError> {
            match col(f) {
                None => Ok(None),
                Some(idx) => record.get(idx).map(Some).ok_or_else(|| CorpusError::SchemaMismatch {
                    expected: format!("at least {} fields", idx + 1),
                    found: format!("{} fields at row {row}", record.len()),
                }),
            }
        };
        let text = get(Field::Text)?.unwrap_or_default();
        let target = get(Field::Target)?.unwrap_or_default().trim();
        if text.trim().is_empty() || target.is_empty() {
            rejected_rows.push(row);
            continue;
        }
        let gold_label = match get(Field::Label)? {
            None => None,
            Some(raw) => {
                Some(colmap.lookup_label(raw).ok_or_else(|| CorpusError::LabelUnmapped { raw: raw.to_string(), row })?)
            }
        };
        let split = match get(Field::Split)? {
            None => colmap.default_split,
            Some(raw) => Split::parse(raw).ok_or_else(|| CorpusError::SchemaMismatch {
                expected: "split train/dev/test".into(),
                found: format!("{raw:?} at row {row}"),
            })?,
        };
        let id = match get(Field::Id)?.map(str::trim).filter(|s| !s.is_empty()) {
            Some(id) => id.to_string(),
            None => format!("{name}-{row}"),
        };
        if !ids.insert(id.clone()) {
            return Err(CorpusError::DuplicateId { id, row });
        }
        samples.push(StanceSample {
            id,
            text: text.to_string(),
            target: target.to_string(),
            gold_label,
            dataset,
            split,
        });
    }
    if !rejected_rows.is_empty() {
        log::warn!("{name}: rejected rows with empty text or target: {rejected_rows:?}");
    }
    let mut corpus = Corpus::new(name, samples);
    corpus.rejected_rows = rejected_rows;
    Ok(corpus)
}

/// Writes `corpus` in the layout described by `colmap`, so that loading the
/// result under the same map reproduces it.
pub fn write_corpus(corpus: &Corpus, colmap: &ColumnMap, path: &Path) -> Result<(), CorpusError> {
    colmap.validate()?;
    let present: Vec<(Field, &ColumnSpec)> =
        colmap.columns().into_iter().filter_map(|(f, s)| s.map(|s| (f, s))).collect();
    let by_name = present.iter().all(|(_, s)| matches!(s, ColumnSpec::Name(_)));
    let by_index = present.iter().all(|(_, s)| matches!(s, ColumnSpec::Index(_)));
    let positions: Vec<(Field, usize)> = if by_name && colmap.has_header {
        present.iter().enumerate().map(|(i, (f, _))| (*f, i)).collect()
    } else if by_index {
        present
            .iter()
            .map(|(f, s)| match s {
                ColumnSpec::Index(i) => (*f, *i),
                ColumnSpec::Name(_) => unreachable!(),
            })
            .collect()
    } else {
        return Err(CorpusError::InvalidColumnMap("cannot write a mix of named and positional columns".into()));
    };
    let width = positions.iter().map(|(_, i)| i + 1).max().unwrap_or(0);
    if positions.iter().enumerate().any(|(i, (_, a))| positions[..i].iter().any(|(_, b)| a == b)) {
        return Err(CorpusError::InvalidColumnMap("two fields share a column".into()));
    }

    let mut writer = csv::WriterBuilder::new()
        .delimiter(colmap.delimiter as u8)
        .quote_style(if colmap.quoting { csv::QuoteStyle::Necessary } else { csv::QuoteStyle::Never })
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => CorpusError::FileUnreadable { path: path.to_path_buf(), source },
            other => CorpusError::InvalidColumnMap(format!("{other:?}")),
        })?;
    if colmap.has_header {
        let mut row = vec![String::new(); width];
        for ((_, spec), (_, pos)) in present.iter().zip(&positions) {
            row[*pos] = match spec {
                ColumnSpec::Name(n) => n.clone(),
                ColumnSpec::Index(i) => format!("col{i}"),
            };
        }
        writer.write_record(&row)?;
    }
    for s in &corpus.samples {
        let mut row = vec![String::new(); width];
        for (field, pos) in &positions {
            row[*pos] = match field {
                Field::Id => s.id.clone(),
                Field::Target => s.target.clone(),
                Field::Text => s.text.clone(),
                Field::Label => match s.gold_label {
                    Some(l) => colmap
                        .raw_for(l)
                        .ok_or_else(|| CorpusError::InvalidColumnMap(format!("no raw value for {l}")))?
                        .to_string(),
                    None => String::new(),
                },
                Field::Split => s.split.as_str().to_string(),
            };
        }
        writer.write_record(&row)?;
    }
    writer.flush().map_err(|source| CorpusError::FileUnreadable { path: path.to_path_buf(), source })?;
    Ok(())
}

/// Test-split samples of the held-out target.
pub fn select_zero_shot(corpus: &Corpus, held_out_target: &str) -> Result<Vec<StanceSample>, CorpusError> {
    corpus.require_target(held_out_target)?;
    Ok(corpus.test_samples_for(held_out_target))
}

/// Test-split samples of `destination`; `source` is validated but, with no
/// training step, does not affect the selection.
pub fn select_cross_target(corpus: &Corpus, source: &str, destination: &str) -> Result<Vec<StanceSample>, CorpusError> {
    corpus.require_target(source)?;
    corpus.require_target(destination)?;
    if source == destination {
        return Err(CorpusError::SameTarget(source.to_string()));
    }
    Ok(corpus.test_samples_for(destination))
}

pub fn select_vast_eval(corpus: &Corpus) -> Vec<StanceSample> {
    corpus.samples.iter().filter(|s| s.split == Split::Test).cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Protocol {
    ZeroShot { target: String },
    CrossTarget { source: String, destination: String },
    VastAll,
}

/// What a protocol selected, for the run manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub protocol: Protocol,
    pub selected: usize,
    /// Targets a trained model would have learned from; recorded only.
    pub other_targets: Vec<String>,
}

impl Protocol {
    pub fn select(&self, corpus: &Corpus) -> Result<(Vec<StanceSample>, Selection), CorpusError> {
        let (samples, eval_target) = match self {
            Protocol::ZeroShot { target } => (select_zero_shot(corpus, target)?, Some(target)),
            Protocol::CrossTarget { source, destination } => {
                (select_cross_target(corpus, source, destination)?, Some(destination))
            }
            Protocol::VastAll => (select_vast_eval(corpus), None),
        };
        let other_targets = match eval_target {
            Some(t) => corpus.targets.iter().filter(|x| *x != t).cloned().collect(),
            None => Vec::new(),
        };
        let selection = Selection { protocol: self.clone(), selected: samples.len(), other_targets };
        Ok((samples, selection))
    }

    pub fn setting_name(&self) -> String {
        match self {
            Protocol::ZeroShot { target } => target.clone(),
            Protocol::CrossTarget { source, destination } => format!("{source}->{destination}"),
            Protocol::VastAll => "All".to_string(),
        }
    }
}

/// Seeded split of `samples` into (train, dev), with `dev_fraction` of the
/// samples (rounded) in dev. Input order is kept within each part.
pub fn dev_split(samples: &[StanceSample], dev_fraction: f64, seed: u64) -> (Vec<StanceSample>, Vec<StanceSample>) {
    let n = samples.len();
    let n_dev = ((n as f64) * dev_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let dev: BTreeSet<usize> = order[..n_dev].iter().copied().collect();
    let (mut train, mut dev_part) = (Vec::new(), Vec::new());
    for (i, s) in samples.iter().enumerate() {
        if dev.contains(&i) {
            dev_part.push(s.clone().with_split(Split::Dev));
        } else {
            train.push(s.clone());
        }
    }
    (train, dev_part)
}
