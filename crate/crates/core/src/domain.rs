//! Samples, stance labels, and per-dataset label vocabularies.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::DomainError;

/// Canonical three-way stance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StanceLabel {
    Favor,
    Against,
    Neutral,
}

impl StanceLabel {
    pub const ALL: [StanceLabel; 3] = [StanceLabel::Favor, StanceLabel::Against, StanceLabel::Neutral];

    pub fn index(self) -> usize {
        match self {
            StanceLabel::Favor => 0,
            StanceLabel::Against => 1,
            StanceLabel::Neutral => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StanceLabel::Favor => "favor",
            StanceLabel::Against => "against",
            StanceLabel::Neutral => "neutral",
        }
    }
}

impl fmt::Display for StanceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Sem16,
    Vast,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(raw: &str) -> Option<Split> {
        match raw.trim().to_lowercase().as_str() {
            "train" | "training" => Some(Split::Train),
            "dev" | "val" | "valid" | "validation" => Some(Split::Dev),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One opinionated text paired with the target it expresses a stance toward.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StanceSample {
    pub id: String,
    pub text: String,
    pub target: String,
    pub gold_label: Option<StanceLabel>,
    pub dataset: Dataset,
    pub split: Split,
}

impl StanceSample {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        target: impl Into<String>,
        gold_label: Option<StanceLabel>,
    ) -> Result<Self, DomainError> {
        let sample = StanceSample {
            id: id.into(),
            text: text.into(),
            target: target.into(),
            gold_label,
            dataset: Dataset::Custom,
            split: Split::Test,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn with_dataset(mut self, dataset: Dataset) -> Self {
        self.dataset = dataset;
        self
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.id.trim().is_empty() {
            return Err(DomainError::EmptyField("id"));
        }
        if self.text.trim().is_empty() {
            return Err(DomainError::EmptyField("text"));
        }
        if self.target.trim().is_empty() {
            return Err(DomainError::EmptyField("target"));
        }
        Ok(())
    }
}

/// Surface forms a dataset (or a prompt) uses for each stance.
///
/// The first form registered for a label is the one rendered into prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawScheme", into = "RawScheme")]
pub struct LabelScheme {
    name: String,
    forms: [Vec<String>; 3],
}

#[derive(Serialize, Deserialize)]
struct RawScheme {
    name: String,
    surface_forms: BTreeMap<StanceLabel, Vec<String>>,
}

impl TryFrom<RawScheme> for LabelScheme {
    type Error = DomainError;

    fn try_from(raw: RawScheme) -> Result<Self, Self::Error> {
        let get = |l: StanceLabel| raw.surface_forms.get(&l).cloned().unwrap_or_default();
        LabelScheme::new(
            raw.name.clone(),
            get(StanceLabel::Favor),
            get(StanceLabel::Against),
            get(StanceLabel::Neutral),
        )
    }
}

impl From<LabelScheme> for RawScheme {
    fn from(s: LabelScheme) -> Self {
        let surface_forms = StanceLabel::ALL.iter().map(|&l| (l, s.forms[l.index()].clone())).collect();
        RawScheme { name: s.name, surface_forms }
    }
}

impl LabelScheme {
    pub fn new<S: Into<String>>(
        name: impl Into<String>,
        favor: Vec<S>,
        against: Vec<S>,
        neutral: Vec<S>,
    ) -> Result<Self, DomainError> {
        let conv = |v: Vec<S>| v.into_iter().map(Into::into).collect::<Vec<String>>();
        let scheme = LabelScheme { name: name.into(), forms: [conv(favor), conv(against), conv(neutral)] };
        scheme.validate()?;
        Ok(scheme)
    }

    /// favor/against/none, rendering "none" for the neutral class.
    pub fn sem16() -> Self {
        LabelScheme::new("sem16", vec!["favor", "favour"], vec!["against"], vec!["none", "neutral"])
            .expect("built-in scheme is valid")
    }

    /// pro/con/neutral, also accepting the favor/against/none vocabulary.
    pub fn vast() -> Self {
        LabelScheme::new("vast", vec!["pro", "favor", "favour"], vec!["con", "against"], vec!["neutral", "none"])
            .expect("built-in scheme is valid")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn forms(&self, label: StanceLabel) -> &[String] {
        &self.forms[label.index()]
    }

    /// All (form, label) pairs.
    pub fn iter_forms(&self) -> impl Iterator<Item = (&str, StanceLabel)> {
        StanceLabel::ALL.into_iter().flat_map(move |l| self.forms[l.index()].iter().map(move |f| (f.as_str(), l)))
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let mut seen: BTreeMap<&str, StanceLabel> = BTreeMap::new();
        for label in StanceLabel::ALL {
            let forms = &self.forms[label.index()];
            if forms.is_empty() {
                return Err(DomainError::InvalidScheme(format!("no surface form for {label}")));
            }
            for form in forms {
                if form.trim().is_empty() {
                    return Err(DomainError::InvalidScheme(format!("empty surface form for {label}")));
                }
                if *form != form.to_lowercase() || form.trim() != form {
                    return Err(DomainError::InvalidScheme(format!(
                        "surface form {form:?} must be lowercase and trimmed"
                    )));
                }
                if let Some(prev) = seen.insert(form, label) {
                    return Err(DomainError::InvalidScheme(format!(
                        "surface form {form:?} registered for both {prev} and {label}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Maps a raw model or dataset token to its label.
    ///
    /// Whitespace, surrounding brackets and quotes, and trailing punctuation
    /// are ignored; matching is case-insensitive.
    pub fn normalize(&self, raw: &str) -> Result<StanceLabel, DomainError> {
        let cleaned = clean_token(raw);
        self.iter_forms()
            .find(|(form, _)| *form == cleaned)
            .map(|(_, l)| l)
            .ok_or_else(|| DomainError::UnknownLabel(raw.to_string()))
    }

    pub fn canonical(&self, label: StanceLabel) -> &str {
        &self.forms[label.index()][0]
    }

    /// Canonical surfaces joined for a prompt, e.g. `favor, against, none`.
    pub fn render_choices(&self) -> String {
        StanceLabel::ALL.iter().map(|&l| self.canonical(l)).collect::<Vec<_>>().join(", ")
    }
}

fn clean_token(raw: &str) -> String {
    const WRAP: &[char] = &['[', ']', '(', ')', '{', '}', '<', '>', '"', '\'', '`', '*'];
    const TRAIL: &[char] = &['.', ',', ';', ':', '!', '?'];
    let mut s = raw.trim().to_lowercase();
    loop {
        let next = s.trim().trim_end_matches(TRAIL).trim_matches(WRAP).trim().to_string();
        if next == s {
            return s;
        }
        s = next;
    }
}

pub fn normalize_label(raw: &str, scheme: &LabelScheme) -> Result<StanceLabel, DomainError> {
    scheme.normalize(raw)
}

pub fn canonical_surface(label: StanceLabel, scheme: &LabelScheme) -> String {
    scheme.canonical(label).to_string()
}
