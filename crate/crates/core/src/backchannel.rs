//! Sentiment classification of the in-progress utterance and the
//! sentiment-matched backchannel it maps to.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::completion::{CompletionClient, CompletionError, CompletionRequest};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SentimentError {
    #[error("sentiment backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("no score in backend reply {0:?}")]
    MalformedBackendReply(String),
    #[error("score {0} outside [-1, 1]")]
    OutOfRange(f64),
    #[error("lexicon line {line}: {message}")]
    Lexicon { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentimentClass {
    Negative,
    Neutral,
    Positive,
}

impl SentimentClass {
    pub const ALL: [SentimentClass; 3] = [Self::Negative, Self::Neutral, Self::Positive];

    pub fn gesture(self) -> Gesture {
        match self {
            SentimentClass::Positive => Gesture::BrowRaise,
            SentimentClass::Neutral => Gesture::Nod,
            SentimentClass::Negative => Gesture::Frown,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentimentBackendKind {
    Llm,
    Lexicon,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentimentResult {
    pub score: f64,
    pub class: SentimentClass,
    pub backend: SentimentBackendKind,
}

/// Scores below -1/3 are negative, above +1/3 positive.
pub fn map_score_to_class(score: f64) -> Result<SentimentClass, SentimentError> {
    if !(-1.0..=1.0).contains(&score) {
        return Err(SentimentError::OutOfRange(score));
    }
    Ok(if score < -1.0 / 3.0 {
        SentimentClass::Negative
    } else if score > 1.0 / 3.0 {
        SentimentClass::Positive
    } else {
        SentimentClass::Neutral
    })
}

pub trait SentimentBackend: Send + Sync {
    fn kind(&self) -> SentimentBackendKind;
    /// Raw score in [-1, 1].
    fn score(&self, text: &str) -> Result<f64, SentimentError>;
}

impl<T: SentimentBackend + ?Sized> SentimentBackend for Arc<T> {
    fn kind(&self) -> SentimentBackendKind {
        (**self).kind()
    }
    fn score(&self, text: &str) -> Result<f64, SentimentError> {
        (**self).score(text)
    }
}

pub fn classify_sentiment(text: &str, backend: &dyn SentimentBackend) -> Result<SentimentResult, SentimentError> {
    if text.trim().is_empty() {
        return Ok(SentimentResult {
            score: 0.0,
            class: SentimentClass::Neutral,
            backend: backend.kind(),
        });
    }
    let score = backend.score(text)?;
    Ok(SentimentResult {
        score,
        class: map_score_to_class(score)?,
        backend: backend.kind(),
    })
}

const BUNDLED_LEXICON: &str = include_str!("../data/lexicon.tsv");

/// Word valences; a text scores the mean valence of its known words.
#[derive(Debug, Clone)]
pub struct Lexicon {
    valences: HashMap<String, f64>,
}

impl Lexicon {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_LEXICON).expect("bundled lexicon is well-formed")
    }

    /// Parses `word<TAB>valence` lines. `#` starts a comment line.
    pub fn parse(source: &str) -> Result<Self, SentimentError> {
        let mut valences = HashMap::new();
        for (i, line) in source.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: &str| SentimentError::Lexicon {
                line: i + 1,
                message: message.to_string(),
            };
            let (word, value) = line.split_once('\t').ok_or_else(|| err("expected word<TAB>valence"))?;
            let value: f64 = value.trim().parse().map_err(|_| err("valence is not a number"))?;
            if !(-1.0..=1.0).contains(&value) {
                return Err(err("valence outside [-1, 1]"));
            }
            valences.insert(word.trim().to_lowercase(), value);
        }
        Ok(Self { valences })
    }

    pub fn valence(&self, word: &str) -> Option<f64> {
        self.valences.get(&word.to_lowercase()).copied()
    }

    pub fn len(&self) -> usize {
        self.valences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valences.is_empty()
    }
}

pub(crate) fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|w| !w.is_empty())
        .map(|w| w.trim_matches('\'').to_lowercase())
}

impl SentimentBackend for Lexicon {
    fn kind(&self) -> SentimentBackendKind {
        SentimentBackendKind::Lexicon
    }

    fn score(&self, text: &str) -> Result<f64, SentimentError> {
        let (sum, n) = words(text)
            .filter_map(|w| self.valences.get(&w).copied())
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        Ok(if n == 0 { 0.0 } else { sum / n as f64 })
    }
}

pub const DEFAULT_SENTIMENT_PROMPT: &str = "Rate the sentiment of the following utterance on a \
continuous scale from -1 (very negative) through 0 (neutral) to 1 (very positive). \
Reply with the number only.\n\nUtterance: {utterance}";

/// Extracts the first decimal number in `reply`.
pub fn parse_score(reply: &str) -> Option<f64> {
    let bytes = reply.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let starts = c.is_ascii_digit()
            || ((c == b'-' || c == b'+' || c == b'.') && bytes.get(i + 1).is_some_and(|n| n.is_ascii_digit() || *n == b'.'));
        if starts {
            let mut seen_dot = c == b'.';
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j].is_ascii_digit() || (bytes[j] == b'.' && !seen_dot)) {
                seen_dot |= bytes[j] == b'.';
                j += 1;
            }
            if let Ok(v) = reply[i..j].parse::<f64>() {
                return Some(v);
            }
            i = j;
        } else {
            i += 1;
        }
    }
    None
}

pub struct LlmSentiment<C> {
    client: C,
    prompt_template: String,
    timeout: Duration,
}

impl<C: CompletionClient> LlmSentiment<C> {
    pub fn new(client: C) -> Self {
        Self {
            client,
            prompt_template: DEFAULT_SENTIMENT_PROMPT.to_string(),
            timeout: Duration::from_secs(10),
        }
    }

    pub fn with_prompt(mut self, template: impl Into<String>) -> Self {
        self.prompt_template = template.into();
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

impl<C: CompletionClient> SentimentBackend for LlmSentiment<C> {
    fn kind(&self) -> SentimentBackendKind {
        SentimentBackendKind::Llm
    }

    fn score(&self, text: &str) -> Result<f64, SentimentError> {
        let prompt = self.prompt_template.replace("{utterance}", text);
        let req = CompletionRequest::single(prompt, 0.0, self.timeout);
        let reply = self.client.complete(&req).map_err(|e| match e {
            CompletionError::Malformed(m) => SentimentError::MalformedBackendReply(m),
            other => SentimentError::BackendUnavailable(other.to_string()),
        })?;
        let score = parse_score(&reply).ok_or_else(|| SentimentError::MalformedBackendReply(reply.clone()))?;
        if !(-1.0..=1.0).contains(&score) {
            return Err(SentimentError::MalformedBackendReply(reply));
        }
        Ok(score)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gesture {
    Nod,
    Frown,
    BrowRaise,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackchannelAct {
    pub verbal: String,
    pub gesture: Gesture,
    pub sentiment: SentimentClass,
    #[serde(rename = "t")]
    pub time: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackchannelInventory {
    pub positive: Vec<String>,
    pub neutral: Vec<String>,
    pub negative: Vec<String>,
}

impl Default for BackchannelInventory {
    fn default() -> Self {
        let owned = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            positive: owned(&["oh wow!", "nice!", "that's great!"]),
            neutral: owned(&["mm-hmm", "uh-huh", "I see"]),
            negative: owned(&["oh no...", "goodness!", "oh dear..."]),
        }
    }
}

impl BackchannelInventory {
    pub fn tokens(&self, class: SentimentClass) -> &[String] {
        match class {
            SentimentClass::Positive => &self.positive,
            SentimentClass::Neutral => &self.neutral,
            SentimentClass::Negative => &self.negative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no backchannel tokens configured for {0:?}")]
pub struct EmptyInventory(pub SentimentClass);

/// Per-session round-robin position within each class list.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SelectorState {
    next: [usize; 3],
}

impl SelectorState {
    fn slot(class: SentimentClass) -> usize {
        match class {
            SentimentClass::Negative => 0,
            SentimentClass::Neutral => 1,
            SentimentClass::Positive => 2,
        }
    }

    pub fn select(
        &mut self,
        inventory: &BackchannelInventory,
        class: SentimentClass,
        time: u64,
    ) -> Result<BackchannelAct, EmptyInventory> {
        let tokens = inventory.tokens(class);
        if tokens.is_empty() {
            return Err(EmptyInventory(class));
        }
        let slot = &mut self.next[Self::slot(class)];
        let verbal = tokens[*slot % tokens.len()].clone();
        *slot = (*slot + 1) % tokens.len();
        Ok(BackchannelAct {
            verbal,
            gesture: class.gesture(),
            sentiment: class,
            time,
        })
    }
}
