//! Self-disclosure scoring on the Information / Thoughts / Feelings 1-3
//! scales, and the agreement statistics used to validate such labels.

use std::collections::HashMap;
use std::hash::Hash;
use std::io::Write;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backchannel::words;
use crate::completion::{CompletionClient, CompletionError, CompletionRequest};
use crate::transcript::Transcript;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DisclosureError {
    #[error("scoring backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("scoring reply is not three integers in 1..=3: {0:?}")]
    MalformedBackendReply(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DisclosureScore {
    pub information: u8,
    pub thoughts: u8,
    pub feelings: u8,
}

impl DisclosureScore {
    pub const FLOOR: DisclosureScore = DisclosureScore {
        information: 1,
        thoughts: 1,
        feelings: 1,
    };

    pub fn new(information: u8, thoughts: u8, feelings: u8) -> Option<Self> {
        let ok = |v: u8| (1..=3).contains(&v);
        (ok(information) && ok(thoughts) && ok(feelings)).then_some(Self {
            information,
            thoughts,
            feelings,
        })
    }
}

pub trait DisclosureScorer: Send + Sync {
    fn name(&self) -> &'static str;
    fn score(&self, question: &str, answer: &str) -> Result<DisclosureScore, DisclosureError>;
}

/// Word lists and thresholds of the heuristic scorer.
pub mod heuristic {
    /// Information: answers shorter than `INFO_TIERS[0]` words score 1,
    /// shorter than `INFO_TIERS[1]` score 2, longer score 3.
    pub const INFO_TIERS: [usize; 2] = [20, 60];

    /// Thoughts: 0 markers score 1, 1-2 score 2, 3 or more score 3.
    pub const OPINION_MARKERS: &[&str] = &[
        "i think",
        "i believe",
        "i feel like",
        "i guess",
        "i suppose",
        "i realize",
        "i realized",
        "i wonder",
        "in my opinion",
        "to me",
        "because",
        "probably",
        "maybe",
    ];
    pub const THOUGHT_TIERS: [usize; 2] = [1, 3];

    /// Feelings: distinct emotion words in sentences with a first-person
    /// pronoun. 0 scores 1, 1 scores 2, 2 or more score 3.
    pub const FIRST_PERSON: &[&str] = &["i", "i'm", "i've", "i'd", "me", "my", "myself"];
    pub const EMOTION_WORDS: &[&str] = &[
        "afraid", "angry", "anxious", "ashamed", "content", "depressed", "devastated", "disappointed",
        "embarrassed", "excited", "frustrated", "glad", "grateful", "guilty", "happy", "hate", "heartbroken",
        "hopeful", "hurt", "jealous", "lonely", "love", "loved", "miserable", "nervous", "overwhelmed", "proud",
        "relieved", "sad", "scared", "terrified", "thrilled", "upset", "worried",
    ];
    pub const FEELING_TIERS: [usize; 2] = [1, 2];
}

fn tier(count: usize, tiers: [usize; 2]) -> u8 {
    if count >= tiers[1] {
        3
    } else if count >= tiers[0] {
        2
    } else {
        1
    }
}

/// Deterministic scorer built from fixed word lists; see [`heuristic`].
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicScorer;

impl HeuristicScorer {
    pub fn score_answer(answer: &str) -> DisclosureScore {
        use heuristic::*;
        let tokens: Vec<String> = words(answer).collect();
        if tokens.is_empty() {
            return DisclosureScore::FLOOR;
        }
        let information = if tokens.len() < INFO_TIERS[0] {
            1
        } else if tokens.len() < INFO_TIERS[1] {
            2
        } else {
            3
        };

        let joined = format!(" {} ", tokens.join(" "));
        let markers: usize = OPINION_MARKERS
            .iter()
            .map(|m| joined.matches(&format!(" {m} ")).count())
            .sum();

        let mut emotions: Vec<&str> = Vec::new();
        for sentence in answer.split(['.', '!', '?', ';', '\n']) {
            let ws: Vec<String> = words(sentence).collect();
            if !ws.iter().any(|w| FIRST_PERSON.contains(&w.as_str())) {
                continue;
            }
            for w in &ws {
                if let Some(e) = EMOTION_WORDS.iter().find(|e| **e == w.as_str()) {
                    if !emotions.contains(e) {
                        emotions.push(e);
                    }
                }
            }
        }

        DisclosureScore {
            information,
            thoughts: tier(markers, THOUGHT_TIERS),
            feelings: tier(emotions.len(), FEELING_TIERS),
        }
    }
}

impl DisclosureScorer for HeuristicScorer {
    fn name(&self) -> &'static str {
        "heuristic"
    }

    fn score(&self, _question: &str, answer: &str) -> Result<DisclosureScore, DisclosureError> {
        Ok(Self::score_answer(answer))
    }
}

pub const DEFAULT_RUBRIC_PROMPT: &str = "You rate how much a person disclosed about themselves in an answer to a question. \
Rate three dimensions, each on a scale from 1 (lowest disclosure) to 3 (highest disclosure).
Information: how much information about themselves the person revealed. 1 = little or no personal information; 2 = some personal facts or details; 3 = rich, specific, intimate personal details.
Thoughts: how much thought the person put into the answer. 1 = superficial or no reflection; 2 = some opinions or reasons; 3 = deep reflection on their views, values or experiences.
Feelings: how deep the feelings expressed were. 1 = no feelings expressed; 2 = feelings mentioned in passing; 3 = deep or intense personal feelings described.
Reply with three integers separated by commas in the order Information, Thoughts, Feelings, and nothing else.

Question: {question}
Answer: {answer}";

/// Parses "i,t,f" where each is an integer in 1..=3.
pub fn parse_rubric_reply(reply: &str) -> Option<DisclosureScore> {
    let nums: Vec<&str> = reply
        .split(|c: char| !(c.is_ascii_digit() || c == '-' || c == '.'))
        .filter(|s| !s.is_empty())
        .collect();
    if nums.len() != 3 {
        return None;
    }
    let parsed: Option<Vec<u8>> = nums.iter().map(|s| s.parse::<u8>().ok()).collect();
    let v = parsed?;
    DisclosureScore::new(v[0], v[1], v[2])
}

pub struct LlmScorer<C> {
    client: C,
    prompt_template: String,
    timeout: Duration,
}

impl<C: CompletionClient> LlmScorer<C> {
    pub fn new(client: C) -> Self {
        Self {
            client,
            prompt_template: DEFAULT_RUBRIC_PROMPT.to_string(),
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

impl<C: CompletionClient> DisclosureScorer for LlmScorer<C> {
    fn name(&self) -> &'static str {
        "llm"
    }

    fn score(&self, question: &str, answer: &str) -> Result<DisclosureScore, DisclosureError> {
        if answer.trim().is_empty() {
            return Ok(DisclosureScore::FLOOR);
        }
        let prompt = self
            .prompt_template
            .replace("{question}", question)
            .replace("{answer}", answer);
        let req = CompletionRequest::single(prompt, 0.0, self.timeout);
        let mut last = String::new();
        for _ in 0..2 {
            let reply = self.client.complete(&req).map_err(|e| match e {
                CompletionError::Malformed(m) => DisclosureError::MalformedBackendReply(m),
                other => DisclosureError::BackendUnavailable(other.to_string()),
            })?;
            if let Some(score) = parse_rubric_reply(&reply) {
                return Ok(score);
            }
            last = reply;
        }
        Err(DisclosureError::MalformedBackendReply(last))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredAnswer {
    pub session_id: String,
    pub question_index: usize,
    pub score: DisclosureScore,
    pub backend: String,
}

pub fn score_transcript(
    transcript: &Transcript,
    scorer: &dyn DisclosureScorer,
) -> Result<Vec<ScoredAnswer>, DisclosureError> {
    transcript
        .answers()
        .into_iter()
        .map(|(index, question, answer)| {
            Ok(ScoredAnswer {
                session_id: transcript.header.session_id.clone(),
                question_index: index,
                score: scorer.score(&question, &answer)?,
                backend: scorer.name().to_string(),
            })
        })
        .collect()
}

pub const SCORE_CSV_HEADER: &str = "session_id,question_index,information,thoughts,feelings,backend";

pub fn write_scores_csv<W: Write>(mut out: W, rows: &[ScoredAnswer], header: bool) -> std::io::Result<()> {
    if header {
        writeln!(out, "{SCORE_CSV_HEADER}")?;
    }
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.session_id, r.question_index, r.score.information, r.score.thoughts, r.score.feelings, r.backend
        )?;
    }
    Ok(())
}

/// Per-session means of each dimension, in first-seen session order.
pub fn session_means(rows: &[ScoredAnswer]) -> Vec<(String, [f64; 3])> {
    let mut order: Vec<String> = Vec::new();
    let mut sums: HashMap<String, ([f64; 3], usize)> = HashMap::new();
    for r in rows {
        let entry = sums.entry(r.session_id.clone()).or_insert_with(|| {
            order.push(r.session_id.clone());
            ([0.0; 3], 0)
        });
        entry.0[0] += r.score.information as f64;
        entry.0[1] += r.score.thoughts as f64;
        entry.0[2] += r.score.feelings as f64;
        entry.1 += 1;
    }
    order
        .into_iter()
        .map(|id| {
            let (s, n) = sums[&id];
            let n = n as f64;
            (id, [s[0] / n, s[1] / n, s[2] / n])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KappaError {
    #[error("rating vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no items to compare")]
    Empty,
    #[error("rating matrix rows must share one width and one rater total")]
    RaggedMatrix,
    #[error("need at least two raters, got {0}")]
    TooFewRaters(u64),
}

/// Two-rater chance-corrected agreement over arbitrary category labels.
/// Returns 1 when agreement is perfect, including when both raters used a
/// single identical category.
pub fn cohen_kappa<T: Eq + Hash>(a: &[T], b: &[T]) -> Result<f64, KappaError> {
    if a.len() != b.len() {
        return Err(KappaError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(KappaError::Empty);
    }
    let n = a.len() as f64;
    let mut agree = 0usize;
    let mut ma: HashMap<&T, usize> = HashMap::new();
    let mut mb: HashMap<&T, usize> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        if x == y {
            agree += 1;
        }
        *ma.entry(x).or_default() += 1;
        *mb.entry(y).or_default() += 1;
    }
    if agree == a.len() {
        return Ok(1.0);
    }
    let po = agree as f64 / n;
    let pe: f64 = ma
        .iter()
        .map(|(k, &ca)| ca as f64 / n * mb.get(k).copied().unwrap_or(0) as f64 / n)
        .sum();
    if pe >= 1.0 {
        return Ok(1.0);
    }
    Ok((po - pe) / (1.0 - pe))
}

/// Cohen's kappa from a square confusion matrix (`rows`: rater A's
/// category, `cols`: rater B's).
pub fn cohen_kappa_from_confusion(m: &[Vec<u64>]) -> Result<f64, KappaError> {
    let k = m.len();
    if m.iter().any(|r| r.len() != k) {
        return Err(KappaError::RaggedMatrix);
    }
    let total: u64 = m.iter().flatten().sum();
    if total == 0 {
        return Err(KappaError::Empty);
    }
    let n = total as f64;
    let diag: u64 = (0..k).map(|i| m[i][i]).sum();
    if diag == total {
        return Ok(1.0);
    }
    let po = diag as f64 / n;
    let pe: f64 = (0..k)
        .map(|i| {
            let row: u64 = m[i].iter().sum();
            let col: u64 = m.iter().map(|r| r[i]).sum();
            row as f64 / n * col as f64 / n
        })
        .sum();
    if pe >= 1.0 {
        return Ok(1.0);
    }
    Ok((po - pe) / (1.0 - pe))
}

/// Fleiss' kappa from per-item category counts; every row must sum to the
/// same number of raters.
pub fn fleiss_kappa(m: &[Vec<u64>]) -> Result<f64, KappaError> {
    let first = m.first().ok_or(KappaError::Empty)?;
    let categories = first.len();
    let raters: u64 = first.iter().sum();
    if m.iter().any(|r| r.len() != categories || r.iter().sum::<u64>() != raters) {
        return Err(KappaError::RaggedMatrix);
    }
    if raters < 2 {
        return Err(KappaError::TooFewRaters(raters));
    }
    let items = m.len() as f64;
    let n = raters as f64;

    let p_bar = m
        .iter()
        .map(|row| {
            let sq: f64 = row.iter().map(|&c| (c * c) as f64).sum();
            (sq - n) / (n * (n - 1.0))
        })
        .sum::<f64>()
        / items;
    let pe_bar: f64 = (0..categories)
        .map(|j| {
            let pj = m.iter().map(|r| r[j]).sum::<u64>() as f64 / (items * n);
            pj * pj
        })
        .sum();
    if pe_bar >= 1.0 {
        return Ok(1.0);
    }
    Ok((p_bar - pe_bar) / (1.0 - pe_bar))
}

/// Category counts per item from one label vector per rater.
pub fn rating_matrix(raters: &[Vec<u8>], categories: &[u8]) -> Result<Vec<Vec<u64>>, KappaError> {
    let items = raters.first().map(Vec::len).ok_or(KappaError::Empty)?;
    if let Some(r) = raters.iter().find(|r| r.len() != items) {
        return Err(KappaError::LengthMismatch(items, r.len()));
    }
    Ok((0..items)
        .map(|i| {
            categories
                .iter()
                .map(|c| raters.iter().filter(|r| r[i] == *c).count() as u64)
                .collect()
        })
        .collect())
}
