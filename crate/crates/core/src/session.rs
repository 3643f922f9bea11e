//! The nine-question protocol under one listening condition.
//!
//! `Session` is a sans-IO state machine: inputs go in through `ingest`, and
//! the side effects it needs (sentiment classification, listener replies,
//! asking the next question) come back out as `Action`s for the host to
//! perform. `Driver` is a synchronous host for CLI runs and tests.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backchannel::{
    classify_sentiment, BackchannelAct, BackchannelInventory, SelectorState, SentimentBackend, SentimentClass,
    SentimentResult,
};
use crate::bop::{BopConfig, BopState};
use crate::completion::CompletionClient;
use crate::listener::{generate_response, ListenerConfig, ListenerResponse, ScriptedFallbacks, Turn};
use crate::prosody::{AudioFrame, ProsodyConfig, ProsodyError, ProsodyStream, VadConfig};
pub use crate::transcript::Condition;
use crate::transcript::{EventKind, Transcript, TranscriptEvent};

pub const QUESTIONS: [&str; 9] = [
    "Would you like to be famous? In what way?",
    "What would constitute a \"perfect\" day for you?",
    "Given the choice of anyone in the world, whom would you want as a dinner guest?",
    "If a crystal ball could tell you the truth about yourself, your life, the future, or anything else, what would you want to know?",
    "What is your most terrible memory?",
    "What is the greatest accomplishment of your life?",
    "If you were going to become a close friend with your partner, please share what would be important for them to know.",
    "Imagine your house, containing everything you own, catches fire. After saving your loved ones and pets, you have time to safely make a final dash to save any one item. What would it be? Why?",
    "Of all the people in your family, whose death would you find most disturbing? Why?",
];

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("operation not valid in phase {0:?}")]
    WrongPhase(Phase),
    #[error(transparent)]
    Prosody(#[from] ProsodyError),
    #[error(transparent)]
    Bop(#[from] crate::bop::BopError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Asking,
    Listening,
    Responding,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub prosody: ProsodyConfig,
    pub vad: VadConfig,
    pub bop: BopConfig,
    /// Continuous pause that ends an answer.
    pub turn_silence_ms: u64,
    /// Speech required before a pause can end an answer.
    pub min_answer_ms: u64,
    pub inventory: BackchannelInventory,
    pub listener: ListenerConfig,
    /// Emit one backchannel when a text-only turn is finalized, since typed
    /// input carries no prosody.
    pub text_mode_backchannel: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            prosody: ProsodyConfig::default(),
            vad: VadConfig::default(),
            bop: BopConfig::default(),
            turn_silence_ms: 2000,
            min_answer_ms: 1000,
            inventory: BackchannelInventory::default(),
            listener: ListenerConfig::default(),
            text_mode_backchannel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    Audio(AudioFrame),
    Text { chunk: String, t: u64 },
    EndOfTurn { t: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Backchannel(BackchannelAct),
    /// Classify `text`; report back through `Session::sentiment_ready`.
    ClassifySentiment { request: u64, text: String },
    /// Produce a listener reply; report back through
    /// `Session::complete_response`.
    GenerateResponse {
        utterance: String,
        history: Vec<Turn>,
        question_index: usize,
    },
    /// The answer is finished and the next question can be asked.
    TurnComplete,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Prompt {
    Question { index: usize, text: &'static str },
    SessionComplete,
}

#[derive(Debug, Clone)]
pub struct Session {
    condition: Condition,
    cfg: SessionConfig,
    question_index: usize,
    phase: Phase,
    transcript: Transcript,
    prosody: ProsodyStream,
    bop: BopState,
    selector: SelectorState,
    clock: u64,
    // current answer
    partial: Vec<String>,
    turn_start: u64,
    first_activity: Option<u64>,
    next_request: u64,
    turn_first_request: u64,
    latest_sentiment: Option<(u64, SentimentResult)>,
    last_backchannel: Option<u64>,
    history: Vec<Turn>,
    held: usize,
}

impl Session {
    pub fn new(
        session_id: impl Into<String>,
        condition: Condition,
        cfg: SessionConfig,
        created_at: impl Into<String>,
    ) -> Self {
        Self {
            condition,
            prosody: ProsodyStream::new(cfg.prosody),
            bop: BopState::new(cfg.vad),
            cfg,
            question_index: 1,
            phase: Phase::Asking,
            transcript: Transcript::new(session_id, condition, created_at),
            selector: SelectorState::default(),
            clock: 0,
            partial: Vec::new(),
            turn_start: 0,
            first_activity: None,
            next_request: 1,
            turn_first_request: 1,
            latest_sentiment: None,
            last_backchannel: None,
            history: Vec::new(),
            held: 0,
        }
    }

    pub fn id(&self) -> &str {
        &self.transcript.header.session_id
    }

    pub fn condition(&self) -> Condition {
        self.condition
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn question_index(&self) -> usize {
        self.question_index
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    /// Inputs that arrived while the listener was responding and were
    /// discarded.
    pub fn held_inputs(&self) -> usize {
        self.held
    }

    pub fn current_sentiment(&self) -> SentimentClass {
        self.latest_sentiment
            .map(|(_, r)| r.class)
            .unwrap_or(SentimentClass::Neutral)
    }

    fn tick(&mut self, t: u64) -> u64 {
        self.clock = self.clock.max(t);
        self.clock
    }

    fn record(&mut self, t: u64, kind: EventKind) {
        let t = self.tick(t);
        self.transcript.events.push(TranscriptEvent { t, kind });
    }

    /// Asks the current question, or ends the session once all nine have
    /// been answered.
    pub fn next_prompt(&mut self, now: u64) -> Result<Prompt, SessionError> {
        match self.phase {
            Phase::Done => return Ok(Prompt::SessionComplete),
            Phase::Asking => {}
            other => return Err(SessionError::WrongPhase(other)),
        }
        if self.question_index > QUESTIONS.len() {
            self.phase = Phase::Done;
            self.record(now, EventKind::SessionEnded);
            return Ok(Prompt::SessionComplete);
        }
        let index = self.question_index;
        let text = QUESTIONS[index - 1];
        self.record(
            now,
            EventKind::QuestionAsked {
                index,
                text: text.to_string(),
            },
        );
        self.phase = Phase::Listening;
        self.turn_start = self.clock;
        self.partial.clear();
        self.first_activity = None;
        self.turn_first_request = self.next_request;
        self.latest_sentiment = None;
        self.bop.new_turn();
        Ok(Prompt::Question { index, text })
    }

    pub fn ingest(&mut self, input: Input) -> Result<Vec<Action>, SessionError> {
        match self.phase {
            Phase::Listening => {}
            Phase::Responding => {
                self.held += 1;
                return Ok(Vec::new());
            }
            other => return Err(SessionError::WrongPhase(other)),
        }
        match input {
            Input::Audio(frame) => self.ingest_audio(&frame),
            Input::Text { chunk, t } => {
                let t = self.tick(t);
                if chunk.trim().is_empty() {
                    return Ok(Vec::new());
                }
                self.first_activity.get_or_insert(t);
                self.partial.push(chunk.trim().to_string());
                if !self.condition.backchannels() {
                    return Ok(Vec::new());
                }
                let request = self.next_request;
                self.next_request += 1;
                Ok(vec![Action::ClassifySentiment {
                    request,
                    text: self.partial_text(),
                }])
            }
            Input::EndOfTurn { t } => {
                let t = self.tick(t);
                Ok(self.finalize(t))
            }
        }
    }

    fn ingest_audio(&mut self, frame: &AudioFrame) -> Result<Vec<Action>, SessionError> {
        let mut actions = Vec::new();
        let frames = self.prosody.push(frame)?;
        for pf in frames {
            let now = self.tick(pf.time);
            let event = self.bop.step(&pf, &self.cfg.bop)?;
            if self.first_activity.is_none() && self.bop.speech_total_ms(now) > 0 {
                self.first_activity = Some(now);
            }
            if let Some(event) = event {
                if let Some(act) = self.try_backchannel(event.time) {
                    actions.push(Action::Backchannel(act));
                }
            }
            if self.end_of_turn(now) {
                actions.extend(self.finalize(now));
                break;
            }
        }
        Ok(actions)
    }

    fn try_backchannel(&mut self, t: u64) -> Option<BackchannelAct> {
        if !self.condition.backchannels() {
            return None;
        }
        if let Some(last) = self.last_backchannel {
            if t < last + self.cfg.bop.min_interval_ms {
                return None;
            }
        }
        let class = self.current_sentiment();
        let act = self.selector.select(&self.cfg.inventory, class, t).ok()?;
        self.last_backchannel = Some(t);
        self.transcript.events.push(TranscriptEvent::backchannel(&act));
        Some(act)
    }

    /// True once the answer has been followed by `turn_silence_ms` of pause
    /// and contains at least `min_answer_ms` of speech.
    pub fn end_of_turn(&self, now: u64) -> bool {
        if self.phase != Phase::Listening {
            return false;
        }
        let paused = self.bop.pause_ms(now).unwrap_or(0) >= self.cfg.turn_silence_ms;
        paused && self.bop.speech_total_ms(now) >= self.cfg.min_answer_ms
    }

    /// Reports a finished classification. Results for earlier turns, or
    /// older than the latest applied result, are ignored.
    pub fn sentiment_ready(&mut self, request: u64, result: SentimentResult) {
        if request < self.turn_first_request {
            return;
        }
        if self.latest_sentiment.is_some_and(|(r, _)| r > request) {
            return;
        }
        self.latest_sentiment = Some((request, result));
    }

    fn partial_text(&self) -> String {
        self.partial.join(" ")
    }

    fn finalize(&mut self, t: u64) -> Vec<Action> {
        let text = self.partial_text();
        let start = self.first_activity.unwrap_or(self.turn_start).min(t);
        self.record(t, EventKind::UserUtterance { text: text.clone(), start, end: t });

        let mut actions = Vec::new();
        if self.cfg.text_mode_backchannel && !text.is_empty() {
            if let Some(act) = self.try_backchannel(t) {
                actions.push(Action::Backchannel(act));
            }
        }
        let history = self.history.clone();
        self.history.push(Turn {
            speaker: text.clone(),
            listener: None,
        });
        if self.condition.active_listening() {
            self.phase = Phase::Responding;
            actions.push(Action::GenerateResponse {
                utterance: text,
                history,
                question_index: self.question_index,
            });
        } else {
            self.advance();
            actions.push(Action::TurnComplete);
        }
        actions
    }

    fn advance(&mut self) {
        self.question_index += 1;
        self.phase = Phase::Asking;
        self.partial.clear();
    }

    /// Records the listener reply and returns to asking.
    pub fn complete_response(&mut self, response: ListenerResponse, now: u64) -> Result<(), SessionError> {
        if self.phase != Phase::Responding {
            return Err(SessionError::WrongPhase(self.phase));
        }
        let t = self.tick(now);
        if let Some(turn) = self.history.last_mut() {
            turn.listener = Some(response.text.clone());
        }
        self.transcript.events.push(TranscriptEvent::response(t, &response));
        self.advance();
        Ok(())
    }
}

/// Runs a session synchronously: actions are performed inline, and the next
/// question is asked as soon as a turn completes.
pub struct Driver<'a> {
    pub sentiment: &'a dyn SentimentBackend,
    pub listener: &'a dyn CompletionClient,
    pub fallbacks: ScriptedFallbacks,
}

impl<'a> Driver<'a> {
    pub fn new(sentiment: &'a dyn SentimentBackend, listener: &'a dyn CompletionClient) -> Self {
        Self {
            sentiment,
            listener,
            fallbacks: ScriptedFallbacks::default(),
        }
    }

    pub fn start(&self, session: &mut Session) -> Result<Prompt, SessionError> {
        session.next_prompt(session.clock())
    }

    /// Feeds one input and performs every resulting action. Returns the
    /// actions and, if a turn completed, the prompt that followed.
    pub fn feed(&self, session: &mut Session, input: Input) -> Result<(Vec<Action>, Option<Prompt>), SessionError> {
        let actions = session.ingest(input)?;
        let mut prompt = None;
        for action in &actions {
            match action {
                Action::ClassifySentiment { request, text } => {
                    // a failed classification leaves the previous class in place
                    if let Ok(result) = classify_sentiment(text, self.sentiment) {
                        session.sentiment_ready(*request, result);
                    }
                }
                Action::GenerateResponse {
                    utterance,
                    history,
                    question_index,
                } => {
                    let response = generate_response(
                        utterance,
                        history,
                        self.listener,
                        &self.fallbacks,
                        *question_index,
                        &session.config().listener,
                    );
                    session.complete_response(response, session.clock())?;
                    prompt = Some(session.next_prompt(session.clock())?);
                }
                Action::TurnComplete => prompt = Some(session.next_prompt(session.clock())?),
                Action::Backchannel(_) => {}
            }
        }
        Ok((actions, prompt))
    }
}
