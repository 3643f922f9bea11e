//! Rule-based backchannel opportunity prediction.
//!
//! `PP_PAUSE` fires once per pause, at the first frame where the pause has
//! lasted `pause_threshold_ms`, the speech before it lasted at least
//! `min_preceding_speech_ms`, the F0 range over the last
//! `fluctuation_window_ms` of that speech reached
//! `pitch_fluctuation_semitones`, and the previous event is at least
//! `min_interval_ms` old.

use std::collections::{BTreeSet, VecDeque};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prosody::{
    read_trace, ActivityKind, ProsodyError, ProsodyFrame, Segmenter, VadConfig,
};

#[derive(Debug, Error)]
pub enum BopError {
    #[error("frame at {got} ms arrived after frame at {last} ms")]
    OutOfOrderFrame { last: u64, got: u64 },
    #[error("trace line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<ProsodyError> for BopError {
    fn from(e: ProsodyError) -> Self {
        match e {
            ProsodyError::OutOfOrderFrame { last, got } => BopError::OutOfOrderFrame { last, got },
            ProsodyError::Parse { line, message } => BopError::Parse { line, message },
            ProsodyError::Io(e) => BopError::Io(e),
            other => BopError::InvalidConfig(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RuleId {
    #[serde(rename = "PP_PAUSE")]
    PpPause,
    #[serde(rename = "PITCH_DROP")]
    PitchDrop,
}

impl RuleId {
    pub fn as_str(self) -> &'static str {
        match self {
            RuleId::PpPause => "PP_PAUSE",
            RuleId::PitchDrop => "PITCH_DROP",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BopConfig {
    pub min_interval_ms: u64,
    pub pause_threshold_ms: u64,
    pub min_preceding_speech_ms: u64,
    pub pitch_fluctuation_semitones: f64,
    pub fluctuation_window_ms: u64,
    /// Final-syllable fall for `PITCH_DROP`, in semitones.
    pub pitch_drop_semitones: f64,
    /// Span at the end of speech inspected by `PITCH_DROP`.
    pub pitch_drop_window_ms: u64,
    pub enabled_rules: BTreeSet<RuleId>,
}

impl Default for BopConfig {
    fn default() -> Self {
        Self {
            min_interval_ms: 3000,
            pause_threshold_ms: 800,
            min_preceding_speech_ms: 1500,
            pitch_fluctuation_semitones: 4.0,
            fluctuation_window_ms: 1500,
            pitch_drop_semitones: 3.0,
            pitch_drop_window_ms: 300,
            enabled_rules: [RuleId::PpPause].into_iter().collect(),
        }
    }
}

impl BopConfig {
    pub fn validate(&self) -> Result<(), BopError> {
        let durations = [
            ("min_interval_ms", self.min_interval_ms),
            ("pause_threshold_ms", self.pause_threshold_ms),
            ("min_preceding_speech_ms", self.min_preceding_speech_ms),
            ("fluctuation_window_ms", self.fluctuation_window_ms),
            ("pitch_drop_window_ms", self.pitch_drop_window_ms),
        ];
        if let Some((name, _)) = durations.iter().find(|(_, v)| *v == 0) {
            return Err(BopError::InvalidConfig(format!("{name} must be > 0")));
        }
        if self.pause_threshold_ms >= self.min_interval_ms {
            return Err(BopError::InvalidConfig(
                "pause_threshold_ms must be below min_interval_ms".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BopEvent {
    #[serde(rename = "t")]
    pub time: u64,
    pub rule: RuleId,
    #[serde(rename = "speech_ms")]
    pub preceding_speech_ms: u64,
    pub pause_ms: u64,
}

/// Summary of the speech segment that the current pause follows.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ClosedSpeech {
    duration_ms: u64,
    fluctuation_st: f64,
    final_drop_st: f64,
}

pub fn semitones(high_hz: f64, low_hz: f64) -> f64 {
    12.0 * (high_hz / low_hz).log2()
}

#[derive(Debug, Clone)]
pub struct BopState {
    segmenter: Segmenter,
    last_event_time: Option<u64>,
    last_frame_time: Option<u64>,
    /// Voiced frames of the open speech segment, trimmed to what the rules
    /// can still look at.
    pitch: VecDeque<(u64, f64)>,
    preceding: Option<ClosedSpeech>,
    fired_this_pause: bool,
}

impl BopState {
    pub fn new(vad: VadConfig) -> Self {
        Self {
            segmenter: Segmenter::new(vad),
            last_event_time: None,
            last_frame_time: None,
            pitch: VecDeque::new(),
            preceding: None,
            fired_this_pause: false,
        }
    }

    pub fn last_event_time(&self) -> Option<u64> {
        self.last_event_time
    }

    pub fn segmenter(&self) -> &Segmenter {
        &self.segmenter
    }

    /// Starts a new answer: forgets the open segment and accumulated speech
    /// but keeps the minimum-interval clock.
    pub fn new_turn(&mut self) {
        self.segmenter.new_turn();
        self.pitch.clear();
        self.preceding = None;
        self.fired_this_pause = false;
    }

    pub fn step(&mut self, frame: &ProsodyFrame, cfg: &BopConfig) -> Result<Option<BopEvent>, BopError> {
        if let Some(last) = self.last_frame_time {
            if frame.time <= last {
                return Err(BopError::OutOfOrderFrame {
                    last,
                    got: frame.time,
                });
            }
        }
        let closed = self.segmenter.push(frame)?;
        self.last_frame_time = Some(frame.time);

        for seg in &closed {
            match seg.kind {
                ActivityKind::Speech => {
                    self.preceding = Some(self.summarize_speech(seg.start, seg.end, cfg));
                    self.fired_this_pause = false;
                }
                ActivityKind::Pause => {
                    self.preceding = None;
                    self.pitch.clear();
                }
            }
        }
        match self.segmenter.current() {
            Some((ActivityKind::Speech, _)) => {
                if let (true, Some(f0)) = (frame.voiced, frame.f0_hz) {
                    self.pitch.push_back((frame.time, f0));
                }
                let keep = cfg.fluctuation_window_ms.max(cfg.pitch_drop_window_ms)
                    + self.segmenter.config().hangover_ms
                    + self.segmenter.config().hop_ms;
                while let Some(&(t, _)) = self.pitch.front() {
                    if t + keep < frame.time {
                        self.pitch.pop_front();
                    } else {
                        break;
                    }
                }
                Ok(None)
            }
            Some((ActivityKind::Pause, start)) => Ok(self.check_pause(frame.time, start, cfg)),
            None => Ok(None),
        }
    }

    fn summarize_speech(&self, start: u64, end: u64, cfg: &BopConfig) -> ClosedSpeech {
        let in_span = |from: u64| {
            self.pitch
                .iter()
                .filter(move |(t, _)| *t >= from && *t < end)
                .map(|&(_, f)| f)
        };
        let from = end.saturating_sub(cfg.fluctuation_window_ms).max(start);
        let (lo, hi) = in_span(from).fold((f64::INFINITY, 0.0f64), |(lo, hi), f| (lo.min(f), hi.max(f)));
        let fluctuation_st = if hi > 0.0 && lo.is_finite() {
            semitones(hi, lo)
        } else {
            0.0
        };

        let drop_from = end.saturating_sub(cfg.pitch_drop_window_ms).max(start);
        let tail: Vec<f64> = in_span(drop_from).collect();
        let final_drop_st = match (tail.iter().cloned().fold(None, |m: Option<f64>, f| Some(m.map_or(f, |m| m.max(f)))), tail.last()) {
            (Some(peak), Some(&last)) => semitones(peak, last),
            _ => 0.0,
        };

        ClosedSpeech {
            duration_ms: end - start,
            fluctuation_st,
            final_drop_st,
        }
    }

    fn check_pause(&mut self, now: u64, pause_start: u64, cfg: &BopConfig) -> Option<BopEvent> {
        if self.fired_this_pause {
            return None;
        }
        let speech = self.preceding?;
        let pause_ms = now - pause_start;
        if speech.duration_ms < cfg.min_preceding_speech_ms {
            return None;
        }
        if let Some(last) = self.last_event_time {
            if now - last < cfg.min_interval_ms {
                return None;
            }
        }

        let pp_pause = cfg.enabled_rules.contains(&RuleId::PpPause)
            && pause_ms >= cfg.pause_threshold_ms
            && speech.fluctuation_st >= cfg.pitch_fluctuation_semitones;
        let pitch_drop = cfg.enabled_rules.contains(&RuleId::PitchDrop)
            && speech.final_drop_st >= cfg.pitch_drop_semitones;

        let rule = if pp_pause {
            RuleId::PpPause
        } else if pitch_drop {
            RuleId::PitchDrop
        } else {
            return None;
        };
        self.fired_this_pause = true;
        self.last_event_time = Some(now);
        Some(BopEvent {
            time: now,
            rule,
            preceding_speech_ms: speech.duration_ms,
            pause_ms,
        })
    }

    /// Length of the confirmed pause at `now`, if one is open.
    pub fn pause_ms(&self, now: u64) -> Option<u64> {
        self.segmenter.pause_ms(now)
    }

    pub fn speech_total_ms(&self, now: u64) -> u64 {
        self.segmenter.speech_total_ms(now)
    }
}

/// Folds `step` over a whole trace.
pub fn run_frames(frames: &[ProsodyFrame], vad: VadConfig, cfg: &BopConfig) -> Result<Vec<BopEvent>, BopError> {
    cfg.validate()?;
    let mut state = BopState::new(vad);
    let mut events = Vec::new();
    for f in frames {
        if let Some(e) = state.step(f, cfg)? {
            events.push(e);
        }
    }
    Ok(events)
}

/// Energy threshold applied to replayed traces, whose energies are already
/// extracted and so carry no leading silence to calibrate on.
pub const TRACE_ENERGY_THRESHOLD: f64 = 0.02;

pub fn replay_vad() -> VadConfig {
    VadConfig::fixed(TRACE_ENERGY_THRESHOLD)
}

pub fn replay_trace<R: BufRead>(reader: R, vad: VadConfig, cfg: &BopConfig) -> Result<Vec<BopEvent>, BopError> {
    let frames = read_trace(reader)?;
    run_frames(&frames, vad, cfg)
}

pub fn write_events<W: Write>(mut writer: W, events: &[BopEvent]) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut writer, e)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Builders for synthetic traces at a 10 ms hop.
pub mod synth {
    use crate::prosody::ProsodyFrame;

    pub const HOP_MS: u64 = 10;
    pub const SPEECH_ENERGY: f64 = 0.2;
    pub const SILENCE_ENERGY: f64 = 0.001;

    #[derive(Debug, Default, Clone)]
    pub struct TraceBuilder {
        frames: Vec<ProsodyFrame>,
        t: u64,
    }

    impl TraceBuilder {
        pub fn new() -> Self {
            Self::default()
        }

        pub fn now(&self) -> u64 {
            self.t
        }

        /// Voiced speech with F0 swept linearly from `f0_start` to `f0_end`.
        pub fn speech(mut self, ms: u64, f0_start: f64, f0_end: f64) -> Self {
            let n = ms / HOP_MS;
            for i in 0..n {
                let frac = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                let f0 = f0_start + (f0_end - f0_start) * frac;
                self.frames.push(ProsodyFrame::voiced(self.t, SPEECH_ENERGY, f0));
                self.t += HOP_MS;
            }
            self
        }

        pub fn silence(mut self, ms: u64) -> Self {
            for _ in 0..ms / HOP_MS {
                self.frames.push(ProsodyFrame::unvoiced(self.t, SILENCE_ENERGY));
                self.t += HOP_MS;
            }
            self
        }

        pub fn build(self) -> Vec<ProsodyFrame> {
            self.frames
        }
    }

    /// 1.6 s of speech sweeping 180 to 280 Hz followed by 2 s of silence.
    pub fn qualifying_pause() -> Vec<ProsodyFrame> {
        TraceBuilder::new().speech(1600, 180.0, 280.0).silence(2000).build()
    }

    /// 1.0 s of speech then 2 s of silence.
    pub fn short_speech() -> Vec<ProsodyFrame> {
        TraceBuilder::new().speech(1000, 180.0, 280.0).silence(2000).build()
    }

    /// Two qualifying pauses whose qualifying instants are 2.5 s apart.
    pub fn close_pair() -> Vec<ProsodyFrame> {
        TraceBuilder::new()
            .speech(1600, 180.0, 280.0)
            .silence(900)
            .speech(1600, 280.0, 180.0)
            .silence(1200)
            .build()
    }
}
