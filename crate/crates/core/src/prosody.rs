//! Per-hop acoustic features (RMS energy, F0, voicing) and speech/pause
//! segmentation.
//!
//! F0 is estimated with a YIN-style cumulative mean normalized difference
//! function. The first lag whose normalized difference falls below the voicing
//! threshold is refined to its local minimum and then by parabolic
//! interpolation.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProsodyError {
    #[error("frame has {got} samples, pitch search needs at least {need}")]
    InsufficientSamples { got: usize, need: usize },
    #[error("invalid sample rate {0}")]
    InvalidSampleRate(u32),
    #[error("frame at {got} ms arrived after frame at {last} ms")]
    OutOfOrderFrame { last: u64, got: u64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mono PCM samples normalized to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFrame {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    /// Milliseconds since session start.
    pub start_time: u64,
}

impl AudioFrame {
    pub fn new(samples: Vec<f32>, sample_rate: u32, start_time: u64) -> Self {
        Self {
            samples,
            sample_rate,
            start_time,
        }
    }

    pub fn duration_ms(&self) -> u64 {
        if self.sample_rate == 0 {
            return 0;
        }
        self.samples.len() as u64 * 1000 / self.sample_rate as u64
    }

    /// Decodes little-endian signed 16-bit PCM.
    pub fn from_pcm16_le(bytes: &[u8], sample_rate: u32, start_time: u64) -> Self {
        let samples = bytes
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
            .collect();
        Self::new(samples, sample_rate, start_time)
    }

    /// Encodes as little-endian signed 16-bit PCM, clipping to [-1, 1].
    pub fn to_pcm16_le(&self) -> Vec<u8> {
        self.samples
            .iter()
            .flat_map(|s| ((s.clamp(-1.0, 1.0) * 32767.0).round() as i16).to_le_bytes())
            .collect()
    }
}

/// One hop of acoustic measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProsodyFrame {
    #[serde(rename = "t")]
    pub time: u64,
    #[serde(rename = "f0")]
    pub f0_hz: Option<f64>,
    pub energy: f64,
    pub voiced: bool,
}

impl ProsodyFrame {
    pub fn unvoiced(time: u64, energy: f64) -> Self {
        Self {
            time,
            f0_hz: None,
            energy,
            voiced: false,
        }
    }

    pub fn voiced(time: u64, energy: f64, f0_hz: f64) -> Self {
        Self {
            time,
            f0_hz: Some(f0_hz),
            energy,
            voiced: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProsodyConfig {
    pub f0_min_hz: f64,
    pub f0_max_hz: f64,
    /// Upper bound on the normalized difference for a lag to count as periodic.
    pub voicing_threshold: f64,
    pub window_ms: u64,
    pub hop_ms: u64,
    /// Frames quieter than this RMS skip the pitch search.
    pub silence_rms: f64,
}

impl Default for ProsodyConfig {
    fn default() -> Self {
        Self {
            f0_min_hz: 75.0,
            f0_max_hz: 500.0,
            voicing_threshold: 0.15,
            window_ms: 25,
            hop_ms: 10,
            silence_rms: 1e-4,
        }
    }
}

impl ProsodyConfig {
    fn max_lag(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 / self.f0_min_hz).ceil() as usize
    }

    fn min_lag(&self, sample_rate: u32) -> usize {
        ((sample_rate as f64 / self.f0_max_hz).floor() as usize).max(2)
    }

    /// Smallest frame the pitch search accepts: one and a half periods of
    /// the lowest admissible F0.
    pub fn min_samples(&self, sample_rate: u32) -> usize {
        self.max_lag(sample_rate) * 3 / 2
    }

    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (sample_rate as u64 * self.window_ms / 1000) as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (sample_rate as u64 * self.hop_ms / 1000) as usize
    }
}

pub fn rms(samples: &[f32]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let sum: f64 = samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
    (sum / samples.len() as f64).sqrt()
}

/// Measures one analysis window. The frame's `start_time` becomes the
/// result's timestamp.
pub fn analyze_frame(frame: &AudioFrame, cfg: &ProsodyConfig) -> Result<ProsodyFrame, ProsodyError> {
    if frame.sample_rate == 0 {
        return Err(ProsodyError::InvalidSampleRate(frame.sample_rate));
    }
    let need = cfg.min_samples(frame.sample_rate);
    if frame.samples.len() < need {
        return Err(ProsodyError::InsufficientSamples {
            got: frame.samples.len(),
            need,
        });
    }
    let energy = rms(&frame.samples);
    if energy < cfg.silence_rms {
        return Ok(ProsodyFrame::unvoiced(frame.start_time, energy));
    }
    match estimate_f0(&frame.samples, frame.sample_rate, cfg) {
        Some(f0) => Ok(ProsodyFrame::voiced(frame.start_time, energy, f0)),
        None => Ok(ProsodyFrame::unvoiced(frame.start_time, energy)),
    }
}

fn estimate_f0(samples: &[f32], sample_rate: u32, cfg: &ProsodyConfig) -> Option<f64> {
    let max_lag = cfg.max_lag(sample_rate).min(samples.len() - 1);
    let min_lag = cfg.min_lag(sample_rate);
    let width = samples.len() - max_lag;
    if min_lag >= max_lag || width == 0 {
        return None;
    }

    // difference function d(tau) over a fixed integration width
    let mut diff = vec![0.0f64; max_lag + 1];
    for (tau, d) in diff.iter_mut().enumerate().skip(1) {
        let mut acc = 0.0;
        for i in 0..width {
            let delta = samples[i] as f64 - samples[i + tau] as f64;
            acc += delta * delta;
        }
        *d = acc;
    }

    // cumulative mean normalization
    let mut cmnd = vec![1.0f64; max_lag + 1];
    let mut running = 0.0;
    for tau in 1..=max_lag {
        running += diff[tau];
        cmnd[tau] = if running > 0.0 {
            diff[tau] * tau as f64 / running
        } else {
            1.0
        };
    }

    let mut tau = min_lag;
    let mut found = None;
    while tau <= max_lag {
        if cmnd[tau] < cfg.voicing_threshold {
            while tau < max_lag && cmnd[tau + 1] < cmnd[tau] {
                tau += 1;
            }
            found = Some(tau);
            break;
        }
        tau += 1;
    }
    let tau = found?;

    let refined = if tau > 1 && tau < max_lag {
        let (a, b, c) = (cmnd[tau - 1], cmnd[tau], cmnd[tau + 1]);
        let denom = a - 2.0 * b + c;
        if denom.abs() > f64::EPSILON {
            tau as f64 + 0.5 * (a - c) / denom
        } else {
            tau as f64
        }
    } else {
        tau as f64
    };

    let f0 = sample_rate as f64 / refined;
    (cfg.f0_min_hz..=cfg.f0_max_hz).contains(&f0).then_some(f0)
}

/// Slices an incoming audio stream into overlapping analysis windows and
/// emits one `ProsodyFrame` per hop.
#[derive(Debug, Clone)]
pub struct ProsodyStream {
    cfg: ProsodyConfig,
    sample_rate: Option<u32>,
    buffer: Vec<f32>,
    /// Session time of `buffer[0]`, in samples since `origin_ms`.
    buffer_offset: u64,
    origin_ms: u64,
    last_input_end: Option<u64>,
}

impl ProsodyStream {
    pub fn new(cfg: ProsodyConfig) -> Self {
        Self {
            cfg,
            sample_rate: None,
            buffer: Vec::new(),
            buffer_offset: 0,
            origin_ms: 0,
            last_input_end: None,
        }
    }

    pub fn config(&self) -> &ProsodyConfig {
        &self.cfg
    }

    fn restart(&mut self, rate: u32, start_ms: u64) {
        self.sample_rate = Some(rate);
        self.buffer.clear();
        self.buffer_offset = 0;
        self.origin_ms = start_ms;
    }

    /// Drops buffered audio; the next frame starts a fresh timeline.
    pub fn reset(&mut self) {
        self.sample_rate = None;
        self.buffer.clear();
        self.buffer_offset = 0;
        self.last_input_end = None;
    }

    pub fn push(&mut self, frame: &AudioFrame) -> Result<Vec<ProsodyFrame>, ProsodyError> {
        if frame.sample_rate == 0 {
            return Err(ProsodyError::InvalidSampleRate(0));
        }
        if let Some(end) = self.last_input_end {
            if frame.start_time + self.cfg.hop_ms < end {
                return Err(ProsodyError::OutOfOrderFrame {
                    last: end,
                    got: frame.start_time,
                });
            }
        }
        let rate = frame.sample_rate;
        let expected_ms = self.sample_rate.map(|r| {
            self.origin_ms + (self.buffer_offset + self.buffer.len() as u64) * 1000 / r as u64
        });
        match (self.sample_rate, expected_ms) {
            (Some(r), Some(expected))
                if r == rate && frame.start_time <= expected + self.cfg.hop_ms => {}
            _ => self.restart(rate, frame.start_time),
        }
        self.buffer.extend_from_slice(&frame.samples);
        self.last_input_end = Some(frame.start_time + frame.duration_ms());

        let window = self.cfg.window_samples(rate);
        let hop = self.cfg.hop_samples(rate).max(1);
        let mut out = Vec::new();
        let mut consumed = 0usize;
        while self.buffer.len() - consumed >= window {
            let at = self.buffer_offset + consumed as u64;
            let time = self.origin_ms + at * 1000 / rate as u64;
            let slice = AudioFrame::new(
                self.buffer[consumed..consumed + window].to_vec(),
                rate,
                time,
            );
            out.push(analyze_frame(&slice, &self.cfg)?);
            consumed += hop;
        }
        self.buffer.drain(..consumed);
        self.buffer_offset += consumed as u64;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityKind {
    Speech,
    Pause,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivitySegment {
    pub kind: ActivityKind,
    pub start: u64,
    pub end: u64,
}

impl ActivitySegment {
    pub fn duration(&self) -> u64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum EnergyThreshold {
    Fixed { value: f64 },
    /// `factor` times the mean energy of the first `window_ms` of the
    /// stream, clamped to `[min, max]`. Until calibrated, `min` applies.
    Calibrated {
        factor: f64,
        window_ms: u64,
        min: f64,
        max: f64,
    },
}

impl Default for EnergyThreshold {
    fn default() -> Self {
        EnergyThreshold::Calibrated {
            factor: 3.0,
            window_ms: 500,
            min: 0.01,
            max: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VadConfig {
    pub threshold: EnergyThreshold,
    pub hangover_ms: u64,
    /// Frame spacing; closes the final segment at `last frame + hop_ms`.
    pub hop_ms: u64,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            threshold: EnergyThreshold::default(),
            hangover_ms: 200,
            hop_ms: 10,
        }
    }
}

impl VadConfig {
    pub fn fixed(threshold: f64) -> Self {
        Self {
            threshold: EnergyThreshold::Fixed { value: threshold },
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
struct Calibration {
    first_time: Option<u64>,
    sum: f64,
    count: usize,
    settled: Option<f64>,
}

/// Streaming speech/pause segmentation with hangover.
#[derive(Debug, Clone)]
pub struct Segmenter {
    cfg: VadConfig,
    calibration: Calibration,
    open: Option<(ActivityKind, u64)>,
    /// Start of a below-threshold dip inside an open Speech segment.
    dip_start: Option<u64>,
    last_time: Option<u64>,
    closed_speech_ms: u64,
}

impl Segmenter {
    pub fn new(cfg: VadConfig) -> Self {
        Self {
            cfg,
            calibration: Calibration {
                first_time: None,
                sum: 0.0,
                count: 0,
                settled: None,
            },
            open: None,
            dip_start: None,
            last_time: None,
            closed_speech_ms: 0,
        }
    }

    pub fn config(&self) -> &VadConfig {
        &self.cfg
    }

    pub fn threshold(&self) -> f64 {
        match self.cfg.threshold {
            EnergyThreshold::Fixed { value } => value,
            EnergyThreshold::Calibrated { min, .. } => self.calibration.settled.unwrap_or(min),
        }
    }

    fn observe_for_calibration(&mut self, frame: &ProsodyFrame) {
        if let EnergyThreshold::Calibrated {
            factor,
            window_ms,
            min,
            max,
        } = self.cfg.threshold
        {
            if self.calibration.settled.is_some() {
                return;
            }
            let first = *self.calibration.first_time.get_or_insert(frame.time);
            if frame.time < first + window_ms {
                self.calibration.sum += frame.energy;
                self.calibration.count += 1;
            } else {
                let floor = if self.calibration.count > 0 {
                    self.calibration.sum / self.calibration.count as f64
                } else {
                    0.0
                };
                self.calibration.settled = Some((factor * floor).clamp(min, max));
            }
        }
    }

    /// Feeds one frame; returns segments that closed as a result.
    pub fn push(&mut self, frame: &ProsodyFrame) -> Result<Vec<ActivitySegment>, ProsodyError> {
        if let Some(last) = self.last_time {
            if frame.time <= last {
                return Err(ProsodyError::OutOfOrderFrame {
                    last,
                    got: frame.time,
                });
            }
        }
        self.last_time = Some(frame.time);
        self.observe_for_calibration(frame);
        let active = frame.energy >= self.threshold();
        let t = frame.time;
        let mut closed = Vec::new();

        match self.open {
            None => self.open = Some((kind_of(active), t)),
            Some((ActivityKind::Speech, start)) => {
                if active {
                    self.dip_start = None;
                } else {
                    let dip = *self.dip_start.get_or_insert(t);
                    if t + self.cfg.hop_ms - dip >= self.cfg.hangover_ms {
                        closed.push(self.close(ActivityKind::Speech, start, dip));
                        self.open = Some((ActivityKind::Pause, dip));
                        self.dip_start = None;
                    }
                }
            }
            Some((ActivityKind::Pause, start)) => {
                if active {
                    closed.push(self.close(ActivityKind::Pause, start, t));
                    self.open = Some((ActivityKind::Speech, t));
                }
            }
        }
        Ok(closed)
    }

    fn close(&mut self, kind: ActivityKind, start: u64, end: u64) -> ActivitySegment {
        if kind == ActivityKind::Speech {
            self.closed_speech_ms += end - start;
        }
        ActivitySegment { kind, start, end }
    }

    /// Closes whatever is open at `last frame + hop`.
    pub fn finish(&mut self) -> Vec<ActivitySegment> {
        let Some(last) = self.last_time else {
            return Vec::new();
        };
        let end = last + self.cfg.hop_ms;
        let mut out = Vec::new();
        match self.open.take() {
            Some((ActivityKind::Speech, start)) => match self.dip_start.take() {
                Some(dip) if dip > start => {
                    out.push(self.close(ActivityKind::Speech, start, dip));
                    out.push(self.close(ActivityKind::Pause, dip, end));
                }
                _ => out.push(self.close(ActivityKind::Speech, start, end)),
            },
            Some((ActivityKind::Pause, start)) => out.push(self.close(ActivityKind::Pause, start, end)),
            None => {}
        }
        out
    }

    /// Open segment as currently resolved: kind and start time.
    pub fn current(&self) -> Option<(ActivityKind, u64)> {
        self.open
    }

    /// Length of the confirmed pause in progress at `now`.
    pub fn pause_ms(&self, now: u64) -> Option<u64> {
        match self.open {
            Some((ActivityKind::Pause, start)) => Some(now.saturating_sub(start)),
            _ => None,
        }
    }

    /// Speech accumulated since the last `new_turn`, including the
    /// open segment up to `now`.
    pub fn speech_total_ms(&self, now: u64) -> u64 {
        let open = match self.open {
            Some((ActivityKind::Speech, start)) => {
                self.dip_start.unwrap_or(now + self.cfg.hop_ms).saturating_sub(start)
            }
            _ => 0,
        };
        self.closed_speech_ms + open
    }

    /// Forgets the open segment and the speech total. Calibration and the
    /// time-ordering check carry over.
    pub fn new_turn(&mut self) {
        self.open = None;
        self.dip_start = None;
        self.closed_speech_ms = 0;
    }
}

fn kind_of(active: bool) -> ActivityKind {
    if active {
        ActivityKind::Speech
    } else {
        ActivityKind::Pause
    }
}

/// Batch segmentation: the output tiles `[first.time, last.time + hop)`.
pub fn segment_activity(frames: &[ProsodyFrame], cfg: &VadConfig) -> Result<Vec<ActivitySegment>, ProsodyError> {
    let mut seg = Segmenter::new(*cfg);
    let mut out = Vec::new();
    for f in frames {
        out.extend(seg.push(f)?);
    }
    out.extend(seg.finish());
    Ok(out)
}

/// Reads a prosody trace: one JSON object per line, blank lines ignored.
pub fn read_trace<R: BufRead>(reader: R) -> Result<Vec<ProsodyFrame>, ProsodyError> {
    let mut frames = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let frame: ProsodyFrame = serde_json::from_str(&line).map_err(|e| ProsodyError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        frames.push(frame);
    }
    Ok(frames)
}

pub fn write_trace<W: Write>(mut writer: W, frames: &[ProsodyFrame]) -> std::io::Result<()> {
    for f in frames {
        serde_json::to_writer(&mut writer, f)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
