//! Deterministic synthetic audio and a scripted nine-answer input stream,
//! for tests, demos and offline runs.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::prosody::AudioFrame;
use crate::session::Input;

pub const SAMPLE_RATE: u32 = 16_000;

fn samples_for(ms: u64, sample_rate: u32) -> usize {
    (ms * sample_rate as u64 / 1000) as usize
}

pub fn sine(freq: f64, ms: u64, amp: f64, sample_rate: u32) -> Vec<f32> {
    (0..samples_for(ms, sample_rate))
        .map(|i| (amp * (TAU * freq * i as f64 / sample_rate as f64).sin()) as f32)
        .collect()
}

pub fn sawtooth(freq: f64, ms: u64, amp: f64, sample_rate: u32) -> Vec<f32> {
    (0..samples_for(ms, sample_rate))
        .map(|i| {
            let phase = (freq * i as f64 / sample_rate as f64).fract();
            (amp * (2.0 * phase - 1.0)) as f32
        })
        .collect()
}

/// Phase-continuous sine whose frequency moves linearly from `f_start` to
/// `f_end`.
pub fn sweep(f_start: f64, f_end: f64, ms: u64, amp: f64, sample_rate: u32) -> Vec<f32> {
    let n = samples_for(ms, sample_rate);
    let mut phase = 0.0f64;
    (0..n)
        .map(|i| {
            let f = f_start + (f_end - f_start) * i as f64 / n.max(1) as f64;
            let s = amp * phase.sin();
            phase = (phase + TAU * f / sample_rate as f64) % TAU;
            s as f32
        })
        .collect()
}

/// Uniform white noise in [-amp, amp].
pub fn noise(ms: u64, amp: f64, sample_rate: u32, rng: &mut impl Rng) -> Vec<f32> {
    (0..samples_for(ms, sample_rate))
        .map(|_| rng.gen_range(-amp..=amp) as f32)
        .collect()
}

pub fn add_noise(signal: &mut [f32], amp: f64, rng: &mut impl Rng) {
    for s in signal {
        *s += rng.gen_range(-amp..=amp) as f32;
    }
}

/// Splits a signal into consecutive frames of `chunk_ms`.
pub fn chunk(samples: &[f32], sample_rate: u32, start_ms: u64, chunk_ms: u64) -> Vec<AudioFrame> {
    let per = samples_for(chunk_ms, sample_rate).max(1);
    samples
        .chunks(per)
        .enumerate()
        .map(|(i, c)| AudioFrame::new(c.to_vec(), sample_rate, start_ms + i as u64 * chunk_ms))
        .collect()
}

pub const ANSWERS: [&str; 9] = [
    "I think I would love to be known for my music, it would make me really happy",
    "A perfect day is a long walk in the mountains with my family and a great dinner",
    "I would invite my grandmother because I miss her and she was wonderful",
    "I would want to know if the people I care about will be safe and healthy",
    "The worst memory is when my father was sick and I felt devastated and scared",
    "Finishing my degree while working two jobs, I am very proud of that",
    "I can be quiet at first but I am loyal and I will always show up for you",
    "I would save the old photo albums because those memories are irreplaceable",
    "I once failed an important exam and felt ashamed for a long time",
];

const ONSET_MS: u64 = 600;
const NOISE_AMP: f64 = 0.01;
const SPEECH_AMP: f64 = 0.3;

/// Audio for one spoken answer: a noise lead-in, a rising phrase, a pause
/// that qualifies for a backchannel, a falling phrase, and a closing pause
/// long enough to end the turn.
pub fn answer_audio(rng: &mut impl Rng) -> Vec<f32> {
    let sr = SAMPLE_RATE;
    let mut out = noise(ONSET_MS, NOISE_AMP, sr, rng);
    let mut phrase = sweep(180.0, 280.0, 1600, SPEECH_AMP, sr);
    add_noise(&mut phrase, NOISE_AMP, rng);
    out.extend(phrase);
    out.extend(noise(1000, NOISE_AMP, sr, rng));
    let mut phrase = sweep(260.0, 170.0, 1200, SPEECH_AMP, sr);
    add_noise(&mut phrase, NOISE_AMP, rng);
    out.extend(phrase);
    out.extend(noise(2600, NOISE_AMP, sr, rng));
    out
}

/// A recorded session: for each of the nine questions, the typed transcript
/// of the answer followed by its audio in 100 ms frames on one continuous
/// clock. The text chunk carries the timestamp of the answer's onset.
pub fn recorded_inputs(seed: u64) -> Vec<Input> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::new();
    let mut t = 0;
    for answer in ANSWERS {
        let audio = answer_audio(&mut rng);
        inputs.push(Input::Text {
            chunk: answer.to_string(),
            t: t + ONSET_MS,
        });
        let frames = chunk(&audio, SAMPLE_RATE, t, 100);
        t += frames.len() as u64 * 100;
        inputs.extend(frames.into_iter().map(Input::Audio));
    }
    inputs
}
