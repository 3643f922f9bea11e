//! WebAssembly bindings for the static page in `www/`. Each export takes
//! plain strings and numbers and returns a JSON document; the `*_json`
//! functions hold the logic so they can be tested natively.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rapport_core::analysis::{analyze, read_measures};
use rapport_core::bop::{replay_vad, run_frames, synth::TraceBuilder, BopConfig, RuleId};
use rapport_core::fixtures::{add_noise, chunk, sawtooth, sine, SAMPLE_RATE};
use rapport_core::prosody::{segment_activity, ProsodyConfig, ProsodyStream};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Longest trace the explorer will build, in milliseconds.
pub const MAX_TRACE_MS: u64 = 120_000;

/// Builds a frame trace from a small script, one step per line:
/// `speech <ms> <f0 start> <f0 end>` or `silence <ms>`. Blank lines and
/// lines starting with `#` are skipped.
pub fn parse_script(script: &str) -> Result<TraceBuilder, String> {
    let mut b = TraceBuilder::new();
    for (n, line) in script.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let num = |i: usize| -> Result<f64, String> {
            parts
                .get(i)
                .ok_or(format!("line {}: missing value", n + 1))?
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or(format!("line {}: `{}` is not a non-negative number", n + 1, parts[i]))
        };
        b = match parts[0] {
            "speech" if parts.len() == 4 => {
                let (a, z) = (num(2)?, num(3)?);
                if a <= 0.0 || z <= 0.0 {
                    return Err(format!("line {}: pitch must be above 0 Hz", n + 1));
                }
                b.speech(num(1)? as u64, a, z)
            }
            "silence" if parts.len() == 2 => b.silence(num(1)? as u64),
            other => return Err(format!("line {}: expected `speech ms f0 f0` or `silence ms`, got `{other}`", n + 1)),
        };
        if b.now() > MAX_TRACE_MS {
            return Err(format!("trace longer than {} s", MAX_TRACE_MS / 1000));
        }
    }
    Ok(b)
}

pub fn explore_trace_json(script: &str, pitch_drop: bool) -> Result<Value, String> {
    let frames = parse_script(script)?.build();
    let mut cfg = BopConfig::default();
    if pitch_drop {
        cfg.enabled_rules.insert(RuleId::PitchDrop);
    }
    let events = run_frames(&frames, replay_vad(), &cfg).map_err(|e| e.to_string())?;
    let segments = segment_activity(&frames, &replay_vad()).map_err(|e| e.to_string())?;
    Ok(json!({ "frames": frames, "segments": segments, "events": events }))
}

pub fn track_pitch_json(shape: &str, freq: f64, snr_db: f64, seed: u32) -> Result<Value, String> {
    let make = match shape {
        "sine" => sine,
        "sawtooth" => sawtooth,
        other => return Err(format!("unknown waveform `{other}`")),
    };
    if !(50.0..=1000.0).contains(&freq) {
        return Err("frequency must be between 50 and 1000 Hz".into());
    }
    let mut samples = make(freq, 1000, 0.5, SAMPLE_RATE);
    let power = samples.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / samples.len() as f64;
    if snr_db.is_finite() {
        // uniform noise on [-a, a] has power a^2 / 3
        let amp = (3.0 * power / 10f64.powf(snr_db / 10.0)).sqrt();
        add_noise(&mut samples, amp, &mut ChaCha8Rng::seed_from_u64(seed as u64));
    }
    let mut stream = ProsodyStream::new(ProsodyConfig::default());
    let mut frames = Vec::new();
    for f in chunk(&samples, SAMPLE_RATE, 0, 100) {
        frames.extend(stream.push(&f).map_err(|e| e.to_string())?);
    }
    let mut voiced: Vec<f64> = frames.iter().filter_map(|f| f.f0_hz).collect();
    voiced.sort_by(f64::total_cmp);
    let median = voiced.get(voiced.len() / 2).copied();
    Ok(json!({
        "frames": frames,
        "voiced_fraction": voiced.len() as f64 / frames.len().max(1) as f64,
        "median_f0": median,
        "error_pct": median.map(|m| 100.0 * (m - freq) / freq),
    }))
}

pub fn condition_stats_json(csv: &str) -> Result<Value, String> {
    let measures = read_measures(csv.as_bytes()).map_err(|e| e.to_string())?;
    if measures.is_empty() {
        return Err("no measurements found".into());
    }
    let reports = measures
        .iter()
        .map(|(name, g)| analyze(name, g).map_err(|e| format!("{name}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    serde_json::to_value(reports).map_err(|e| e.to_string())
}

fn to_js(r: Result<Value, String>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

/// Runs the opportunity detector over a scripted trace.
#[wasm_bindgen]
pub fn explore_trace(script: &str, pitch_drop: bool) -> Result<String, JsError> {
    to_js(explore_trace_json(script, pitch_drop))
}

/// Tracks the pitch of one second of a synthetic tone with added noise.
/// Pass an infinite `snr_db` for a clean tone.
#[wasm_bindgen]
pub fn track_pitch(shape: &str, freq: f64, snr_db: f64, seed: u32) -> Result<String, JsError> {
    to_js(track_pitch_json(shape, freq, snr_db, seed))
}

/// Kruskal-Wallis, Dunn and trend results for a measures CSV.
#[wasm_bindgen]
pub fn condition_stats(csv: &str) -> Result<String, JsError> {
    to_js(condition_stats_json(csv))
}
