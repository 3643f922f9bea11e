//! One line per criterion: PASS or FAIL, the elapsed time, and on failure
//! the reason. Each check compares the library against an oracle written
//! here from first principles rather than against the library itself.

// a NaN must fail a check, hence the negated comparisons in `ensure!`
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Check,
}

fn main() {
    let criteria = [
        Criterion {
            name: "effect size reproduction",
            budget: Some(Duration::from_secs(1)),
            run: effect_sizes,
        },
        Criterion {
            name: "backchannel opportunity rule suite",
            budget: Some(Duration::from_secs(10)),
            run: bop_rules,
        },
        Criterion {
            name: "pitch oracle",
            budget: Some(Duration::from_secs(5)),
            run: pitch,
        },
        Criterion {
            name: "kappa oracles",
            budget: None,
            run: kappa,
        },
        Criterion {
            name: "statistics oracles",
            budget: None,
            run: statistics,
        },
        Criterion {
            name: "listener constraint property",
            budget: None,
            run: listener,
        },
        Criterion {
            name: "condition gating",
            budget: None,
            run: gating,
        },
        Criterion {
            name: "gateway protocol",
            budget: Some(Duration::from_secs(30)),
            run: gateway,
        },
    ];

    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|()| match c.budget {
            Some(b) if elapsed > b => Err(format!("took {elapsed:?}, budget {b:?}")),
            _ => Ok(()),
        });
        match outcome {
            Ok(()) => println!("PASS  {:<38} {:>9.1} ms", c.name, elapsed.as_secs_f64() * 1e3),
            Err(why) => {
                failed += 1;
                println!("FAIL  {:<38} {:>9.1} ms  {why}", c.name, elapsed.as_secs_f64() * 1e3);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- effect size

fn effect_sizes() -> Check {
    use rapport_core::analysis::epsilon_squared;
    // (chi-square, reported epsilon squared), sixty participants
    let published = [
        (6.985, 0.118),
        (15.889, 0.269),
        (6.638, 0.112),
        (7.606, 0.128),
        (14.052, 0.238),
        (5.747, 0.097),
        (1.379, 0.023),
    ];
    for (h, want) in published {
        let got = epsilon_squared(h, 60);
        let by_hand = h / 59.0;
        ensure!((got - by_hand).abs() < 1e-12, "H={h}: {got} vs H/(n-1) {by_hand}");
        ensure!((got - want).abs() <= 0.001 + 1e-12, "H={h}: got {got:.4}, reported {want}");
    }
    Ok(())
}

// ---------------------------------------------------------------------- BOP

mod bop_oracle {
    use rapport_core::prosody::ProsodyFrame;

    pub const THRESHOLD: f64 = 0.02;
    const HOP: u64 = 10;
    const HANGOVER: u64 = 200;

    /// Recomputes qualifying instants directly from the frame list: speech
    /// runs are merged across gaps shorter than the hangover, and each pause
    /// after at least 1.5 s of speech whose last 1.5 s spans 4 semitones or
    /// more yields the first frame that is 800 ms into the pause and 3 s
    /// after the previous event.
    pub fn expected(frames: &[ProsodyFrame]) -> Vec<u64> {
        let active: Vec<bool> = frames.iter().map(|f| f.energy >= THRESHOLD).collect();
        let end_of_trace = frames.last().map_or(0, |f| f.time + HOP);

        // (speech start, speech end, end of the following pause)
        let mut spans = Vec::new();
        let mut i = 0;
        while i < frames.len() {
            if !active[i] {
                i += 1;
                continue;
            }
            let start = frames[i].time;
            let mut j = i;
            loop {
                while j < frames.len() && active[j] {
                    j += 1;
                }
                let gap_start = j;
                while j < frames.len() && !active[j] {
                    j += 1;
                }
                let gap_end = if j < frames.len() { frames[j].time } else { end_of_trace };
                let dip = if gap_start < frames.len() { frames[gap_start].time } else { end_of_trace };
                if gap_end - dip >= HANGOVER || j >= frames.len() {
                    if gap_end - dip >= HANGOVER {
                        spans.push((start, dip, gap_end));
                    }
                    break;
                }
            }
            i = j;
        }

        let mut out: Vec<u64> = Vec::new();
        for (start, end, pause_end) in spans {
            if end - start < 1500 {
                continue;
            }
            let from = start.max(end.saturating_sub(1500));
            let f0: Vec<f64> = frames
                .iter()
                .filter(|f| f.time >= from && f.time < end)
                .filter_map(|f| f.f0_hz)
                .collect();
            if f0.is_empty() {
                continue;
            }
            let hi = f0.iter().cloned().fold(f64::MIN, f64::max);
            let lo = f0.iter().cloned().fold(f64::MAX, f64::min);
            if 12.0 * (hi / lo).ln() / 2f64.ln() < 4.0 {
                continue;
            }
            let confirmed = end + HANGOVER - HOP;
            let mut t = confirmed.max(end + 800);
            if let Some(&last) = out.last() {
                t = t.max(last + 3000);
            }
            // frames exist on the hop grid up to the end of the pause
            let t = t.div_ceil(HOP) * HOP;
            if t < pause_end {
                out.push(t);
            }
        }
        out
    }
}

fn random_trace(rng: &mut impl Rng) -> Vec<rapport_core::prosody::ProsodyFrame> {
    use rapport_core::bop::synth::TraceBuilder;
    let mut b = TraceBuilder::new();
    if rng.gen_bool(0.3) {
        b = b.silence(rng.gen_range(1..=60) * 10);
    }
    for _ in 0..rng.gen_range(1..=12) {
        let f0 = rng.gen_range(120.0..260.0);
        let span: f64 = rng.gen_range(-8.0..8.0);
        b = b.speech(rng.gen_range(5..=300) * 10, f0, f0 * 2f64.powf(span / 12.0));
        b = b.silence(rng.gen_range(1..=250) * 10);
    }
    b.build()
}

fn bop_rules() -> Check {
    use rapport_core::bop::{replay_vad, run_frames, synth, BopConfig, RuleId};
    let cfg = BopConfig::default();
    let fire = |frames: &[_]| -> Result<Vec<u64>, String> {
        Ok(run_frames(frames, replay_vad(), &cfg)
            .map_err(|e| e.to_string())?
            .iter()
            .map(|e| e.time)
            .collect())
    };

    ensure!(replay_vad() == rapport_core::prosody::VadConfig::fixed(bop_oracle::THRESHOLD), "replay VAD changed");
    let canonical = [
        ("qualifying pause", synth::qualifying_pause(), vec![2400]),
        ("short speech", synth::short_speech(), vec![]),
        ("close pair", synth::close_pair(), vec![2400]),
    ];
    for (name, frames, want) in canonical {
        let got = fire(&frames)?;
        ensure!(got == want, "{name}: fired at {got:?}, expected {want:?}");
        ensure!(bop_oracle::expected(&frames) == want, "{name}: oracle disagrees with the fixture");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0xB0B);
    let mut total = 0;
    for case in 0..1000 {
        let frames = random_trace(&mut rng);
        let events = run_frames(&frames, replay_vad(), &cfg).map_err(|e| e.to_string())?;
        let got: Vec<u64> = events.iter().map(|e| e.time).collect();
        let want = bop_oracle::expected(&frames);
        ensure!(got == want, "trace {case}: fired at {got:?}, oracle {want:?}");
        for w in got.windows(2) {
            ensure!(w[1] - w[0] >= 3000, "trace {case}: events {w:?} closer than 3 s");
        }
        for e in &events {
            ensure!(e.rule == RuleId::PpPause, "trace {case}: unexpected rule");
            ensure!(e.preceding_speech_ms >= 1500, "trace {case}: {e:?} after short speech");
            ensure!(e.pause_ms >= 800, "trace {case}: {e:?} before the pause threshold");
        }
        total += got.len();
    }
    ensure!(total > 300, "random traces rarely fire ({total}); the generator is too weak");
    Ok(())
}

// -------------------------------------------------------------------- pitch

fn pitch() -> Check {
    use rapport_core::fixtures::{add_noise, chunk, sawtooth, sine, SAMPLE_RATE};
    use rapport_core::prosody::{ProsodyConfig, ProsodyStream};

    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for (shape, make) in [("sine", sine as fn(f64, u64, f64, u32) -> Vec<f32>), ("sawtooth", sawtooth)] {
        for freq in [110.0, 220.0, 440.0] {
            let clean = make(freq, 1000, 0.5, SAMPLE_RATE);
            let signal_power = clean.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / clean.len() as f64;
            // uniform noise on [-a, a] has power a^2 / 3; aim for 20 dB
            let amp = (3.0 * signal_power / 100.0).sqrt();
            let mut noisy = clean.clone();
            add_noise(&mut noisy, amp, &mut rng);
            let noise_power = noisy
                .iter()
                .zip(&clean)
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                / clean.len() as f64;
            let snr = 10.0 * (signal_power / noise_power).log10();
            ensure!(snr >= 19.5, "{shape} {freq}: test signal SNR {snr:.1} dB");

            let mut stream = ProsodyStream::new(ProsodyConfig::default());
            let mut frames = Vec::new();
            for f in chunk(&noisy, SAMPLE_RATE, 0, 100) {
                frames.extend(stream.push(&f).map_err(|e| e.to_string())?);
            }
            let voiced: Vec<f64> = frames.iter().filter_map(|f| f.f0_hz).collect();
            ensure!(
                voiced.len() * 10 >= frames.len() * 9,
                "{shape} {freq}: only {} of {} frames voiced",
                voiced.len(),
                frames.len()
            );
            for f0 in voiced {
                let ratio = f0 / freq;
                ensure!((0.97..=1.03).contains(&ratio), "{shape} {freq} Hz: estimated {f0:.1} Hz");
            }
        }
    }
    Ok(())
}

// -------------------------------------------------------------------- kappa

/// Fleiss kappa in the closed form 1 - (N n^2 - sum n_ij^2) / (N n (n-1) (1 - sum p_j^2)).
fn fleiss_closed_form(m: &[Vec<u64>]) -> f64 {
    let items = m.len() as f64;
    let raters = m[0].iter().sum::<u64>() as f64;
    let squares: f64 = m.iter().flatten().map(|&c| (c * c) as f64).sum();
    let k = m[0].len();
    let pe: f64 = (0..k)
        .map(|j| {
            let pj = m.iter().map(|row| row[j]).sum::<u64>() as f64 / (items * raters);
            pj * pj
        })
        .sum();
    1.0 - (items * raters * raters - squares) / (items * raters * (raters - 1.0) * (1.0 - pe))
}

fn kappa() -> Check {
    use rapport_core::disclosure::{cohen_kappa, cohen_kappa_from_confusion, fleiss_kappa};

    let k = cohen_kappa_from_confusion(&[vec![20, 5], vec![10, 15]]).map_err(|e| e.to_string())?;
    ensure!((k - 0.4).abs() < 1e-9, "confusion fixture gave {k}");

    // the same fixture expanded into paired labels
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (x, y, n) in [(0, 0, 20), (0, 1, 5), (1, 0, 10), (1, 1, 15)] {
        a.extend(std::iter::repeat_n(x, n));
        b.extend(std::iter::repeat_n(y, n));
    }
    let k = cohen_kappa(&a, &b).map_err(|e| e.to_string())?;
    ensure!((k - 0.4).abs() < 1e-9, "paired labels gave {k}");

    let constant = vec![2u8; 30];
    let varied: Vec<u8> = (0..30).map(|i| (i % 3) as u8 + 1).collect();
    let k = cohen_kappa(&constant, &varied).map_err(|e| e.to_string())?;
    ensure!(k.abs() < 1e-9, "constant rater gave {k}");

    let mut rng = ChaCha8Rng::seed_from_u64(0xF1);
    let mut checked = 0;
    while checked < 100 {
        let items = rng.gen_range(2..=8);
        let cats = rng.gen_range(2..=4);
        let raters = rng.gen_range(2..=6u64);
        let m: Vec<Vec<u64>> = (0..items)
            .map(|_| {
                let mut row = vec![0u64; cats];
                for _ in 0..raters {
                    row[rng.gen_range(0..cats)] += 1;
                }
                row
            })
            .collect();
        let marginal_one = (0..cats).any(|j| m.iter().map(|r| r[j]).sum::<u64>() == items as u64 * raters);
        if marginal_one {
            continue; // chance agreement is 1 and the closed form divides by zero
        }
        let got = fleiss_kappa(&m).map_err(|e| e.to_string())?;
        let want = fleiss_closed_form(&m);
        ensure!((got - want).abs() < 1e-9, "{m:?}: {got} vs {want}");
        checked += 1;
    }
    Ok(())
}

// --------------------------------------------------------------- statistics

/// Gamma at positive integers and half-integers, by recurrence.
fn gamma_half(x2: u32) -> f64 {
    // x2 is twice the argument
    let mut x = x2 as f64 / 2.0;
    let mut acc = 1.0;
    while x > 1.0 {
        x -= 1.0;
        acc *= x;
    }
    if (x - 0.5).abs() < 1e-12 {
        acc * std::f64::consts::PI.sqrt()
    } else {
        acc
    }
}

/// Two-sided Student t p-value: one minus twice the Simpson integral of the
/// density from 0 to |t|.
fn t_two_sided(t: f64, df: u32) -> f64 {
    let v = df as f64;
    let c = gamma_half(df + 1) / (gamma_half(df) * (v * std::f64::consts::PI).sqrt());
    let pdf = |x: f64| c * (1.0 + x * x / v).powf(-(v + 1.0) / 2.0);
    let a = t.abs();
    let n = 20_000;
    let h = a / n as f64;
    let mut s = pdf(0.0) + pdf(a);
    for i in 1..n {
        s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    (1.0 - 2.0 * s * h / 3.0).max(0.0)
}

fn statistics() -> Check {
    use nalgebra::{DMatrix, DVector};
    use rapport_core::analysis::{benjamini_hochberg, contrast_trend, kruskal_wallis, GroupedSamples};

    let ranks = GroupedSamples::new(vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]);
    let kw = kruskal_wallis(&ranks).map_err(|e| e.to_string())?;
    ensure!(kw.h == 7.2, "rank fixture H = {}", kw.h);

    let bh = benjamini_hochberg(&[0.01, 0.04, 0.03, 0.005]).map_err(|e| e.to_string())?;
    ensure!(bh == vec![0.02, 0.04, 0.04, 0.02], "BH fixture gave {bh:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(0x015);
    for case in 0..100 {
        let mut sizes = [2usize, 2, 2];
        for _ in 0..6 {
            sizes[rng.gen_range(0..3)] += 1;
        }
        let mut draw = |n: usize, shift: f64| -> Vec<f64> { (0..n).map(|_| shift + rng.gen_range(-2.0..2.0)).collect() };
        let slope_true = [-0.8, 0.0, 0.5][case % 3];
        let g = GroupedSamples::new(
            draw(sizes[0], -slope_true),
            draw(sizes[1], 0.0),
            draw(sizes[2], slope_true),
        );
        let got = contrast_trend(&g).map_err(|e| e.to_string())?;

        let (xs, ys): (Vec<f64>, Vec<f64>) = [(-1.0, g.control.clone()), (0.0, g.bc.clone()), (1.0, g.bc_al.clone())]
            .into_iter()
            .flat_map(|(x, v)| v.into_iter().map(move |y| (x, y)))
            .unzip();
        let n = ys.len();
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
        let y = DVector::from_vec(ys);
        let xtx_inv = (x.transpose() * &x).try_inverse().ok_or("singular design")?;
        let beta = &xtx_inv * x.transpose() * &y;
        let resid = &y - &x * &beta;
        let df = n - 2;
        let sigma2 = resid.norm_squared() / df as f64;
        let se = (sigma2 * xtx_inv[(1, 1)]).sqrt();
        let t = beta[1] / se;
        let p = t_two_sided(t, df as u32);

        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * b.abs().max(1.0);
        ensure!(close(got.slope, beta[1]), "case {case}: slope {} vs {}", got.slope, beta[1]);
        ensure!(close(got.intercept, beta[0]), "case {case}: intercept {} vs {}", got.intercept, beta[0]);
        ensure!(close(got.t, t), "case {case}: t {} vs {t}", got.t);
        ensure!(close(got.f, t * t), "case {case}: F {} vs {}", got.f, t * t);
        ensure!((got.p - p).abs() <= 1e-9, "case {case}: p {} vs {p}", got.p);
        ensure!(got.df == df, "case {case}: df {}", got.df);
    }

    // permutation cross-check on a sixty-observation fixture
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let data: Vec<f64> = (0..60)
        .map(|i| (i / 20) as f64 * 0.2 + rng.gen_range(0.0..1.0f64) * 1.5)
        .collect();
    let g = GroupedSamples::new(data[..20].to_vec(), data[20..40].to_vec(), data[40..].to_vec());
    let kw = kruskal_wallis(&g).map_err(|e| e.to_string())?;
    let mut order: Vec<usize> = (0..60).collect();
    order.sort_by(|&a, &b| data[a].total_cmp(&data[b]));
    let mut rank = vec![0.0; 60];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r as f64 + 1.0;
    }
    let h_of = |r: &[f64]| {
        let sums: f64 = r.chunks(20).map(|c| c.iter().sum::<f64>().powi(2) / 20.0).sum();
        12.0 / (60.0 * 61.0) * sums - 3.0 * 61.0
    };
    let h_obs = h_of(&rank);
    ensure!((h_obs - kw.h).abs() < 1e-9, "fixture H {} vs direct {h_obs}", kw.h);
    let trials = 100_000;
    let mut at_least = 0;
    let mut perm = rank.clone();
    for _ in 0..trials {
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        if h_of(&perm) >= h_obs - 1e-9 {
            at_least += 1;
        }
    }
    let p_perm = at_least as f64 / trials as f64;
    ensure!(
        (p_perm - kw.p).abs() <= 0.01,
        "permutation p {p_perm:.4} vs chi-square p {:.4} (H {:.3})",
        kw.p,
        kw.h
    );
    ensure!(kw.p > 0.001 && kw.p < 0.5, "fixture p {} is too extreme to be informative", kw.p);
    Ok(())
}

// ----------------------------------------------------------------- listener

fn listener() -> Check {
    use rapport_core::completion::{CompletionError, MockBehavior, MockCompletionClient};
    use rapport_core::listener::{generate_response, validate_response, ListenerConfig, ResponseSource, ScriptedFallbacks};

    let fallbacks = ScriptedFallbacks::default();
    let cfg = ListenerConfig {
        timeout_ms: 1,
        ..ListenerConfig::default()
    };
    let valid_replies = [
        "It sounds like that day meant a great deal to you.",
        "You felt proud of what you built.",
        "That memory seems to carry a lot of warmth for you.",
    ];
    let errors = [
        CompletionError::Timeout,
        CompletionError::Network("reset".into()),
        CompletionError::ContentFiltered,
        CompletionError::Status {
            status: 500,
            body: "oops".into(),
        },
        CompletionError::Malformed("no choices".into()),
    ];

    // (behavior, its outcome: Some(valid text) / None for invalid / Err for backend errors)
    let mut rng = ChaCha8Rng::seed_from_u64(97);
    let pick = |rng: &mut ChaCha8Rng| -> MockBehavior {
        match rng.gen_range(0..7) {
            0 => MockBehavior::EchoParaphrase,
            1 => MockBehavior::Reply(valid_replies[rng.gen_range(0..valid_replies.len())].into()),
            2 => MockBehavior::OverLength,
            3 => MockBehavior::Question,
            4 => MockBehavior::Reply(vec!["word"; rng.gen_range(98..140)].join(" ")),
            5 => MockBehavior::Stall,
            _ => MockBehavior::Fail(errors[rng.gen_range(0..errors.len())].clone()),
        }
    };

    let utterances = ["I would love to be known for my music", "My grandmother taught me to bake", "I think honesty matters most"];
    for case in 0..1200 {
        let first = pick(&mut rng);
        let second = pick(&mut rng);
        let q = rng.gen_range(1..=9);
        let utterance = utterances[case % utterances.len()];
        let client = MockCompletionClient::scripted([first.clone(), second.clone()], MockBehavior::EchoParaphrase);
        let r = generate_response(utterance, &[], &client, &fallbacks, q, &cfg);

        ensure!(validate_response(&r.text).is_ok(), "case {case}: invalid text {:?}", r.text);
        ensure!(r.question_index == q, "case {case}: question index");

        enum Outcome {
            Valid,
            Invalid,
            Error,
        }
        let classify = |b: &MockBehavior| match b {
            MockBehavior::EchoParaphrase | MockBehavior::Reply(_) => {
                let text = match b {
                    MockBehavior::Reply(t) => t.clone(),
                    _ => String::new(),
                };
                if text.is_empty() || validate_response(&text).is_ok() {
                    Outcome::Valid
                } else {
                    Outcome::Invalid
                }
            }
            MockBehavior::OverLength | MockBehavior::Question => Outcome::Invalid,
            MockBehavior::Fail(_) | MockBehavior::Stall => Outcome::Error,
        };
        let (source, calls) = match (classify(&first), classify(&second)) {
            (Outcome::Valid, _) => (ResponseSource::Llm, 1),
            (Outcome::Error, _) => (ResponseSource::ScriptedFallback, 1),
            (Outcome::Invalid, Outcome::Valid) => (ResponseSource::Llm, 2),
            (Outcome::Invalid, _) => (ResponseSource::ScriptedFallback, 2),
        };
        ensure!(r.source == source, "case {case}: {first:?} then {second:?} gave {:?}", r.source);
        ensure!(client.calls() == calls, "case {case}: {} backend calls, expected {calls}", client.calls());
        if source == ResponseSource::ScriptedFallback {
            ensure!(r.text == fallbacks.get(q), "case {case}: fallback text for question {q}");
        }
    }

    for q in 1..=9 {
        let client = MockCompletionClient::new(MockBehavior::Fail(CompletionError::ContentFiltered));
        let r = generate_response("something personal", &[], &client, &fallbacks, q, &cfg);
        ensure!(
            r.source == ResponseSource::ScriptedFallback && r.text == fallbacks.0[q - 1],
            "content filter on question {q} gave {r:?}"
        );
    }
    Ok(())
}

// ------------------------------------------------------------------ gating

fn gating() -> Check {
    use rapport_core::backchannel::Lexicon;
    use rapport_core::completion::MockCompletionClient;
    use rapport_core::fixtures::recorded_inputs;
    use rapport_core::session::{Condition, Driver, Phase, Prompt, Session, SessionConfig, QUESTIONS};
    use rapport_core::transcript::{self, EventKind, Transcript};

    let replay = |condition: Condition| -> Result<Transcript, String> {
        let lex = Lexicon::bundled();
        let mock = MockCompletionClient::default();
        let driver = Driver::new(&lex, &mock);
        let mut s = Session::new("gating", condition, SessionConfig::default(), "2026-01-01T00:00:00Z");
        driver.start(&mut s).map_err(|e| e.to_string())?;
        for input in recorded_inputs(42) {
            let (_, prompt) = driver.feed(&mut s, input).map_err(|e| e.to_string())?;
            if prompt == Some(Prompt::SessionComplete) || s.phase() == Phase::Done {
                break;
            }
        }
        ensure!(s.phase() == Phase::Done, "{condition} did not finish");
        Ok(s.transcript().clone())
    };

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for condition in Condition::ALL {
        let t = replay(condition)?;
        let asked: Vec<&str> = t
            .events
            .iter()
            .filter_map(|e| match &e.kind {
                EventKind::QuestionAsked { text, .. } => Some(text.as_str()),
                _ => None,
            })
            .collect();
        ensure!(asked == QUESTIONS, "{condition}: questions {asked:?}");
        let (bc, resp) = (t.backchannels().count(), t.responses().count());
        let ok = match condition {
            Condition::Control => bc == 0 && resp == 0,
            Condition::Bc => bc >= 1 && resp == 0,
            Condition::BcAl => bc >= 1 && resp == 9,
        };
        ensure!(ok, "{condition}: {bc} backchannels, {resp} responses");

        let path = dir.path().join(format!("{condition}.jsonl"));
        transcript::persist(&t, &path).map_err(|e| e.to_string())?;
        let first = std::fs::read(&path).map_err(|e| e.to_string())?;
        let back = transcript::load(&path).map_err(|e| e.to_string())?;
        ensure!(back == t, "{condition}: reloaded transcript differs");
        transcript::persist(&back, &path).map_err(|e| e.to_string())?;
        let second = std::fs::read(&path).map_err(|e| e.to_string())?;
        ensure!(first == second, "{condition}: round trip changed the bytes");
    }
    Ok(())
}

// ----------------------------------------------------------------- gateway

fn gateway() -> Check {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?
        .block_on(wire::run())
}

mod wire {
    use std::sync::Arc;
    use std::time::Duration;

    use base64::Engine;
    use futures_util::{SinkExt, StreamExt};
    use rapport_core::session::{Input, QUESTIONS};
    use rapport_core::transcript::{EventKind, Transcript};
    use rapport_gateway::wire::{WireEvent, WireKind};
    use rapport_gateway::{AppState, Backends, GatewayConfig};
    use serde_json::{json, Value};
    use tokio_tungstenite::tungstenite::Message;

    use super::Check;

    type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

    struct Server {
        base: String,
        http: reqwest::Client,
        _dir: tempfile::TempDir,
    }

    impl Server {
        async fn create(&self, condition: &str) -> Result<(u16, Value), String> {
            let r = self
                .http
                .post(format!("{}/sessions", self.base))
                .json(&json!({ "condition": condition }))
                .send()
                .await
                .map_err(|e| e.to_string())?;
            let status = r.status().as_u16();
            Ok((status, r.json().await.unwrap_or(Value::Null)))
        }

        async fn get(&self, path: &str) -> Result<(u16, String), String> {
            let r = self.http.get(format!("{}{path}", self.base)).send().await.map_err(|e| e.to_string())?;
            Ok((r.status().as_u16(), r.text().await.map_err(|e| e.to_string())?))
        }
    }

    async fn next(ws: &mut Ws) -> Result<Option<WireEvent>, String> {
        loop {
            match tokio::time::timeout(Duration::from_secs(10), ws.next()).await {
                Err(_) => return Err("server went quiet".into()),
                Ok(Some(Ok(Message::Text(t)))) => {
                    return serde_json::from_str(t.as_str()).map(Some).map_err(|e| format!("{e}: {t}"))
                }
                Ok(Some(Ok(Message::Close(_)))) | Ok(None) | Ok(Some(Err(_))) => return Ok(None),
                Ok(Some(Ok(_))) => continue,
            }
        }
    }

    fn encode(input: &Input) -> Value {
        match input {
            Input::Text { chunk, .. } => json!({ "type": "text", "chunk": chunk }),
            Input::EndOfTurn { .. } => json!({ "type": "end_of_turn" }),
            Input::Audio(f) => json!({
                "type": "audio",
                "pcm16_b64": base64::engine::general_purpose::STANDARD.encode(f.to_pcm16_le()),
            }),
        }
    }

    /// Runs one full session over the socket, sending each answer after the
    /// question it belongs to arrives. Returns the session id and every
    /// event received.
    async fn session(server: &Server, condition: &str) -> Result<(String, Vec<WireEvent>), String> {
        let (status, body) = server.create(condition).await?;
        if status != 201 {
            return Err(format!("create {condition}: {status} {body}"));
        }
        let id = body["session_id"].as_str().ok_or("no session_id")?.to_string();
        let url = body["ws_url"].as_str().ok_or("no ws_url")?;
        let (mut ws, _) = tokio_tungstenite::connect_async(url).await.map_err(|e| e.to_string())?;

        let mut answers: Vec<Vec<Input>> = Vec::new();
        for input in rapport_core::fixtures::recorded_inputs(9) {
            if matches!(input, Input::Text { .. }) {
                answers.push(Vec::new());
            }
            answers.last_mut().ok_or("stream starts without text")?.push(input);
        }

        let mut seen = Vec::new();
        let mut asked = 0;
        while let Some(e) = next(&mut ws).await? {
            let is_question = matches!(e.kind, WireKind::Event(EventKind::QuestionAsked { .. }));
            seen.push(e);
            if is_question {
                let Some(answer) = answers.get(asked) else {
                    return Err("more questions than answers".into());
                };
                asked += 1;
                for input in answer {
                    ws.send(Message::Text(encode(input).to_string().into()))
                        .await
                        .map_err(|e| e.to_string())?;
                }
            }
        }
        Ok((id, seen))
    }

    pub async fn run() -> Check {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = GatewayConfig {
            data_dir: dir.path().to_path_buf(),
            ..GatewayConfig::default()
        };
        let backends = Backends::from_config(&cfg);
        let state: Arc<AppState> = AppState::new(cfg, backends).map_err(|e| e.to_string())?;
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.map_err(|e| e.to_string())?;
        let addr = listener.local_addr().map_err(|e| e.to_string())?;
        tokio::spawn(rapport_gateway::serve(listener, state));
        let server = Server {
            base: format!("http://{addr}"),
            http: reqwest::Client::new(),
            _dir: dir,
        };

        ensure!(server.create("sometimes").await?.0 == 400, "unknown condition accepted");
        ensure!(server.get("/sessions/missing/transcript").await?.0 == 404, "missing transcript not 404");

        for condition in ["control", "bc", "bc_al"] {
            let (id, wire) = session(&server, condition).await?;
            let (status, body) = server.get(&format!("/sessions/{id}/transcript")).await?;
            ensure!(status == 200, "{condition}: transcript status {status}");
            let t = Transcript::from_jsonl(body.as_bytes()).map_err(|e| e.to_string())?;
            let from_wire: Vec<_> = wire.iter().filter_map(|e| e.transcript_event()).collect();
            ensure!(from_wire == t.events, "{condition}: wire events differ from the transcript");
            ensure!(wire.iter().all(|e| e.session_id == id), "{condition}: foreign session id");

            let asked: Vec<String> = t
                .events
                .iter()
                .filter_map(|e| match &e.kind {
                    EventKind::QuestionAsked { text, .. } => Some(text.clone()),
                    _ => None,
                })
                .collect();
            ensure!(asked == QUESTIONS, "{condition}: questions over the wire {asked:?}");
            ensure!(
                matches!(t.events.last().map(|e| &e.kind), Some(EventKind::SessionEnded)),
                "{condition}: session did not end"
            );

            let bc: Vec<u64> = wire
                .iter()
                .filter(|e| matches!(e.kind, WireKind::Event(EventKind::Backchannel { .. })))
                .map(|e| e.t)
                .collect();
            let responses = wire
                .iter()
                .filter(|e| matches!(e.kind, WireKind::Event(EventKind::Response { .. })))
                .count();
            match condition {
                "control" => ensure!(bc.is_empty() && responses == 0, "control sent {} backchannels, {responses} responses", bc.len()),
                "bc" => ensure!(!bc.is_empty() && responses == 0, "bc sent {} backchannels, {responses} responses", bc.len()),
                _ => ensure!(!bc.is_empty() && responses == 9, "bc_al sent {} backchannels, {responses} responses", bc.len()),
            }
            for w in bc.windows(2) {
                ensure!(w[1] >= w[0] + 3000, "{condition}: backchannels at {} and {} ms", w[0], w[1]);
            }
        }
        Ok(())
    }
}
