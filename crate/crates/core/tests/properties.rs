use proptest::prelude::*;

use rapport_core::analysis::{benjamini_hochberg, contrast_trend, kruskal_wallis, GroupedSamples};
use rapport_core::bop::{replay_trace, replay_vad, run_frames, BopConfig, BopState};
use rapport_core::completion::{CompletionError, MockBehavior, MockCompletionClient};
use rapport_core::disclosure::{cohen_kappa, fleiss_kappa, rating_matrix, HeuristicScorer};
use rapport_core::listener::{generate_response, validate_response, ListenerConfig, ScriptedFallbacks};
use rapport_core::prosody::{rms, segment_activity, write_trace, ActivityKind, ProsodyFrame, VadConfig};
use rapport_core::transcript::{Condition, EventKind, Transcript, TranscriptEvent};

/// Contiguous 10 ms frames from (is_speech, duration, f0 start, f0 end) runs.
fn build_trace(runs: &[(bool, u64, f64, f64)]) -> Vec<ProsodyFrame> {
    let mut frames = Vec::new();
    let mut t = 0;
    for &(speech, ms, f0a, f0b) in runs {
        let n = (ms / 10).max(1);
        for i in 0..n {
            let f = f0a + (f0b - f0a) * i as f64 / n as f64;
            frames.push(if speech {
                ProsodyFrame::voiced(t, 0.2, f)
            } else {
                ProsodyFrame::unvoiced(t, 0.001)
            });
            t += 10;
        }
    }
    frames
}

fn runs() -> impl Strategy<Value = Vec<(bool, u64, f64, f64)>> {
    prop::collection::vec((any::<bool>(), 10u64..4000, 80.0f64..400.0, 80.0f64..400.0), 1..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn rms_scales_linearly(samples in prop::collection::vec(-1.0f32..1.0, 1..500), k in 0.0f32..4.0) {
        let scaled: Vec<f32> = samples.iter().map(|s| s * k).collect();
        prop_assert!((rms(&scaled) - k as f64 * rms(&samples)).abs() < 1e-5);
    }

    #[test]
    fn segments_tile_the_trace(r in runs()) {
        let frames = build_trace(&r);
        let segs = segment_activity(&frames, &replay_vad()).unwrap();
        prop_assert_eq!(segs.first().unwrap().start, frames[0].time);
        prop_assert_eq!(segs.last().unwrap().end, frames.last().unwrap().time + 10);
        for w in segs.windows(2) {
            prop_assert_eq!(w[0].end, w[1].start);
            prop_assert_ne!(w[0].kind, w[1].kind);
        }
        prop_assert!(segs.iter().all(|s| s.end > s.start));
    }

    #[test]
    fn bop_events_respect_rule(r in runs()) {
        let frames = build_trace(&r);
        let cfg = BopConfig::default();
        let events = run_frames(&frames, replay_vad(), &cfg).unwrap();
        for w in events.windows(2) {
            prop_assert!(w[1].time - w[0].time >= cfg.min_interval_ms);
        }
        let segs = segment_activity(&frames, &replay_vad()).unwrap();
        for e in &events {
            prop_assert!(e.preceding_speech_ms >= cfg.min_preceding_speech_ms);
            prop_assert!(e.pause_ms >= cfg.pause_threshold_ms);
            let pause = segs.iter().find(|s| s.start <= e.time && e.time < s.end).unwrap();
            prop_assert_eq!(pause.kind, ActivityKind::Pause);
            prop_assert_eq!(events.iter().filter(|o| pause.start <= o.time && o.time < pause.end).count(), 1);
        }
    }

    #[test]
    fn bop_replay_matches_batch(r in runs()) {
        let frames = build_trace(&r);
        let cfg = BopConfig::default();
        let batch = run_frames(&frames, replay_vad(), &cfg).unwrap();
        let mut buf = Vec::new();
        write_trace(&mut buf, &frames).unwrap();
        prop_assert_eq!(&replay_trace(buf.as_slice(), replay_vad(), &cfg).unwrap(), &batch);
        let mut state = BopState::new(replay_vad());
        let streamed: Vec<_> = frames.iter().filter_map(|f| state.step(f, &cfg).unwrap()).collect();
        prop_assert_eq!(streamed, batch);
    }

    #[test]
    fn longer_pause_threshold_never_fires_earlier(r in runs(), extra in 0u64..1000) {
        let frames = build_trace(&r);
        let base = BopConfig::default();
        let strict = BopConfig { pause_threshold_ms: base.pause_threshold_ms + extra, ..base.clone() };
        let a = run_frames(&frames, replay_vad(), &base).unwrap();
        let b = run_frames(&frames, replay_vad(), &strict).unwrap();
        // qualifying instants under the stricter rule are a subset, so the
        // first event can only move later or disappear
        match (a.first(), b.first()) {
            (Some(x), Some(y)) => prop_assert!(y.time >= x.time),
            (None, Some(_)) => prop_assert!(false, "stricter rule fired where the default did not"),
            _ => {}
        }
        prop_assert!(b.iter().all(|e| e.pause_ms >= strict.pause_threshold_ms));
    }

    #[test]
    fn listener_always_returns_valid_text(script in prop::collection::vec(0u8..6, 0..3), q in 1usize..=9) {
        let behaviors: Vec<MockBehavior> = script.into_iter().map(|b| match b {
            0 => MockBehavior::EchoParaphrase,
            1 => MockBehavior::OverLength,
            2 => MockBehavior::Question,
            3 => MockBehavior::Fail(CompletionError::Network("reset".into())),
            4 => MockBehavior::Fail(CompletionError::ContentFiltered),
            _ => MockBehavior::Stall,
        }).collect();
        let mock = MockCompletionClient::scripted(behaviors, MockBehavior::EchoParaphrase);
        let cfg = ListenerConfig { timeout_ms: 2, ..ListenerConfig::default() };
        let r = generate_response("I went back home after years away", &[], &mock, &ScriptedFallbacks::default(), q, &cfg);
        prop_assert!(validate_response(&r.text).is_ok());
        prop_assert!(mock.calls() <= 2);
        prop_assert_eq!(r.question_index, q);
    }

    #[test]
    fn kappas_are_bounded_and_label_invariant(
        pairs in prop::collection::vec((1u8..=3, 1u8..=3), 1..40),
        perm in Just([2u8, 3, 1]),
    ) {
        let a: Vec<u8> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        let k = cohen_kappa(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&k));
        prop_assert_eq!(k == 1.0, a == b);
        let relabel = |v: &[u8]| v.iter().map(|x| perm[*x as usize - 1]).collect::<Vec<_>>();
        prop_assert!((cohen_kappa(&relabel(&a), &relabel(&b)).unwrap() - k).abs() < 1e-12);
        let mut ra = a.clone(); ra.reverse();
        let mut rb = b.clone(); rb.reverse();
        prop_assert!((cohen_kappa(&ra, &rb).unwrap() - k).abs() < 1e-12);

        let m = rating_matrix(&[a.clone(), b.clone()], &[1, 2, 3]).unwrap();
        let f = fleiss_kappa(&m).unwrap();
        prop_assert!((-1.0..=1.0).contains(&f));
        let m2 = rating_matrix(&[relabel(&a), relabel(&b)], &[1, 2, 3]).unwrap();
        prop_assert!((fleiss_kappa(&m2).unwrap() - f).abs() < 1e-12);
        if k.abs() > 0.3 {
            prop_assert_eq!(k.signum(), f.signum());
        }
        if a.iter().zip(&b).filter(|(x, y)| x == y).count() * 10 >= a.len() * 9 {
            prop_assert!((k - f).abs() < 0.25);
        }
    }

    #[test]
    fn bh_dominates_and_preserves_order(p in prop::collection::vec(0.0f64..=1.0, 1..20)) {
        let adj = benjamini_hochberg(&p).unwrap();
        for (a, x) in adj.iter().zip(&p) {
            prop_assert!(a >= x && *a <= 1.0);
        }
        for i in 0..p.len() {
            for j in 0..p.len() {
                if p[i] < p[j] {
                    prop_assert!(adj[i] <= adj[j]);
                }
            }
        }
    }

    #[test]
    fn kw_ignores_monotone_transforms(
        a in prop::collection::vec(-50i32..50, 1..8),
        b in prop::collection::vec(-50i32..50, 1..8),
        c in prop::collection::vec(-50i32..50, 1..8),
    ) {
        let f = |v: &[i32], g: &dyn Fn(f64) -> f64| v.iter().map(|x| g(*x as f64)).collect::<Vec<_>>();
        let id = |x: f64| x;
        let mono = |x: f64| (x / 10.0).exp() * 3.0 + 7.0;
        let g1 = GroupedSamples::new(f(&a, &id), f(&b, &id), f(&c, &id));
        let g2 = GroupedSamples::new(f(&a, &mono), f(&b, &mono), f(&c, &mono));
        prop_assert_eq!(kruskal_wallis(&g1).unwrap().h, kruskal_wallis(&g2).unwrap().h);
    }

    #[test]
    fn trend_sign_follows_extreme_means(
        n in 2usize..6,
        vals in prop::collection::vec(-10.0f64..10.0, 18),
    ) {
        let g = GroupedSamples::new(vals[..n].to_vec(), vals[6..6 + n].to_vec(), vals[12..12 + n].to_vec());
        let t = contrast_trend(&g).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let diff = mean(&g.bc_al) - mean(&g.control);
        if diff.abs() > 1e-9 {
            prop_assert_eq!(t.slope.signum(), diff.signum());
        }
    }

    #[test]
    fn transcript_round_trips(texts in prop::collection::vec("[ -~]{0,40}", 0..10), cond in 0usize..3) {
        let mut t = Transcript::new("id", Condition::ALL[cond], "2026-01-01T00:00:00Z");
        for (i, text) in texts.iter().enumerate() {
            t.events.push(TranscriptEvent {
                t: i as u64 * 100,
                kind: EventKind::UserUtterance { text: text.clone(), start: 0, end: i as u64 },
            });
        }
        let jsonl = t.to_jsonl();
        let back = Transcript::from_jsonl(jsonl.as_bytes()).unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(back.to_jsonl(), jsonl);
    }

    #[test]
    fn heuristic_scoring_is_pure(answer in "[a-zA-Z ,.']{0,200}") {
        prop_assert_eq!(HeuristicScorer::score_answer(&answer), HeuristicScorer::score_answer(&answer));
    }
}

#[test]
fn energy_scaling_keeps_segments_under_fixed_threshold() {
    let frames = build_trace(&[(true, 1600, 180.0, 280.0), (false, 900, 0.0, 0.0), (true, 500, 200.0, 200.0)]);
    let a = segment_activity(&frames, &VadConfig::fixed(0.02)).unwrap();
    let louder: Vec<ProsodyFrame> = frames
        .iter()
        .map(|f| ProsodyFrame { energy: f.energy * 2.0, ..*f })
        .collect();
    assert_eq!(a, segment_activity(&louder, &VadConfig::fixed(0.02)).unwrap());
}
