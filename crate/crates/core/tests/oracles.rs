use std::io::Write;
use std::sync::Arc;

use lenctl_core::backend::{CompliantBackend, MockConfig, NoisyBackend, NoisyConfig, RecordingBackend};
use lenctl_core::controller::{run_session, ControllerConfig, ControllerError, InsertionMode, SessionStatus};
use lenctl_core::feedback::{build_prompt, strip_feedback, PromptMode};
use lenctl_core::metrics::{mae, pm, EvalPair};
use lenctl_core::segmenter::AbbreviationSet;
use lenctl_core::units::{load_vocab, Counter, Tokenizer};
use lenctl_core::LengthConstraint;
use lenctl_core::LengthUnit;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bpe_counter() -> Counter {
    let mut vocab = String::new();
    for b in ["a", "e", "i", "o", "u", "n", "r", "t", "s", "l", " ", "."] {
        vocab.push_str(b);
        vocab.push('\n');
    }
    for m in [" t", "th", "er", "an", "in", "on", " a", " s", "re", "at", "en", "ou", " the", "ight"] {
        vocab.push_str(m);
        vocab.push('\n');
    }
    let mut file = tempfile::NamedTempFile::new().unwrap();
    file.write_all(vocab.as_bytes()).unwrap();
    let tokenizer = Tokenizer::bpe(load_vocab(file.path()).unwrap());
    Counter::new(Arc::new(tokenizer), AbbreviationSet::shared_default())
}

#[test]
fn metrics_match_naive_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.random_range(1..60);
        let pairs: Vec<EvalPair> = (0..n)
            .map(|i| EvalPair::new(LengthUnit::Word, rng.random_range(1..500), rng.random_range(0..900), format!("{i}")))
            .collect();
        let mut total = 0.0f64;
        let mut hits = 0usize;
        for p in &pairs {
            let d = (p.generated as f64 - p.target as f64).abs();
            total += d;
            if d <= 10.0 {
                hits += 1;
            }
        }
        assert_eq!(mae(&pairs).unwrap(), total / n as f64);
        assert_eq!(pm(&pairs, 10).unwrap(), hits as f64 / n as f64);
    }
}

#[test]
fn bpe_token_events_recount_whole_prefix() {
    let counter = bpe_counter();
    let backend = CompliantBackend::new(MockConfig { seed: 5, tool_calls: false }, counter.clone());
    for target in [60, 150, 240] {
        let p = build_prompt("Night trains.", LengthConstraint::new(LengthUnit::Token, target), PromptMode::Feedback, None)
            .unwrap();
        let state = run_session(&backend, &p, &ControllerConfig::default(), &counter).unwrap();
        for e in &state.events {
            assert_eq!(e.count, counter.count_value(&state.clean_text[..e.insertion_offset], LengthUnit::Token));
        }
        let n = counter.count_value(&state.clean_text, LengthUnit::Token);
        assert!(n.abs_diff(target) <= 10, "{n} vs {target}");
    }
}

#[test]
fn noisy_runaway_hits_hard_cap_at_twice_target() {
    let counter = Counter::default();
    let cfg = NoisyConfig { seed: 1, compliance: 0.0, bias: 0.0, skew: -0.7 };
    let backend = NoisyBackend::new(cfg, counter.clone());
    let p = build_prompt("Rivers.", LengthConstraint::new(LengthUnit::Token, 100), PromptMode::Feedback, None).unwrap();
    let err = run_session(&backend, &p, &ControllerConfig::default(), &counter).unwrap_err();
    assert_eq!(err.state.status, SessionStatus::DoneCap);
    assert!(matches!(err.error, ControllerError::CapExceeded { cap: 200, .. }));
    let total = counter.count_value(&err.state.clean_text, LengthUnit::Token);
    assert!(total >= 200);
    let last_step = err.state.trace.last().unwrap();
    let before = &err.state.clean_text[..err.state.clean_text.len() - last_step.delta_text.len().min(err.state.clean_text.len())];
    assert!(counter.count_value(before, LengthUnit::Token) < 200 || last_step.delta_text.is_empty());
}

#[test]
fn transcripts_carry_exactly_the_recorded_markers() {
    let counter = Counter::default();
    let rec = RecordingBackend::new(Arc::new(CompliantBackend::new(MockConfig::default(), counter.clone())));
    let p = build_prompt("Harbours.", LengthConstraint::new(LengthUnit::Sentence, 4), PromptMode::Feedback, None).unwrap();
    let cfg = ControllerConfig { insertion_mode: InsertionMode::ControllerBoundary, ..ControllerConfig::default() };
    let state = run_session(&rec, &p, &cfg, &counter).unwrap();
    let requests = rec.requests();
    assert_eq!(requests.len(), state.resume_count + 1);
    for (i, req) in requests.iter().enumerate() {
        let (clean, events) = strip_feedback(&req.assistant_prefix).unwrap();
        assert_eq!(events.len(), i);
        assert_eq!(events[..], state.events[..i]);
        assert!(state.clean_text.starts_with(&clean));
    }
}
