//! Process-level harness tests: real candidate subprocesses over the wire
//! protocol.

mod common;

use pdd::canon::Doc;
use pdd::corpus::{CandidateMode, FEATURE_STORE};
use pdd::harness::{
    spawn, CandidateRef, ClockMode, EffectKind, HarnessError, HarnessPolicy, Outcome,
    ProcessCandidate, Session, SessionFactory,
};
use serde_json::json;

fn candidate_ref(mode: CandidateMode, args: &[&str]) -> CandidateRef {
    let mut launch = vec![
        common::candidate_bin().to_string_lossy().into_owned(),
        mode.token().to_string(),
    ];
    launch.extend(args.iter().map(|s| s.to_string()));
    CandidateRef {
        artifact_id: format!("candidate-{}", mode.token()),
        artifact_digest: pdd::canon::ContentDigest::of_bytes(mode.token().as_bytes()),
        launch_command: launch,
        language: "rust".to_string(),
        runtime: "rust-bin".to_string(),
    }
}

fn fast_policy() -> HarnessPolicy {
    HarnessPolicy {
        handshake_timeout_ms: 2_000,
        default_deadline_ms: 2_000,
        grace_ms: 120,
        clock_mode: ClockMode::Synthetic,
    }
}

fn request(n: u64) -> Doc {
    json!({
        "transaction_id": format!("txn-{n}"),
        "account_id": "acct-1",
        "amount_cents": 1200 + n,
    })
}

#[test]
fn reference_candidate_round_trip() {
    let mut session = spawn(&candidate_ref(CandidateMode::Reference, &[]), fast_policy()).unwrap();
    let record = session.invoke(&request(1), 2_000).unwrap();
    let body = record.outcome.response().expect("a response");
    assert!(body.get("transaction_id").is_some());
    assert!(body.get("risk_score").and_then(Doc::as_f64).is_some());
    assert!(body.get("decision").and_then(Doc::as_str).is_some());
    // Declared effects include exactly one feature-store call.
    let calls: Vec<_> = record
        .effects
        .iter()
        .filter(|e| e.kind == EffectKind::NetworkCall && e.target == FEATURE_STORE)
        .collect();
    assert_eq!(calls.len(), 1);
    // Synthetic clock: latency is the declared duration, exactly.
    assert_eq!(record.latency_ms, 61);
    assert_eq!(record.peak_memory_mb, 112);
}

#[test]
fn wall_clock_latency_is_at_least_the_declared_duration() {
    let policy = HarnessPolicy {
        clock_mode: ClockMode::Wall,
        ..fast_policy()
    };
    let mut session = spawn(&candidate_ref(CandidateMode::Reference, &[]), policy).unwrap();
    let record = session.invoke(&request(1), 2_000).unwrap();
    assert!(record.latency_ms >= 61, "wall latency {} below declared", record.latency_ms);
}

#[test]
fn command_that_exits_immediately_is_a_launch_failure() {
    let err = spawn(&candidate_ref(CandidateMode::ExitImmediately, &[]), fast_policy()).unwrap_err();
    match err {
        HarnessError::LaunchFailure { detail } => {
            assert!(detail.contains("exit") || detail.contains("3"), "{detail}")
        }
        other => panic!("expected LaunchFailure, got {other}"),
    }
}

#[test]
fn nonexistent_binary_is_a_launch_failure() {
    let mut candidate = candidate_ref(CandidateMode::Reference, &[]);
    candidate.launch_command[0] = "/definitely/not/a/binary".to_string();
    let err = spawn(&candidate, fast_policy()).unwrap_err();
    assert!(matches!(err, HarnessError::LaunchFailure { .. }));
}

#[test]
fn silent_candidate_times_out_the_handshake() {
    let policy = HarnessPolicy {
        handshake_timeout_ms: 250,
        ..fast_policy()
    };
    let err = spawn(&candidate_ref(CandidateMode::NoHandshake, &[]), policy).unwrap_err();
    assert!(matches!(err, HarnessError::HandshakeTimeout { waited_ms: 250 }));
}

#[test]
fn garbage_line_is_a_framing_error() {
    let mut session = spawn(&candidate_ref(CandidateMode::BadFrame, &[]), fast_policy()).unwrap();
    let err = session.invoke(&request(1), 2_000).unwrap_err();
    assert!(matches!(err, HarnessError::FramingError { .. }));
}

#[test]
fn slow_candidate_records_an_invocation_timeout_observation() {
    let mut session =
        spawn(&candidate_ref(CandidateMode::Sleepy, &["400"]), fast_policy()).unwrap();
    let record = session.invoke(&request(1), 60).unwrap();
    assert_eq!(record.outcome, Outcome::Timeout);
    assert_eq!(record.latency_ms, 60, "timeout latency is the deadline");
}

#[test]
fn late_effect_lands_post_response_within_the_grace_window() {
    let mut session = spawn(&candidate_ref(CandidateMode::LateEffect, &[]), fast_policy()).unwrap();
    let record = session.invoke(&request(1), 2_000).unwrap();
    assert!(record.outcome.response().is_some());
    let trace = session.collect_trace().unwrap();
    let last = trace.invocations.last().unwrap();
    let late: Vec<_> = last.effects.iter().filter(|e| e.post_response).collect();
    assert_eq!(late.len(), 1, "effects: {:?}", last.effects);
}

#[test]
fn trace_is_complete_and_ordered() {
    let mut session = spawn(&candidate_ref(CandidateMode::Reference, &[]), fast_policy()).unwrap();
    for n in 0..3 {
        session.invoke(&request(n), 2_000).unwrap();
    }
    let trace = session.collect_trace().unwrap();
    trace.check().unwrap();
    let seqs: Vec<u64> = trace.invocations.iter().map(|i| i.seq).collect();
    assert_eq!(seqs, vec![1, 2, 3]);
    for (n, inv) in trace.invocations.iter().enumerate() {
        assert_eq!(inv.request, request(n as u64), "requests appear in send order");
        assert!(inv.outcome.response().is_some());
    }
}

#[test]
fn empty_session_yields_an_empty_trace() {
    let mut session = spawn(&candidate_ref(CandidateMode::Reference, &[]), fast_policy()).unwrap();
    let trace = session.collect_trace().unwrap();
    assert!(trace.invocations.is_empty());
}

#[test]
fn concurrent_sessions_never_interleave_traces() {
    let factory = ProcessCandidate::new(candidate_ref(CandidateMode::Reference, &[]), fast_policy());
    let handles: Vec<_> = (0..2)
        .map(|side: u64| {
            let factory = factory.clone();
            std::thread::spawn(move || {
                let mut session = factory.open().unwrap();
                for n in 0..20 {
                    session.invoke(&request(side * 1_000 + n), 2_000).unwrap();
                }
                session.collect_trace().unwrap()
            })
        })
        .collect();
    let traces: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    for (side, trace) in traces.iter().enumerate() {
        assert_eq!(trace.invocations.len(), 20);
        for inv in &trace.invocations {
            let txn = inv.request["transaction_id"].as_str().unwrap();
            let n: u64 = txn.strip_prefix("txn-").unwrap().parse().unwrap();
            assert_eq!(
                n / 1_000,
                side as u64,
                "observation from the other session leaked into this trace"
            );
        }
    }
}
