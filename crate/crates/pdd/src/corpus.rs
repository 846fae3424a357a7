//! Desk-scale governance corpus: the fraud-score fixture bundle, reference
//! and planted-violation candidate behaviors, and trace fixtures.
//!
//! The corpus backs the validation and attestation test suites end to end:
//! compliant candidates must be admitted, each planted violator must be
//! rejected on exactly its planted clause, and the runtime-violation trace
//! must produce the canonical quarantine block.

use std::collections::HashMap;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::canon::{canonical_bytes, Doc};
use crate::harness::{EffectTrace, InvocationRecord, Outcome};
use crate::time::UtcTime;

/// `protocol.yaml` of the fraud-score fixture.
pub const FRAUD_SCORE_MANIFEST: &str = "\
protocol_id: fraud-score
version: 1.0.0
component: risk.scoring.FraudScore
invariants:
  structural: structural/request-response.schema.yaml
  behavioral: behavioral/scoring.properties.yaml
  operational: operational/capabilities.yaml
validators:
  required_set: validators/validator-set.yaml
evidence:
  namespace: evidence/
";

pub const FRAUD_SCORE_STRUCTURAL: &str = "\
request:
  kind: object
  required: [transaction_id, account_id, amount_cents]
  properties:
    transaction_id: {kind: string}
    account_id: {kind: string}
    amount_cents: {kind: integer, minimum: 0}
    merchant_country: {kind: string, pattern: '^[A-Z]{2}$'}
response:
  kind: object
  required: [transaction_id, risk_score, decision]
  properties:
    transaction_id: {kind: string}
    risk_score: {kind: number, minimum: 0.0, maximum: 1.0}
    decision: {kind: enum, enum_values: [approve, review, decline]}
errors: [invalid_request, dependency_unavailable]
";

pub const FRAUD_SCORE_BEHAVIORAL: &str = "\
properties:
  - name: deterministic_scoring
    kind: determinism
    for_all: request
    case_count: 5000
  - name: score_range
    kind: range
    for_all: request
    require:
      field: risk_score
      minimum: 0.0
      maximum: 1.0
    case_count: 5000
  - name: monotone_amount_risk
    kind: monotone
    for_all: [request_a, request_b]
    when:
      equal_except: amount_cents
    require:
      output_field: risk_score
      direction: non_decreasing
    case_count: 5000
  - name: invalid_request_fails_closed
    kind: fails_closed
    for_all: request
    when:
      invalid_input: missing_required_field
    require:
      error_kind: invalid_request
    case_count: 5000
";

pub const FRAUD_SCORE_OPERATIONAL: &str = "\
capabilities:
  network:
    outbound_allowlist: ['feature-store.internal:443']
    deny_other_outbound: true
  filesystem:
    read: []
    write: []
  dependencies:
    allow: [risk-common, protocol-runtime]
  resources:
    max_latency_ms_p95: 75
    max_memory_mb: 256
    call_budgets:
      max_feature_store_calls_per_request:
        target: 'feature-store.internal:443'
        max_per_request: 1
  secrets:
    allow: [FEATURE_STORE_TOKEN]
  background_work:
    allowed: false
";

pub const FRAUD_SCORE_VALIDATORS: &str = "\
required:
  - name: schema-conformance
    version: 0.4.2
  - name: property-check
    version: 0.9.1
  - name: capability-monitor
    version: 0.3.0
";

/// Write the fraud-score bundle fixture into `root`.
pub fn write_fraud_score_bundle(root: &Path) -> io::Result<()> {
    let files = [
        ("protocol.yaml", FRAUD_SCORE_MANIFEST),
        ("structural/request-response.schema.yaml", FRAUD_SCORE_STRUCTURAL),
        ("behavioral/scoring.properties.yaml", FRAUD_SCORE_BEHAVIORAL),
        ("operational/capabilities.yaml", FRAUD_SCORE_OPERATIONAL),
        ("validators/validator-set.yaml", FRAUD_SCORE_VALIDATORS),
    ];
    for (rel, text) in files {
        let path = root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, text)?;
    }
    std::fs::create_dir_all(root.join("evidence"))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Candidate behaviors
// ---------------------------------------------------------------------------

/// Feature-store target every scoring candidate calls.
pub const FEATURE_STORE: &str = "feature-store.internal:443";

/// Candidate modes the `pdd-candidate` binary implements. The first two are
/// compliant scoring strategies; the nine `violates_*` entries are the
/// planted-violation corpus; the rest exercise harness edge cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateMode {
    Reference,
    AltScoring,
    UnauthorizedNetwork,
    HiddenFsWrite,
    ExcessiveCalls,
    LatencyBreach,
    UnapprovedDependency,
    MissingResponseField,
    OutOfRangeScore,
    NondeterministicScore,
    NonmonotoneScore,
    LateEffect,
    NoHandshake,
    ExitImmediately,
    BadFrame,
    Sleepy,
}

impl CandidateMode {
    pub fn parse(token: &str) -> Option<Self> {
        Some(match token {
            "reference" => Self::Reference,
            "alt-scoring" => Self::AltScoring,
            "unauthorized-network" => Self::UnauthorizedNetwork,
            "hidden-fs-write" => Self::HiddenFsWrite,
            "excessive-calls" => Self::ExcessiveCalls,
            "latency-breach" => Self::LatencyBreach,
            "unapproved-dependency" => Self::UnapprovedDependency,
            "missing-response-field" => Self::MissingResponseField,
            "out-of-range-score" => Self::OutOfRangeScore,
            "nondeterministic-score" => Self::NondeterministicScore,
            "nonmonotone-score" => Self::NonmonotoneScore,
            "late-effect" => Self::LateEffect,
            "no-handshake" => Self::NoHandshake,
            "exit" => Self::ExitImmediately,
            "bad-frame" => Self::BadFrame,
            "sleepy" => Self::Sleepy,
            _ => return None,
        })
    }

    pub fn token(self) -> &'static str {
        match self {
            Self::Reference => "reference",
            Self::AltScoring => "alt-scoring",
            Self::UnauthorizedNetwork => "unauthorized-network",
            Self::HiddenFsWrite => "hidden-fs-write",
            Self::ExcessiveCalls => "excessive-calls",
            Self::LatencyBreach => "latency-breach",
            Self::UnapprovedDependency => "unapproved-dependency",
            Self::MissingResponseField => "missing-response-field",
            Self::OutOfRangeScore => "out-of-range-score",
            Self::NondeterministicScore => "nondeterministic-score",
            Self::NonmonotoneScore => "nonmonotone-score",
            Self::LateEffect => "late-effect",
            Self::NoHandshake => "no-handshake",
            Self::ExitImmediately => "exit",
            Self::BadFrame => "bad-frame",
            Self::Sleepy => "sleepy",
        }
    }
}

/// The nine-candidate planted-violation corpus: mode token and the exact
/// clause ids its rejection must name. The out-of-range violator trips the
/// response range check in both its structural and behavioral encodings;
/// both clauses describe the one planted defect.
pub const PLANTED_VIOLATIONS: &[(&str, &[&str])] = &[
    ("unauthorized-network", &["outbound_allowlist"]),
    ("hidden-fs-write", &["filesystem_write"]),
    ("excessive-calls", &["max_feature_store_calls_per_request"]),
    ("latency-breach", &["max_latency_ms_p95"]),
    ("unapproved-dependency", &["dependency_allowlist"]),
    ("missing-response-field", &["response_schema"]),
    ("out-of-range-score", &["response_schema", "score_range"]),
    ("nondeterministic-score", &["deterministic_scoring"]),
    ("nonmonotone-score", &["monotone_amount_risk"]),
];

/// Reference strategy: linear in the amount, saturating at 0.99.
pub fn reference_score(amount_cents: f64) -> f64 {
    let raw = amount_cents / 10_000_000.0;
    ((raw * 10_000.0).round() / 10_000.0).clamp(0.0, 0.99)
}

/// Alternate compliant strategy: coarse amount buckets. Distinct scores
/// from the reference strategy on most inputs, still deterministic and
/// monotone.
pub fn alt_score(amount_cents: f64) -> f64 {
    match amount_cents as i64 {
        i64::MIN..=999 => 0.05,
        1_000..=9_999 => 0.2,
        10_000..=99_999 => 0.45,
        100_000..=999_999 => 0.7,
        _ => 0.95,
    }
}

pub fn decision_for(score: f64) -> &'static str {
    if score < 0.3 {
        "approve"
    } else if score < 0.7 {
        "review"
    } else {
        "decline"
    }
}

struct FrameWriter<W: Write> {
    out: BufWriter<W>,
}

impl<W: Write> FrameWriter<W> {
    fn frame(&mut self, doc: &Doc) -> io::Result<()> {
        self.out.write_all(&canonical_bytes(doc))?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

/// The `pdd-candidate` main loop: read request frames from `input`, write
/// protocol frames to `output` per the selected behavior.
pub fn run_candidate(
    mode: CandidateMode,
    args: &[String],
    input: impl BufRead,
    output: impl Write,
) -> io::Result<()> {
    let mut w = FrameWriter { out: BufWriter::new(output) };

    match mode {
        CandidateMode::ExitImmediately => {
            std::process::exit(3);
        }
        CandidateMode::NoHandshake => {
            // Never say hello; the harness handshake timeout fires first.
            std::thread::sleep(std::time::Duration::from_secs(30));
            return Ok(());
        }
        _ => {}
    }

    w.frame(&json!({"type": "hello", "component": "risk.scoring.FraudScore", "mode": mode.token()}))?;
    w.flush()?;

    let sleep_ms: u64 = args.first().and_then(|a| a.parse().ok()).unwrap_or(200);
    let mut replay_counts: HashMap<Vec<u8>, u64> = HashMap::new();

    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let Ok(frame) = serde_json::from_str::<Doc>(&line) else { continue };
        if frame.get("type").and_then(Doc::as_str) != Some("request") {
            continue;
        }
        let seq = frame.get("seq").and_then(Doc::as_u64).unwrap_or(0);
        let body = frame.get("body").cloned().unwrap_or(Doc::Null);

        if mode == CandidateMode::BadFrame {
            w.out.write_all(b"this is not a frame\n")?;
            w.flush()?;
            continue;
        }
        if mode == CandidateMode::Sleepy {
            std::thread::sleep(std::time::Duration::from_millis(sleep_ms));
        }

        handle_request(mode, seq, &body, &mut replay_counts, &mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn request_error(body: &Doc) -> Option<&'static str> {
    let obj = body.as_object()?;
    let tid_ok = obj.get("transaction_id").map(Doc::is_string) == Some(true);
    let aid_ok = obj.get("account_id").map(Doc::is_string) == Some(true);
    let amount_ok = obj
        .get("amount_cents")
        .and_then(Doc::as_i64)
        .map(|a| a >= 0)
        == Some(true);
    if tid_ok && aid_ok && amount_ok {
        None
    } else {
        Some("invalid_request")
    }
}

fn handle_request<W: Write>(
    mode: CandidateMode,
    seq: u64,
    body: &Doc,
    replay_counts: &mut HashMap<Vec<u8>, u64>,
    w: &mut FrameWriter<W>,
) -> io::Result<()> {
    // Fail closed before touching any capability.
    let invalid = if body.is_object() {
        request_error(body)
    } else {
        Some("invalid_request")
    };
    if let Some(kind) = invalid {
        w.frame(&json!({
            "type": "error", "seq": seq, "kind": kind,
            "message": "request is missing a required field or carries a bad type"
        }))?;
        return Ok(());
    }

    let amount = body.get("amount_cents").and_then(Doc::as_f64).unwrap_or(0.0);
    let transaction_id = body
        .get("transaction_id")
        .and_then(Doc::as_str)
        .unwrap_or_default()
        .to_string();

    // Declared capability usage.
    w.frame(&json!({"type": "effect", "kind": "dependency_use", "target": "risk-common"}))?;
    w.frame(&json!({"type": "effect", "kind": "secret_access", "target": "FEATURE_STORE_TOKEN"}))?;
    w.frame(&json!({"type": "effect", "kind": "network_call", "target": FEATURE_STORE}))?;
    match mode {
        CandidateMode::ExcessiveCalls => {
            w.frame(&json!({"type": "effect", "kind": "network_call", "target": FEATURE_STORE}))?;
        }
        CandidateMode::UnauthorizedNetwork => {
            w.frame(&json!({"type": "effect", "kind": "network_call", "target": "payments.external:443"}))?;
        }
        CandidateMode::HiddenFsWrite => {
            w.frame(&json!({"type": "effect", "kind": "fs_write", "target": "/tmp/fraud-cache.bin"}))?;
        }
        CandidateMode::UnapprovedDependency => {
            w.frame(&json!({"type": "effect", "kind": "dependency_use", "target": "left-pad"}))?;
        }
        _ => {}
    }

    let declared_duration_ms: u64 = match mode {
        CandidateMode::LatencyBreach => 120,
        CandidateMode::AltScoring => 55,
        _ => 61,
    };
    let peak_memory_mb: u64 = if mode == CandidateMode::AltScoring { 96 } else { 112 };
    w.frame(&json!({
        "type": "metrics",
        "declared_duration_ms": declared_duration_ms,
        "peak_memory_mb": peak_memory_mb,
    }))?;

    let score = match mode {
        CandidateMode::AltScoring => alt_score(amount),
        CandidateMode::OutOfRangeScore => 1.2,
        // Strictly decreasing across the whole generated amount range, so
        // larger amounts always lower the score.
        CandidateMode::NonmonotoneScore => (1.0 - amount / 2_000_000_000.0).clamp(0.0, 1.0),
        CandidateMode::NondeterministicScore => {
            // A fresh score per repeated call: jitter away from the nearer
            // bound so the drift is never clamped out of sight.
            let key = canonical_bytes(body);
            let count = replay_counts.entry(key).or_insert(0);
            let base = reference_score(amount);
            let jitter = 0.0001 * (*count % 100) as f64;
            *count += 1;
            if base > 0.5 {
                (base - jitter).max(0.0)
            } else {
                (base + jitter).min(0.99)
            }
        }
        _ => reference_score(amount),
    };
    let score = (score * 10_000.0).round() / 10_000.0;

    let mut response = json!({
        "transaction_id": transaction_id,
        "risk_score": score,
        "decision": decision_for(score),
    });
    if mode == CandidateMode::MissingResponseField {
        response.as_object_mut().unwrap().remove("decision");
    }
    w.frame(&json!({"type": "response", "seq": seq, "body": response}))?;

    if mode == CandidateMode::LateEffect {
        w.flush()?;
        w.frame(&json!({"type": "effect", "kind": "network_call", "target": FEATURE_STORE}))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Candidate materialization
// ---------------------------------------------------------------------------

/// Write an executable shim plus candidate manifest for one mode, so every
/// candidate has distinct artifact bytes and therefore a distinct digest.
/// Returns the manifest path.
pub fn write_candidate(
    dir: &Path,
    driver_bin: &Path,
    mode: CandidateMode,
    artifact_id: &str,
) -> io::Result<PathBuf> {
    write_candidate_with_args(dir, driver_bin, mode, artifact_id, &[])
}

pub fn write_candidate_with_args(
    dir: &Path,
    driver_bin: &Path,
    mode: CandidateMode,
    artifact_id: &str,
    extra_args: &[&str],
) -> io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let shim = dir.join(format!("{artifact_id}.sh"));
    let mut script = format!(
        "#!/bin/sh\n# candidate: {artifact_id}\nexec {:?} {}",
        driver_bin.display(),
        mode.token()
    );
    for arg in extra_args {
        script.push(' ');
        script.push_str(arg);
    }
    script.push('\n');
    std::fs::write(&shim, script)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(&shim, std::fs::Permissions::from_mode(0o755))?;
    }
    let manifest = dir.join(format!("{artifact_id}.candidate.yaml"));
    let text = format!(
        "artifact_id: {artifact_id}\nlaunch_command: ['{}']\nlanguage: rust\nruntime: rust-shim\n",
        shim.display()
    );
    std::fs::write(&manifest, text)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Trace fixtures
// ---------------------------------------------------------------------------

fn scoring_invocation(seq: u64, amount: i64, feature_store_calls: usize) -> InvocationRecord {
    let score = reference_score(amount as f64);
    let effects = (0..feature_store_calls)
        .map(|_| crate::harness::EffectEvent {
            kind: crate::harness::EffectKind::NetworkCall,
            target: FEATURE_STORE.to_string(),
            post_response: false,
        })
        .collect();
    InvocationRecord {
        seq,
        request: json!({
            "transaction_id": format!("txn-{seq:04}"),
            "account_id": format!("acct-{:03}", seq % 7),
            "amount_cents": amount,
        }),
        outcome: Outcome::Response(json!({
            "transaction_id": format!("txn-{seq:04}"),
            "risk_score": score,
            "decision": decision_for(score),
        })),
        effects,
        latency_ms: 48 + (seq % 14),
        peak_memory_mb: 112,
    }
}

/// A compliant observation interval.
pub fn compliant_trace(invocations: u64) -> EffectTrace {
    let start = UtcTime::parse("2026-05-11T00:05:00Z").unwrap();
    EffectTrace {
        invocations: (1..=invocations)
            .map(|seq| scoring_invocation(seq, (seq as i64) * 1_750, 1))
            .collect(),
        started_at: start,
        ended_at: UtcTime::from_unix_seconds(start.unix_seconds() + 60),
    }
}

/// The runtime-violation interval: one request makes two feature-store
/// calls against a budget of one.
pub fn runtime_violation_trace() -> EffectTrace {
    let mut trace = compliant_trace(6);
    trace.invocations[3] = scoring_invocation(4, 7_000, 2);
    trace
}
