//! Digest oracle tests: content digests recomputed by an independent
//! system SHA-256 utility over the stored bytes.

mod common;

use std::process::Command;

use common::Workspace;
use pdd::canon::{canonical_line, ContentDigest};
use pdd::corpus::{self, CandidateMode};

/// `sha256sum <path>` via the system utility; None when unavailable.
fn system_sha256(path: &std::path::Path) -> Option<String> {
    let output = Command::new("sha256sum").arg(path).output().ok()?;
    if !output.status.success() {
        return None;
    }
    let text = String::from_utf8_lossy(&output.stdout).into_owned();
    Some(text.split_whitespace().next()?.to_string())
}

fn require_sha256sum() -> bool {
    if Command::new("sha256sum").arg("--version").output().is_ok() {
        true
    } else {
        eprintln!("skipping: no sha256sum utility on this host");
        false
    }
}

#[test]
fn sealed_bundle_digest_matches_the_external_tool() {
    if !require_sha256sum() {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    corpus::write_fraud_score_bundle(dir.path()).unwrap();
    let bundle = pdd::bundle::parse_bundle(dir.path()).unwrap();

    // Emit the exact digest input and hash it with the system utility.
    let content = bundle.content_doc();
    let emitted = dir.path().join("canonical-content.json");
    std::fs::write(&emitted, pdd::canon::canonical_bytes(&content)).unwrap();
    let external = system_sha256(&emitted).expect("sha256sum runs");
    assert_eq!(
        bundle.content_digest().hex(),
        external,
        "sealed digest disagrees with the independent SHA-256 tool"
    );
}

#[test]
fn flipping_one_bundle_byte_changes_the_external_hash_and_the_seal() {
    if !require_sha256sum() {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    corpus::write_fraud_score_bundle(dir.path()).unwrap();
    let before = pdd::bundle::parse_bundle(dir.path()).unwrap();

    let props = dir.path().join("behavioral/scoring.properties.yaml");
    let text = std::fs::read_to_string(&props).unwrap();
    std::fs::write(&props, text.replace("non_decreasing", "non_increasing")).unwrap();
    let after = pdd::bundle::parse_bundle(dir.path()).unwrap();

    let hash_of = |b: &pdd::bundle::ProtocolBundle, name: &str| {
        let path = dir.path().join(name);
        std::fs::write(&path, pdd::canon::canonical_bytes(&b.content_doc())).unwrap();
        system_sha256(&path).unwrap()
    };
    let h_before = hash_of(&before, "c-before.json");
    let h_after = hash_of(&after, "c-after.json");
    assert_ne!(h_before, h_after);
    assert_eq!(before.content_digest().hex(), h_before);
    assert_eq!(after.content_digest().hex(), h_after);
}

#[test]
fn ledger_trace_digest_matches_the_external_hash_of_the_stored_file() {
    if !require_sha256sum() {
        return;
    }
    let ws = Workspace::new();
    let bundle = ws.bundle_dir.to_string_lossy().into_owned();
    let manifest = ws.candidate(CandidateMode::Reference, "risk-scoring-service");
    let admit = ws.pdd(&[
        "validate", &bundle, "--candidate", manifest.to_str().unwrap(),
        "--cases", "10", "--synthetic-clock",
    ]);
    assert_eq!(common::exit_code(&admit), 0, "{}", common::stderr_str(&admit));

    let trace_file = ws.dir.path().join("trace.json");
    std::fs::write(
        &trace_file,
        canonical_line(&serde_json::to_value(corpus::compliant_trace(4)).unwrap()),
    )
    .unwrap();
    let ledger_arg = ws.ledger_path().to_string_lossy().into_owned();
    let attest = ws.pdd(&[
        "attest", &bundle, "--ledger", &ledger_arg,
        "--trace", trace_file.to_str().unwrap(), "--output", "json",
    ]);
    assert_eq!(common::exit_code(&attest), 0, "{}", common::stderr_str(&attest));
    let block = &common::json_doc(&attest)["appended"][0];
    let digest =
        ContentDigest::parse(block["attestation"]["trace_digest"].as_str().unwrap()).unwrap();
    let location = block["attestation"]["raw_trace_location"].as_str().unwrap();

    let stored = ws.ledger_path().parent().unwrap().join(location);
    let external = system_sha256(&stored).expect("sha256sum runs");
    assert_eq!(digest.hex(), external, "block digest disagrees with the external hash");
}
