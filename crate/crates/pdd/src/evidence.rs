//! Discovery logs, signed evidence objects, and rejection reports.
//!
//! An evidence object is the admission record: it binds the protocol
//! (id, version, bundle digest), the implementation artifact, the validator
//! identities and their results, and the issuing time under one detached
//! signature. Rejections never produce evidence; they produce unsigned
//! rejection reports carrying the failing clauses, stored beside evidence
//! for audit.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Number;

use crate::bundle::SealedBundle;
use crate::canon::{canonical_bytes, ContentDigest, Doc};
use crate::harness::{CandidateRef, EffectTrace, Outcome};
use crate::sign::{SignError, SigningIdentity, TrustMap, SIGNATURE_SCHEME};
use crate::time::{Clock, UtcTime};
use crate::validate::{Counterexample, ValidatorResult, Verdict};

/// Protocol identity as bound into evidence and ledger blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolBinding {
    pub protocol_id: String,
    pub version: String,
    pub bundle_digest: ContentDigest,
}

impl ProtocolBinding {
    pub fn of(sealed: &SealedBundle) -> Self {
        Self {
            protocol_id: sealed.bundle.protocol_id.clone(),
            version: sealed.bundle.version.to_string(),
            bundle_digest: sealed.bundle_digest.clone(),
        }
    }
}

/// Implementation identity as bound into evidence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImplementationBinding {
    pub artifact_id: String,
    pub artifact_digest: ContentDigest,
    pub language: String,
    pub runtime: String,
}

impl ImplementationBinding {
    pub fn of(candidate: &CandidateRef) -> Self {
        Self {
            artifact_id: candidate.artifact_id.clone(),
            artifact_digest: candidate.artifact_digest.clone(),
            language: candidate.language.clone(),
            runtime: candidate.runtime.clone(),
        }
    }
}

/// A validator result summary: identity, verdict, metrics; no clause list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidatorSummary {
    pub name: String,
    pub version: String,
    pub result: Verdict,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, u64>,
}

impl From<&ValidatorResult> for ValidatorSummary {
    fn from(r: &ValidatorResult) -> Self {
        Self {
            name: r.name.clone(),
            version: r.version.clone(),
            result: r.result,
            metrics: r.metrics.clone(),
        }
    }
}

/// The signed admission record. `decision` is always `admit`: rejection
/// never produces an evidence object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceObject {
    pub evidence_id: String,
    pub protocol: ProtocolBinding,
    pub implementation: ImplementationBinding,
    pub validators: Vec<ValidatorSummary>,
    pub decision: String,
    pub trace_digest: ContentDigest,
    pub issued_at: UtcTime,
    pub issuer: String,
    pub signature_scheme: String,
    pub signature: String,
}

impl EvidenceObject {
    pub fn to_doc(&self) -> Doc {
        serde_json::to_value(self).expect("evidence serializes")
    }

    /// Canonical bytes of every field preceding the signature.
    pub fn signed_payload(&self) -> Vec<u8> {
        let mut doc = self.to_doc();
        if let Doc::Object(map) = &mut doc {
            map.remove("signature");
        }
        canonical_bytes(&doc)
    }

    pub fn from_doc(doc: &Doc) -> Result<Self, serde_json::Error> {
        serde_json::from_value(doc.clone())
    }
}

/// One failed clause inside a rejection report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedClause {
    pub validator: String,
    pub clause_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterexample: Option<Counterexample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_value: Option<Number>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed_value: Option<Number>,
}

/// The unsigned record of a failed admission: same bindings as evidence,
/// no decision, no signature, at least one failed clause.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionReport {
    pub rejection_id: String,
    pub protocol: ProtocolBinding,
    pub implementation: ImplementationBinding,
    pub validators: Vec<ValidatorSummary>,
    pub failed_clauses: Vec<FailedClause>,
    pub trace_digest: ContentDigest,
    pub issued_at: UtcTime,
    pub issuer: String,
}

impl RejectionReport {
    pub fn to_doc(&self) -> Doc {
        serde_json::to_value(self).expect("rejection serializes")
    }
}

/// Admission outcome: signed evidence or an unsigned rejection.
#[derive(Debug, Clone)]
pub enum AdmissionDecision {
    Admitted(EvidenceObject),
    Rejected(RejectionReport),
}

impl AdmissionDecision {
    pub fn evidence(&self) -> Option<&EvidenceObject> {
        match self {
            AdmissionDecision::Admitted(e) => Some(e),
            AdmissionDecision::Rejected(_) => None,
        }
    }

    pub fn rejection(&self) -> Option<&RejectionReport> {
        match self {
            AdmissionDecision::Rejected(r) => Some(r),
            AdmissionDecision::Admitted(_) => None,
        }
    }
}

/// Build the admission decision for one validation run.
///
/// `sequence` numbers the evidence within its issue date, rendering ids
/// like `evd_2026_05_11_001`.
pub fn build_evidence(
    sealed: &SealedBundle,
    candidate: &CandidateRef,
    results: &[ValidatorResult],
    trace_digest: ContentDigest,
    clock: &dyn Clock,
    identity: &SigningIdentity,
    sequence: u32,
) -> Result<AdmissionDecision, SignError> {
    let issued_at = clock.now();
    let validators: Vec<ValidatorSummary> = results.iter().map(ValidatorSummary::from).collect();
    let all_passed = results.iter().all(|r| r.passed());

    if !all_passed {
        let failed_clauses: Vec<FailedClause> = results
            .iter()
            .flat_map(|r| {
                r.clauses.iter().filter(|c| !c.passed).map(|c| FailedClause {
                    validator: r.name.clone(),
                    clause_id: c.clause_id.clone(),
                    counterexample: c.counterexample.clone(),
                    observed_value: c.observed_value.clone(),
                    allowed_value: c.allowed_value.clone(),
                })
            })
            .collect();
        debug_assert!(!failed_clauses.is_empty(), "rejection without failed clauses");
        return Ok(AdmissionDecision::Rejected(RejectionReport {
            rejection_id: format!("rej_{}_{sequence:03}", issued_at.date_id()),
            protocol: ProtocolBinding::of(sealed),
            implementation: ImplementationBinding::of(candidate),
            validators,
            failed_clauses,
            trace_digest,
            issued_at,
            issuer: identity.issuer.clone(),
        }));
    }

    let mut evidence = EvidenceObject {
        evidence_id: format!("evd_{}_{sequence:03}", issued_at.date_id()),
        protocol: ProtocolBinding::of(sealed),
        implementation: ImplementationBinding::of(candidate),
        validators,
        decision: "admit".to_string(),
        trace_digest,
        issued_at,
        issuer: identity.issuer.clone(),
        signature_scheme: SIGNATURE_SCHEME.to_string(),
        signature: String::new(),
    };
    evidence.signature = identity.sign(&evidence.signed_payload());
    Ok(AdmissionDecision::Admitted(evidence))
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

/// One verification check and its outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// The full verdict: one entry per check, pass only if all passed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationVerdict {
    pub ok: bool,
    pub checks: Vec<CheckResult>,
}

impl VerificationVerdict {
    fn from_checks(checks: Vec<CheckResult>) -> Self {
        Self {
            ok: checks.iter().all(|c| c.passed),
            checks,
        }
    }
}

/// Resolves (protocol_id, version) to the registry's sealed digest.
pub trait BundleDigestLookup {
    fn sealed_digest(&self, protocol_id: &str, version: &str) -> Option<ContentDigest>;
}

impl<F> BundleDigestLookup for F
where
    F: Fn(&str, &str) -> Option<ContentDigest>,
{
    fn sealed_digest(&self, protocol_id: &str, version: &str) -> Option<ContentDigest> {
        self(protocol_id, version)
    }
}

/// Verify an evidence object: issuer trust, signature, decision, and the
/// registry binding of the named bundle. All failures are verdict entries,
/// never errors.
pub fn verify_evidence(
    evidence: &EvidenceObject,
    trust: &TrustMap,
    registry: &dyn BundleDigestLookup,
) -> VerificationVerdict {
    let mut checks = Vec::new();

    let issuer_known = trust.issuers.contains_key(&evidence.issuer);
    checks.push(CheckResult {
        name: "issuer_trusted".to_string(),
        passed: issuer_known,
        detail: if issuer_known {
            format!("issuer {} is trusted", evidence.issuer)
        } else {
            format!("issuer {} is not in the trust map", evidence.issuer)
        },
    });

    let signature = if issuer_known {
        trust.verify(&evidence.issuer, &evidence.signed_payload(), &evidence.signature)
    } else {
        Err(SignError::UnknownIssuer(evidence.issuer.clone()))
    };
    checks.push(CheckResult {
        name: "signature".to_string(),
        passed: signature.is_ok(),
        detail: match &signature {
            Ok(()) => "detached signature verifies over canonical payload".to_string(),
            Err(e) => e.to_string(),
        },
    });

    checks.push(CheckResult {
        name: "decision".to_string(),
        passed: evidence.decision == "admit",
        detail: format!("decision is {:?}", evidence.decision),
    });

    let registry_digest =
        registry.sealed_digest(&evidence.protocol.protocol_id, &evidence.protocol.version);
    let (bound, detail) = match registry_digest {
        Some(d) if d == evidence.protocol.bundle_digest => {
            (true, "bundle digest matches the registry's sealed bundle".to_string())
        }
        Some(d) => (
            false,
            format!("registry digest {d} differs from evidence digest {}", evidence.protocol.bundle_digest),
        ),
        None => (
            false,
            format!(
                "registry has no sealed bundle for {}@{}",
                evidence.protocol.protocol_id, evidence.protocol.version
            ),
        ),
    };
    checks.push(CheckResult {
        name: "registry_binding".to_string(),
        passed: bound,
        detail,
    });

    VerificationVerdict::from_checks(checks)
}

// ---------------------------------------------------------------------------
// Discovery logs
// ---------------------------------------------------------------------------

/// As-built record of what a validated implementation was observed to be.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryLog {
    pub implementation: ImplementationBinding,
    pub dependency_graph: Vec<DependencyUse>,
    pub generated_files: Vec<FileRecord>,
    pub validators: Vec<ValidatorIdentity>,
    pub property_coverage: PropertyCoverage,
    pub resource_usage: ResourceUsage,
    pub derived_behaviors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyUse {
    pub package: String,
    pub observed_uses: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub name: String,
    pub digest: ContentDigest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidatorIdentity {
    pub name: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertyCoverage {
    pub properties_declared: u64,
    pub properties_run: u64,
    pub generated_cases: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceUsage {
    pub invocations: u64,
    pub max_latency_ms_p95: u64,
    pub peak_memory_mb: u64,
}

/// Derive the discovery log from a finished validation run. Digests are
/// recomputed from the trace and artifact identity, not copied from the
/// validator results.
pub fn build_discovery_log(
    sealed: &SealedBundle,
    candidate: &CandidateRef,
    results: &[ValidatorResult],
    trace: &EffectTrace,
) -> DiscoveryLog {
    let mut dependency_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut decisions: BTreeSet<String> = BTreeSet::new();
    let mut effect_kinds: BTreeSet<String> = BTreeSet::new();
    for inv in &trace.invocations {
        for effect in &inv.effects {
            if effect.kind == crate::harness::EffectKind::DependencyUse {
                *dependency_counts.entry(effect.target.clone()).or_insert(0) += 1;
            }
            effect_kinds.insert(format!("{:?}", effect.kind));
        }
        if let Outcome::Response(body) = &inv.outcome {
            if let Some(d) = body.get("decision").and_then(Doc::as_str) {
                decisions.insert(d.to_string());
            }
        }
    }

    let latencies: Vec<u64> = trace.invocations.iter().map(|i| i.latency_ms).collect();
    let generated_cases = results
        .iter()
        .find(|r| r.name == crate::validate::PROPERTY_CHECK)
        .and_then(|r| r.metrics.get("generated_cases").copied())
        .unwrap_or(0);

    let mut derived_behaviors = Vec::new();
    if !decisions.is_empty() {
        derived_behaviors.push(format!(
            "observed decision values: {}",
            decisions.into_iter().collect::<Vec<_>>().join(", ")
        ));
    }
    if !effect_kinds.is_empty() {
        derived_behaviors.push(format!(
            "observed effect kinds: {}",
            effect_kinds.into_iter().collect::<Vec<_>>().join(", ")
        ));
    }

    DiscoveryLog {
        implementation: ImplementationBinding::of(candidate),
        dependency_graph: dependency_counts
            .into_iter()
            .map(|(package, observed_uses)| DependencyUse { package, observed_uses })
            .collect(),
        generated_files: vec![FileRecord {
            name: candidate.artifact_id.clone(),
            digest: candidate.artifact_digest.clone(),
        }],
        validators: results
            .iter()
            .map(|r| ValidatorIdentity { name: r.name.clone(), version: r.version.clone() })
            .collect(),
        property_coverage: PropertyCoverage {
            properties_declared: sealed.bundle.behavioral.len() as u64,
            properties_run: results
                .iter()
                .find(|r| r.name == crate::validate::PROPERTY_CHECK)
                .map(|r| r.clauses.len() as u64)
                .unwrap_or(0),
            generated_cases,
        },
        resource_usage: ResourceUsage {
            invocations: trace.invocations.len() as u64,
            max_latency_ms_p95: crate::surface::p95_nearest_rank(&latencies),
            peak_memory_mb: trace.invocations.iter().map(|i| i.peak_memory_mb).max().unwrap_or(0),
        },
        derived_behaviors,
    }
}

impl DiscoveryLog {
    pub fn to_doc(&self) -> Doc {
        serde_json::to_value(self).expect("discovery log serializes")
    }
}

/// Digest of a trace as stored on disk (canonical document plus trailing
/// LF), so hashing the stored file reproduces the binding directly.
pub fn trace_digest(trace: &EffectTrace) -> ContentDigest {
    let doc = serde_json::to_value(trace).expect("trace serializes");
    ContentDigest::of_bytes(&crate::canon::canonical_line(&doc))
}
