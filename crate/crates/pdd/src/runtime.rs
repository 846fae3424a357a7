//! The runtime verification layer: monitorable projections, continuous
//! attestation, and the append-only Dynamic Evidence Ledger.
//!
//! A ledger is one `runtime-ledger.jsonl` file. Line 0 is the admission
//! evidence object (build-time admission roots the chain); every further
//! line is a signed attestation block whose `previous_block_digest` is the
//! SHA-256 of the predecessor's stored line. Raw interval traces live in
//! sibling `traces/<digest>.json` files; blocks carry the digest and the
//! location, never the payloads.
//!
//! Attestation evaluates the monitorable projection of the guarantee
//! surface over one observation interval. A violation block names the
//! first violated clause in deterministic order (clause declaration order,
//! then observation order) and records the enforcement action selected by
//! the policy table. Nothing in this module produces an evidence object:
//! repaired artifacts re-enter validation as ordinary candidates.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Number;

use crate::bundle::PropertyKind;
use crate::canon::{canonical_line, ContentDigest, Doc};
use crate::evidence::EvidenceObject;
use crate::harness::EffectTrace;
use crate::sign::{SigningIdentity, TrustMap};
use crate::surface::{ClauseCategory, CompiledClause, GuaranteeSurface, Violation};
use crate::time::{Clock, UtcTime};

/// Version reported by pass blocks, which no single category validator
/// owns.
pub const RUNTIME_VERIFIER_NAME: &str = "runtime-verifier";
pub const RUNTIME_VERIFIER_VERSION: &str = "0.1.0";

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    /// Head verification failed; nothing was appended.
    #[error("ledger corrupt at index {index}: {reason}")]
    LedgerCorrupt { index: usize, reason: String },
    #[error("ledger file already exists: {0}")]
    AlreadyExists(PathBuf),
    #[error("ledger file is empty or missing a genesis evidence object")]
    MissingGenesis,
    #[error("ledger line {index} does not parse: {reason}")]
    MalformedRecord { index: usize, reason: String },
    #[error("attestation interval is empty")]
    EmptyInterval,
    #[error(transparent)]
    Sign(#[from] crate::sign::SignError),
    #[error("ledger I/O failure: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Monitorable projection
// ---------------------------------------------------------------------------

/// The subset of guarantee-surface clauses evaluable from an observation
/// trace alone. Structural clauses and operational budget/allowlist
/// clauses are always monitorable; behavioral clauses are monitorable for
/// the `range` and `fails_closed` kinds, which judge single observed
/// exchanges. Determinism, monotonicity, and idempotence need controlled
/// re-invocation and are excluded.
#[derive(Debug, Clone)]
pub struct RuntimeProjection {
    pub included: Vec<CompiledClause>,
    pub excluded: Vec<String>,
}

impl RuntimeProjection {
    pub fn included_ids(&self) -> Vec<&str> {
        self.included.iter().map(|c| c.id.as_str()).collect()
    }

    pub fn evaluate(&self, trace: &EffectTrace) -> Vec<Violation> {
        crate::surface::evaluate_clauses(&self.included, trace)
    }
}

/// Deterministic partition of the surface into monitorable and excluded
/// clauses.
pub fn project_monitorable(surface: &GuaranteeSurface) -> RuntimeProjection {
    let mut included = Vec::new();
    let mut excluded = Vec::new();
    for clause in &surface.clauses {
        let monitorable = match clause.category {
            ClauseCategory::Structural
            | ClauseCategory::OperationalAllowlist
            | ClauseCategory::OperationalBudget => true,
            ClauseCategory::Behavioral => matches!(
                clause.property_kind(),
                Some(PropertyKind::Range) | Some(PropertyKind::FailsClosed)
            ),
        };
        if monitorable {
            included.push(clause.clone());
        } else {
            excluded.push(clause.id.clone());
        }
    }
    RuntimeProjection { included, excluded }
}

// ---------------------------------------------------------------------------
// Ledger records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Pass,
    Violation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuntimeAction {
    None,
    Block,
    Quarantine,
    RateLimit,
    Rollback,
}

/// Enforcement policy: clause category to action. Enforcement here is a
/// recorded decision, not live traffic control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionPolicy {
    pub structural: RuntimeAction,
    pub behavioral: RuntimeAction,
    pub operational_allowlist: RuntimeAction,
    pub operational_budget: RuntimeAction,
}

impl Default for ActionPolicy {
    fn default() -> Self {
        Self {
            structural: RuntimeAction::Block,
            behavioral: RuntimeAction::RateLimit,
            operational_allowlist: RuntimeAction::RateLimit,
            operational_budget: RuntimeAction::Quarantine,
        }
    }
}

impl ActionPolicy {
    pub fn action_for(&self, category: ClauseCategory) -> RuntimeAction {
        match category {
            ClauseCategory::Structural => self.structural,
            ClauseCategory::Behavioral => self.behavioral,
            ClauseCategory::OperationalAllowlist => self.operational_allowlist,
            ClauseCategory::OperationalBudget => self.operational_budget,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolRef {
    pub protocol_id: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImplementationRef {
    pub artifact_digest: ContentDigest,
    pub deployed_version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierRef {
    pub name: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: UtcTime,
    pub end: UtcTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attestation {
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub violated_invariant: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_value: Option<Number>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed_value: Option<Number>,
    pub trace_digest: ContentDigest,
    pub raw_trace_location: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub runtime: RuntimeAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remediation_context: Option<String>,
}

/// One attestation block. The `issuer` field names the trust-map identity
/// that signed the block; the remaining fields follow the on-disk block
/// shape used throughout the evidence namespace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerBlock {
    pub ledger_block_id: String,
    pub previous_block_digest: ContentDigest,
    pub protocol: ProtocolRef,
    pub implementation: ImplementationRef,
    pub runtime_verifier: VerifierRef,
    pub interval: Interval,
    pub attestation: Attestation,
    pub action: Action,
    pub issuer: String,
    pub signature: String,
}

impl LedgerBlock {
    pub fn to_doc(&self) -> Doc {
        serde_json::to_value(self).expect("block serializes")
    }

    pub fn signed_payload(&self) -> Vec<u8> {
        let mut doc = self.to_doc();
        if let Doc::Object(map) = &mut doc {
            map.remove("signature");
        }
        crate::canon::canonical_bytes(&doc)
    }

    fn check_shape(&self) -> Result<(), String> {
        match self.attestation.decision {
            Decision::Violation if self.attestation.violated_invariant.is_none() => {
                Err("violation block without violated_invariant".to_string())
            }
            Decision::Pass if self.action.runtime != RuntimeAction::None => {
                Err("pass block with a runtime action".to_string())
            }
            _ => Ok(()),
        }
    }
}

/// One observation interval to attest.
#[derive(Debug, Clone)]
pub struct AttestationInterval {
    pub observations: EffectTrace,
    pub start: UtcTime,
    pub end: UtcTime,
}

impl AttestationInterval {
    pub fn of_trace(observations: EffectTrace) -> Self {
        let start = observations.started_at;
        let end = observations.ended_at;
        Self { observations, start, end }
    }
}

/// Digest convention for stored records: SHA-256 over the stored line
/// bytes (canonical document plus trailing LF), so an external hash of the
/// file reproduces it directly.
pub fn stored_digest(doc: &Doc) -> ContentDigest {
    ContentDigest::of_bytes(&canonical_line(doc))
}

// ---------------------------------------------------------------------------
// The ledger
// ---------------------------------------------------------------------------

/// An open ledger: parsed records plus the stored line bytes the hash
/// links cover.
#[derive(Debug, Clone)]
pub struct Ledger {
    pub path: PathBuf,
    pub genesis: EvidenceObject,
    pub blocks: Vec<LedgerBlock>,
    lines: Vec<Vec<u8>>,
}

impl Ledger {
    /// Start a ledger rooted at a verified admission evidence object.
    pub fn create(path: &Path, genesis: &EvidenceObject) -> Result<Ledger, RuntimeError> {
        if path.exists() {
            return Err(RuntimeError::AlreadyExists(path.to_path_buf()));
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let line = canonical_line(&genesis.to_doc());
        std::fs::write(path, &line)?;
        Ok(Ledger {
            path: path.to_path_buf(),
            genesis: genesis.clone(),
            blocks: Vec::new(),
            lines: vec![line],
        })
    }

    pub fn open(path: &Path) -> Result<Ledger, RuntimeError> {
        // Parsed at the byte level so a corrupt record (including invalid
        // UTF-8) is reported at its own index.
        let bytes = std::fs::read(path)?;
        let mut lines: Vec<Vec<u8>> = Vec::new();
        let mut genesis: Option<EvidenceObject> = None;
        let mut blocks = Vec::new();
        for (index, raw) in bytes.split(|b| *b == b'\n').enumerate() {
            if raw.iter().all(|b| b.is_ascii_whitespace()) {
                continue;
            }
            let mut stored = raw.to_vec();
            stored.push(b'\n');
            lines.push(stored);
            if index == 0 {
                let doc: Doc = serde_json::from_slice(raw).map_err(|e| {
                    RuntimeError::MalformedRecord { index, reason: e.to_string() }
                })?;
                genesis = Some(EvidenceObject::from_doc(&doc).map_err(|e| {
                    RuntimeError::MalformedRecord { index, reason: e.to_string() }
                })?);
            } else {
                let block: LedgerBlock = serde_json::from_slice(raw).map_err(|e| {
                    RuntimeError::MalformedRecord { index, reason: e.to_string() }
                })?;
                blocks.push(block);
            }
        }
        Ok(Ledger {
            path: path.to_path_buf(),
            genesis: genesis.ok_or(RuntimeError::MissingGenesis)?,
            blocks,
            lines,
        })
    }

    /// Total records including genesis.
    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// Digest of the newest stored record.
    pub fn head_digest(&self) -> ContentDigest {
        ContentDigest::of_bytes(self.lines.last().expect("ledger has a genesis"))
    }

    pub fn block_by_id(&self, ledger_block_id: &str) -> Option<&LedgerBlock> {
        self.blocks.iter().find(|b| b.ledger_block_id == ledger_block_id)
    }

    /// Directory that `raw_trace_location` entries resolve against.
    pub fn trace_root(&self) -> PathBuf {
        self.path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
    }

    fn append_line(&mut self, line: Vec<u8>) -> Result<(), RuntimeError> {
        let mut file = std::fs::OpenOptions::new().append(true).open(&self.path)?;
        file.write_all(&line)?;
        file.flush()?;
        self.lines.push(line);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Attestation
// ---------------------------------------------------------------------------

/// What attest_interval needs beyond the ledger and the interval.
pub struct AttestOptions<'a> {
    pub projection: &'a RuntimeProjection,
    pub policy: ActionPolicy,
    pub clock: &'a dyn Clock,
    pub identity: &'a SigningIdentity,
    pub trust: &'a TrustMap,
    pub deployed_version: String,
}

/// Evaluate one interval against the monitorable projection and append the
/// signed pass/violation block. The ledger is verified up to its head
/// first; a corrupt ledger appends nothing.
pub fn attest_interval(
    ledger: &mut Ledger,
    surface: &GuaranteeSurface,
    interval: AttestationInterval,
    options: &AttestOptions<'_>,
) -> Result<LedgerBlock, RuntimeError> {
    if interval.observations.invocations.is_empty() {
        return Err(RuntimeError::EmptyInterval);
    }
    let verdict = verify_chain(ledger, options.trust);
    if let Some(failure) = verdict.first_failure {
        return Err(RuntimeError::LedgerCorrupt {
            index: failure.index,
            reason: failure.reason,
        });
    }

    // Store the raw interval trace, content-addressed beside the ledger.
    let trace_doc = serde_json::to_value(&interval.observations).expect("trace serializes");
    let trace_digest = stored_digest(&trace_doc);
    let trace_rel = format!("traces/{}.json", trace_digest.hex());
    let trace_path = ledger.trace_root().join(&trace_rel);
    if !trace_path.exists() {
        crate::store::write_atomic(&trace_path, &canonical_line(&trace_doc))?;
    }

    let violations = options.projection.evaluate(&interval.observations);
    let first = violations.first();
    let decision = if first.is_none() { Decision::Pass } else { Decision::Violation };

    let block_number = ledger.blocks.len() + 1;
    let now = options.clock.now();
    let (verifier, action, remediation_context, violated) = match first {
        None => (
            VerifierRef {
                name: RUNTIME_VERIFIER_NAME.to_string(),
                version: RUNTIME_VERIFIER_VERSION.to_string(),
            },
            RuntimeAction::None,
            None,
            None,
        ),
        Some(v) => {
            let clause = surface.clause(&v.clause_id);
            let category = clause.map(|c| c.category).unwrap_or(ClauseCategory::Structural);
            let verifier = match category {
                ClauseCategory::Structural => VerifierRef {
                    name: crate::validate::SCHEMA_CONFORMANCE.to_string(),
                    version: crate::validate::SCHEMA_CONFORMANCE_VERSION.to_string(),
                },
                ClauseCategory::Behavioral => VerifierRef {
                    name: crate::validate::PROPERTY_CHECK.to_string(),
                    version: crate::validate::PROPERTY_CHECK_VERSION.to_string(),
                },
                ClauseCategory::OperationalAllowlist | ClauseCategory::OperationalBudget => {
                    VerifierRef {
                        name: crate::validate::CAPABILITY_MONITOR.to_string(),
                        version: crate::validate::CAPABILITY_MONITOR_VERSION.to_string(),
                    }
                }
            };
            (
                verifier,
                options.policy.action_for(category),
                Some(format!("repairctx_{}_{block_number:04}", now.date_id())),
                Some(v.clone()),
            )
        }
    };

    let mut block = LedgerBlock {
        ledger_block_id: format!("evd_{}_runtime_{block_number:04}", now.date_id()),
        previous_block_digest: ledger.head_digest(),
        protocol: ProtocolRef {
            protocol_id: ledger.genesis.protocol.protocol_id.clone(),
            version: ledger.genesis.protocol.version.clone(),
        },
        implementation: ImplementationRef {
            artifact_digest: ledger.genesis.implementation.artifact_digest.clone(),
            deployed_version: options.deployed_version.clone(),
        },
        runtime_verifier: verifier,
        interval: Interval { start: interval.start, end: interval.end },
        attestation: Attestation {
            decision,
            violated_invariant: violated.as_ref().map(|v| v.clause_id.clone()),
            observed_value: violated.as_ref().and_then(|v| v.observed_value.clone()),
            allowed_value: violated.as_ref().and_then(|v| v.allowed_value.clone()),
            trace_digest,
            raw_trace_location: trace_rel,
        },
        action: Action {
            runtime: action,
            remediation_context,
        },
        issuer: options.identity.issuer.clone(),
        signature: String::new(),
    };
    block.signature = options.identity.sign(&block.signed_payload());
    debug_assert!(block.check_shape().is_ok());

    ledger.append_line(canonical_line(&block.to_doc()))?;
    ledger.blocks.push(block.clone());
    Ok(block)
}

// ---------------------------------------------------------------------------
// Chain verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainFailure {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainVerdict {
    pub ok: bool,
    pub records: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_failure: Option<ChainFailure>,
}

/// Verify genesis evidence, every block signature, every hash link, every
/// block-shape invariant, and every resolvable raw-trace binding. Reports
/// the first failing record index.
pub fn verify_chain(ledger: &Ledger, trust: &TrustMap) -> ChainVerdict {
    let fail = |index: usize, reason: String| ChainVerdict {
        ok: false,
        records: ledger.len(),
        first_failure: Some(ChainFailure { index, reason }),
    };

    // Genesis: a verifiable evidence object.
    let genesis = &ledger.genesis;
    if genesis.decision != "admit" {
        return fail(0, format!("genesis decision is {:?}", genesis.decision));
    }
    if let Err(e) = trust.verify(&genesis.issuer, &genesis.signed_payload(), &genesis.signature) {
        return fail(0, format!("genesis evidence does not verify: {e}"));
    }
    // The stored genesis line must reproduce the parsed object byte for
    // byte; a tampered line that still parses shows up here.
    if ledger.lines.first().map(|l| l != &canonical_line(&genesis.to_doc())) == Some(true) {
        return fail(0, "stored genesis line is not the canonical evidence object".to_string());
    }

    for (i, block) in ledger.blocks.iter().enumerate() {
        let index = i + 1;
        if let Err(reason) = block.check_shape() {
            return fail(index, reason);
        }
        if ledger.lines.get(index).map(|l| l != &canonical_line(&block.to_doc())) == Some(true) {
            return fail(index, "stored line is not the canonical block".to_string());
        }
        let expected_prev = ContentDigest::of_bytes(&ledger.lines[index - 1]);
        if block.previous_block_digest != expected_prev {
            return fail(
                index,
                format!(
                    "hash link broken: block names {}, predecessor is {expected_prev}",
                    block.previous_block_digest
                ),
            );
        }
        if let Err(e) = trust.verify(&block.issuer, &block.signed_payload(), &block.signature) {
            return fail(index, format!("block signature does not verify: {e}"));
        }
        // Trace binding: recompute the digest from the raw trace file.
        let trace_path = ledger.trace_root().join(&block.attestation.raw_trace_location);
        match std::fs::read(&trace_path) {
            Ok(bytes) => {
                let actual = ContentDigest::of_bytes(&bytes);
                if actual != block.attestation.trace_digest {
                    return fail(
                        index,
                        format!(
                            "raw trace digest mismatch: block names {}, file hashes to {actual}",
                            block.attestation.trace_digest
                        ),
                    );
                }
            }
            Err(e) => {
                return fail(
                    index,
                    format!("raw trace {} unreadable: {e}", block.attestation.raw_trace_location),
                )
            }
        }
    }

    ChainVerdict {
        ok: true,
        records: ledger.len(),
        first_failure: None,
    }
}

/// Convenience map of block categories for enforcement summaries.
pub fn violation_counts(ledger: &Ledger) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for block in &ledger.blocks {
        if block.attestation.decision == Decision::Violation {
            if let Some(clause) = &block.attestation.violated_invariant {
                *out.entry(clause.clone()).or_insert(0) += 1;
            }
        }
    }
    out
}
