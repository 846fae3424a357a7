//! The `pdd` command-line surface: seal, negotiate, validate, verify,
//! attest, remediate, and registry operations for engineers and CI.
//!
//! Exit codes are the CI contract:
//!
//! * `0` — success
//! * `1` — admission or attestation failure (rejection, violation block,
//!   failed refinement, negotiation conflicts, disqualified candidate)
//! * `2` — usage or I/O error
//! * `3` — integrity failure (digest, signature, or chain verification)
//!
//! With `--output json` every command emits exactly one canonical document
//! on stdout.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::bundle::{parse_bundle, seal_bundle, SealedBundle};
use crate::canon::{canonical_line, Doc};
use crate::evidence::{
    build_discovery_log, build_evidence, trace_digest, verify_evidence, AdmissionDecision,
    EvidenceObject,
};
use crate::harness::{
    load_candidate_manifest, ClockMode, EffectTrace, HarnessError, HarnessPolicy, ProcessCandidate,
};
use crate::negotiate::{negotiate, NegotiateError};
use crate::refine::check_refinement;
use crate::remediate::build_repair_context;
use crate::runtime::{
    attest_interval, project_monitorable, verify_chain, ActionPolicy, AttestOptions,
    AttestationInterval, Decision, Ledger, RuntimeError,
};
use crate::sign::SigningIdentity;
use crate::store::{RegistryHandle, StoreError};
use crate::surface::compile_guarantees;
use crate::time::SystemClock;
use crate::validate::{validate, PropertyRun, ValidateError, ValidationOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INTEGRITY: i32 = 3;

const DEFAULT_ISSUER: &str = "validation-engine.example";
const ADMISSION_RECORD: &str = "admission-record.json";

#[derive(Debug, Parser)]
#[command(
    name = "pdd",
    about = "Protocol-driven admission and attestation toolchain",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output mode: human text or one canonical JSON document.
    #[arg(long, global = true, value_enum, default_value_t = OutputMode::Text)]
    output: OutputMode,
    /// Registry root (defaults to $PDD_REGISTRY).
    #[arg(long, global = true)]
    registry: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputMode {
    Text,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse, validate, and seal a bundle directory; print its digest.
    Seal {
        bundle_dir: PathBuf,
        /// Also write the sealed descriptor to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Resolve dependencies and seal with pinned versions in provenance.
    Negotiate {
        bundle_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate a candidate against a sealed bundle and emit evidence or a
    /// rejection report.
    Validate {
        /// Bundle directory or `protocol_id@version` registry reference.
        bundle_ref: String,
        /// Candidate manifest file.
        #[arg(long)]
        candidate: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Behavioral cases per property (default: declared case counts).
        #[arg(long)]
        cases: Option<u32>,
        /// Use candidate-declared durations instead of wall time.
        #[arg(long, default_value_t = false)]
        synthetic_clock: bool,
        #[arg(long, default_value = DEFAULT_ISSUER)]
        issuer: String,
    },
    /// Verify an evidence object: trust, signature, registry binding.
    VerifyEvidence { evidence_file: PathBuf },
    /// Attest an observation trace against a bundle, appending ledger
    /// blocks.
    Attest {
        /// Bundle directory or registry reference.
        bundle_ref: String,
        #[arg(long)]
        ledger: PathBuf,
        /// Observation trace file (a serialized effect trace).
        #[arg(long)]
        trace: PathBuf,
        /// Observations per attestation interval (default: whole trace).
        #[arg(long)]
        interval_size: Option<usize>,
        /// Admission evidence for a new ledger's genesis record.
        #[arg(long)]
        evidence: Option<PathBuf>,
        #[arg(long)]
        deployed_version: Option<String>,
        #[arg(long, default_value = DEFAULT_ISSUER)]
        issuer: String,
    },
    /// Verify a ledger chain end to end.
    VerifyLedger { ledger_file: PathBuf },
    /// Check that the first bundle refines the second.
    RefineCheck { refined_ref: String, base_ref: String },
    /// Build a repair context from a violation block.
    Remediate {
        #[arg(long)]
        ledger: PathBuf,
        /// Ledger block id (defaults to the newest violation block).
        #[arg(long)]
        block: Option<String>,
    },
    /// Registry operations.
    Registry {
        #[command(subcommand)]
        op: RegistryOp,
    },
}

#[derive(Debug, Subcommand)]
enum RegistryOp {
    /// Seal and publish a bundle directory.
    Publish { bundle_dir: PathBuf },
    /// Fetch a published bundle into a directory.
    Get {
        protocol_id: String,
        version: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List published bundles.
    List,
}

struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    fn integrity(message: impl Into<String>) -> Self {
        Self { code: EXIT_INTEGRITY, message: message.into() }
    }
}

impl From<crate::bundle::BundleError> for CliError {
    fn from(e: crate::bundle::BundleError) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::DigestMismatch { .. } => Self::integrity(e.to_string()),
            other => Self::usage(other.to_string()),
        }
    }
}

impl From<crate::sign::SignError> for CliError {
    fn from(e: crate::sign::SignError) -> Self {
        match e {
            crate::sign::SignError::BadSignature { .. }
            | crate::sign::SignError::UnknownIssuer(_) => Self::integrity(e.to_string()),
            other => Self::usage(other.to_string()),
        }
    }
}

impl From<RuntimeError> for CliError {
    fn from(e: RuntimeError) -> Self {
        match e {
            RuntimeError::LedgerCorrupt { .. } => Self::integrity(e.to_string()),
            other => Self::usage(other.to_string()),
        }
    }
}

impl From<ValidateError> for CliError {
    fn from(e: ValidateError) -> Self {
        match e {
            // A candidate that cannot speak the wire protocol is
            // disqualified: an admission failure, not a toolchain error.
            ValidateError::Harness(HarnessError::FramingError { .. })
            | ValidateError::Harness(HarnessError::HandshakeTimeout { .. })
            | ValidateError::CandidateUnresponsive(_) => Self {
                code: EXIT_FAILED,
                message: format!("candidate disqualified: {e}"),
            },
            other => Self::usage(other.to_string()),
        }
    }
}

impl From<crate::remediate::RemediateError> for CliError {
    fn from(e: crate::remediate::RemediateError) -> Self {
        match e {
            crate::remediate::RemediateError::BundleMismatch { .. } => {
                Self::integrity(e.to_string())
            }
            crate::remediate::RemediateError::Validate(v) => v.into(),
            other => Self::usage(other.to_string()),
        }
    }
}

/// One command's result: the machine document, the human rendering, and
/// the exit code.
struct Outcome {
    doc: Doc,
    text: String,
    code: i32,
}

impl Outcome {
    fn ok(doc: Doc, text: impl Into<String>) -> Self {
        Self { doc, text: text.into(), code: EXIT_OK }
    }

    fn with_code(doc: Doc, text: impl Into<String>, code: i32) -> Self {
        Self { doc, text: text.into(), code }
    }
}

/// Entry point for the `pdd` binary. Returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    run_cli(cli)
}

fn run_cli(cli: Cli) -> i32 {
    let registry_root = cli
        .registry
        .clone()
        .or_else(|| std::env::var_os("PDD_REGISTRY").map(PathBuf::from));
    match dispatch(cli.command, registry_root) {
        Ok(outcome) => {
            emit(&outcome, cli.output);
            outcome.code
        }
        Err(e) => {
            match cli.output {
                OutputMode::Json => {
                    let doc = json!({"error": e.message, "exit_code": e.code});
                    let _ = std::io::stdout().write_all(&canonical_line(&doc));
                }
                OutputMode::Text => eprintln!("pdd: {}", e.message),
            }
            e.code
        }
    }
}

fn emit(outcome: &Outcome, mode: OutputMode) {
    match mode {
        OutputMode::Json => {
            let _ = std::io::stdout().write_all(&canonical_line(&outcome.doc));
        }
        OutputMode::Text => println!("{}", outcome.text),
    }
}

fn open_registry(root: &Option<PathBuf>) -> Result<Option<RegistryHandle>, CliError> {
    match root {
        None => Ok(None),
        Some(path) => Ok(Some(RegistryHandle::open(path.clone())?)),
    }
}

fn require_registry(root: &Option<PathBuf>) -> Result<RegistryHandle, CliError> {
    open_registry(root)?.ok_or_else(|| {
        CliError::usage("a registry is required: set PDD_REGISTRY or pass --registry")
    })
}

/// Resolve a bundle reference: a directory path, or `protocol_id@version`
/// against the registry.
fn resolve_bundle(
    bundle_ref: &str,
    registry: &Option<RegistryHandle>,
) -> Result<(SealedBundle, Option<PathBuf>), CliError> {
    let path = Path::new(bundle_ref);
    if path.is_dir() {
        let bundle = parse_bundle(path)?;
        return Ok((seal_bundle(&bundle, &SystemClock), Some(path.to_path_buf())));
    }
    if let Some((id, version)) = bundle_ref.rsplit_once('@') {
        let registry = registry.as_ref().ok_or_else(|| {
            CliError::usage(format!(
                "bundle reference {bundle_ref:?} needs a registry; set PDD_REGISTRY"
            ))
        })?;
        return Ok((registry.get(id, version)?, None));
    }
    Err(CliError::usage(format!(
        "bundle reference {bundle_ref:?} is neither a directory nor protocol_id@version"
    )))
}

fn identity_for(
    registry: &Option<RegistryHandle>,
    issuer: &str,
) -> Result<SigningIdentity, CliError> {
    match registry {
        Some(r) => Ok(r.ensure_identity(issuer)?),
        None => Ok(SigningIdentity::generate(issuer).map_err(CliError::from)?),
    }
}

fn next_sequence(evidence_dir: &Path, prefix: &str) -> u32 {
    let count = std::fs::read_dir(evidence_dir)
        .map(|entries| {
            entries
                .filter_map(|e| e.ok())
                .filter(|e| e.file_name().to_string_lossy().starts_with(prefix))
                .count() as u32
        })
        .unwrap_or(0);
    count + 1
}

fn dispatch(command: Command, registry_root: Option<PathBuf>) -> Result<Outcome, CliError> {
    match command {
        Command::Seal { bundle_dir, out } => cmd_seal(&bundle_dir, out.as_deref()),
        Command::Negotiate { bundle_dir, out } => {
            cmd_negotiate(&bundle_dir, out.as_deref(), &registry_root)
        }
        Command::Validate {
            bundle_ref,
            candidate,
            seed,
            cases,
            synthetic_clock,
            issuer,
        } => cmd_validate(
            &bundle_ref,
            &candidate,
            seed,
            cases,
            synthetic_clock,
            &issuer,
            &registry_root,
        ),
        Command::VerifyEvidence { evidence_file } => {
            cmd_verify_evidence(&evidence_file, &registry_root)
        }
        Command::Attest {
            bundle_ref,
            ledger,
            trace,
            interval_size,
            evidence,
            deployed_version,
            issuer,
        } => cmd_attest(
            &bundle_ref,
            &ledger,
            &trace,
            interval_size,
            evidence.as_deref(),
            deployed_version,
            &issuer,
            &registry_root,
        ),
        Command::VerifyLedger { ledger_file } => cmd_verify_ledger(&ledger_file, &registry_root),
        Command::RefineCheck { refined_ref, base_ref } => {
            cmd_refine_check(&refined_ref, &base_ref, &registry_root)
        }
        Command::Remediate { ledger, block } => {
            cmd_remediate(&ledger, block.as_deref(), &registry_root)
        }
        Command::Registry { op } => cmd_registry(op, &registry_root),
    }
}

fn cmd_seal(bundle_dir: &Path, out: Option<&Path>) -> Result<Outcome, CliError> {
    let bundle = parse_bundle(bundle_dir)?;
    let sealed = seal_bundle(&bundle, &SystemClock);
    let descriptor = sealed.descriptor();
    if let Some(out) = out {
        std::fs::write(out, canonical_line(&descriptor))?;
    }
    Ok(Outcome::ok(descriptor, sealed.bundle_digest.to_string()))
}

fn cmd_negotiate(
    bundle_dir: &Path,
    out: Option<&Path>,
    registry_root: &Option<PathBuf>,
) -> Result<Outcome, CliError> {
    let bundle = parse_bundle(bundle_dir)?;
    let registry = require_registry(registry_root)?;
    match negotiate(&bundle, &registry, &SystemClock) {
        Ok(sealed) => {
            let mut doc = sealed.descriptor();
            if let Some(pins) = sealed.bundle.provenance.get("pinned_dependencies") {
                doc["pinned_dependencies"] = pins.clone();
            }
            if let Some(out) = out {
                std::fs::write(out, canonical_line(&doc))?;
            }
            Ok(Outcome::ok(doc, format!("negotiated {}", sealed.bundle_digest)))
        }
        Err(NegotiateError::NegotiationFailed { conflicts }) => {
            let doc = json!({
                "negotiated": false,
                "conflicts": serde_json::to_value(&conflicts).unwrap_or(Doc::Null),
            });
            let mut text = String::from("negotiation failed:");
            for c in &conflicts {
                text.push_str(&format!(
                    "\n  {} [{}] {}",
                    c.protocol_id,
                    serde_json::to_value(c.kind)
                        .ok()
                        .and_then(|v| v.as_str().map(str::to_string))
                        .unwrap_or_default(),
                    c.detail.as_deref().unwrap_or("")
                ));
            }
            Ok(Outcome::with_code(doc, text, EXIT_FAILED))
        }
        Err(e) => Err(CliError::usage(e.to_string())),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_validate(
    bundle_ref: &str,
    candidate_manifest: &Path,
    seed: u64,
    cases: Option<u32>,
    synthetic_clock: bool,
    issuer: &str,
    registry_root: &Option<PathBuf>,
) -> Result<Outcome, CliError> {
    let registry = open_registry(registry_root)?;
    let (sealed, bundle_dir) = resolve_bundle(bundle_ref, &registry)?;
    let candidate =
        load_candidate_manifest(candidate_manifest).map_err(|e| CliError::usage(e.to_string()))?;

    let policy = HarnessPolicy {
        clock_mode: if synthetic_clock { ClockMode::Synthetic } else { ClockMode::Wall },
        ..HarnessPolicy::default()
    };
    let factory = ProcessCandidate::new(candidate.clone(), policy);
    let run = PropertyRun::new(seed, cases.unwrap_or_else(|| sealed.bundle.default_case_count()));
    let outcome = validate(&sealed, &factory, &run, &ValidationOptions::default())?;

    let identity = identity_for(&registry, issuer)?;
    let evidence_dir = bundle_dir.as_ref().map(|d| d.join("evidence"));
    let sequence = evidence_dir
        .as_ref()
        .map(|d| next_sequence(d, "evd_").max(next_sequence(d, "rej_")))
        .unwrap_or(1);
    let decision = build_evidence(
        &sealed,
        &candidate,
        &outcome.results,
        trace_digest(&outcome.trace),
        &SystemClock,
        &identity,
        sequence,
    )
    .map_err(CliError::from)?;

    let discovery = build_discovery_log(&sealed, &candidate, &outcome.results, &outcome.trace);
    let trace_doc = serde_json::to_value(&outcome.trace).expect("trace serializes");

    // Persist: named files in the bundle's evidence namespace, plus
    // content-addressed copies in the registry when one is configured.
    if let Some(dir) = &evidence_dir {
        std::fs::create_dir_all(dir)?;
        let digest_stem = &candidate.artifact_digest.hex()[..12];
        std::fs::write(
            dir.join(format!("discovery_{digest_stem}.json")),
            canonical_line(&discovery.to_doc()),
        )?;
        std::fs::write(dir.join(format!("trace_{digest_stem}.json")), canonical_line(&trace_doc))?;
        match &decision {
            AdmissionDecision::Admitted(evidence) => {
                let doc = evidence.to_doc();
                std::fs::write(
                    dir.join(format!("{}.json", evidence.evidence_id)),
                    canonical_line(&doc),
                )?;
                std::fs::write(dir.join(ADMISSION_RECORD), canonical_line(&doc))?;
            }
            AdmissionDecision::Rejected(report) => {
                std::fs::write(
                    dir.join(format!("{}.json", report.rejection_id)),
                    canonical_line(&report.to_doc()),
                )?;
            }
        }
    }
    if let Some(registry) = &registry {
        registry.store_evidence(&discovery.to_doc())?;
        registry.store_evidence(&trace_doc)?;
        match &decision {
            AdmissionDecision::Admitted(e) => {
                registry.store_evidence(&e.to_doc())?;
            }
            AdmissionDecision::Rejected(r) => {
                registry.store_evidence(&r.to_doc())?;
            }
        }
    }

    match decision {
        AdmissionDecision::Admitted(evidence) => Ok(Outcome::ok(
            evidence.to_doc(),
            format!(
                "admit {} under {} ({})",
                evidence.implementation.artifact_id,
                evidence.protocol.protocol_id,
                evidence.evidence_id
            ),
        )),
        AdmissionDecision::Rejected(report) => {
            let clauses: Vec<&str> =
                report.failed_clauses.iter().map(|c| c.clause_id.as_str()).collect();
            Ok(Outcome::with_code(
                report.to_doc(),
                format!(
                    "reject {}: failing clauses: {}",
                    report.implementation.artifact_id,
                    clauses.join(", ")
                ),
                EXIT_FAILED,
            ))
        }
    }
}

fn cmd_verify_evidence(
    evidence_file: &Path,
    registry_root: &Option<PathBuf>,
) -> Result<Outcome, CliError> {
    let registry = require_registry(registry_root)?;
    let text = std::fs::read_to_string(evidence_file)?;
    let doc: Doc = serde_json::from_str(&text).map_err(|e| CliError::usage(e.to_string()))?;
    let evidence = EvidenceObject::from_doc(&doc).map_err(|e| CliError::usage(e.to_string()))?;
    let trust = registry.trust_map()?;
    let verdict = verify_evidence(&evidence, &trust, &registry);
    let code = if verdict.ok { EXIT_OK } else { EXIT_INTEGRITY };
    let mut text = format!(
        "{}: {}",
        evidence.evidence_id,
        if verdict.ok { "verified" } else { "verification failed" }
    );
    for check in &verdict.checks {
        text.push_str(&format!(
            "\n  [{}] {}: {}",
            if check.passed { "ok" } else { "FAIL" },
            check.name,
            check.detail
        ));
    }
    Ok(Outcome::with_code(
        serde_json::to_value(&verdict).expect("verdict serializes"),
        text,
        code,
    ))
}

#[allow(clippy::too_many_arguments)]
fn cmd_attest(
    bundle_ref: &str,
    ledger_path: &Path,
    trace_path: &Path,
    interval_size: Option<usize>,
    evidence_file: Option<&Path>,
    deployed_version: Option<String>,
    issuer: &str,
    registry_root: &Option<PathBuf>,
) -> Result<Outcome, CliError> {
    let registry = open_registry(registry_root)?;
    let (sealed, bundle_dir) = resolve_bundle(bundle_ref, &registry)?;
    let trace = EffectTrace::load(trace_path).map_err(|e| CliError::usage(e.to_string()))?;

    let mut ledger = if ledger_path.exists() {
        Ledger::open(ledger_path)?
    } else {
        // Seed a new ledger from the admission evidence.
        let genesis_path = match evidence_file {
            Some(p) => p.to_path_buf(),
            None => bundle_dir
                .as_ref()
                .map(|d| d.join("evidence").join(ADMISSION_RECORD))
                .filter(|p| p.is_file())
                .ok_or_else(|| {
                    CliError::usage(
                        "no ledger exists yet; pass --evidence with the admission record",
                    )
                })?,
        };
        let text = std::fs::read_to_string(&genesis_path)?;
        let doc: Doc = serde_json::from_str(&text).map_err(|e| CliError::usage(e.to_string()))?;
        let evidence =
            EvidenceObject::from_doc(&doc).map_err(|e| CliError::usage(e.to_string()))?;
        Ledger::create(ledger_path, &evidence)?
    };

    if ledger.genesis.protocol.bundle_digest != sealed.bundle_digest {
        return Err(CliError::integrity(format!(
            "ledger admission evidence names bundle {}, got {}",
            ledger.genesis.protocol.bundle_digest, sealed.bundle_digest
        )));
    }

    let identity = identity_for(&registry, issuer)?;
    let trust = match &registry {
        Some(r) => r.trust_map()?,
        None => crate::sign::TrustMap::single(&identity),
    };
    let surface = compile_guarantees(&sealed);
    let projection = project_monitorable(&surface);
    let deployed_version = deployed_version.unwrap_or_else(|| {
        format!(
            "{}@{}",
            ledger.genesis.implementation.artifact_id,
            ledger.genesis.issued_at.date_dotted()
        )
    });

    let chunk = interval_size.unwrap_or(trace.invocations.len().max(1)).max(1);
    let mut blocks = Vec::new();
    let mut any_violation = false;
    for slice in trace.invocations.chunks(chunk) {
        let interval_trace = EffectTrace {
            invocations: slice.to_vec(),
            started_at: trace.started_at,
            ended_at: trace.ended_at,
        };
        let options = AttestOptions {
            projection: &projection,
            policy: ActionPolicy::default(),
            clock: &SystemClock,
            identity: &identity,
            trust: &trust,
            deployed_version: deployed_version.clone(),
        };
        let block = attest_interval(
            &mut ledger,
            &surface,
            AttestationInterval::of_trace(interval_trace),
            &options,
        )?;
        any_violation |= block.attestation.decision == Decision::Violation;
        blocks.push(block);
    }

    let code = if any_violation { EXIT_FAILED } else { EXIT_OK };
    let mut text = String::new();
    for block in &blocks {
        text.push_str(&format!(
            "{} {} action={}\n",
            block.ledger_block_id,
            match block.attestation.decision {
                Decision::Pass => "pass".to_string(),
                Decision::Violation => format!(
                    "violation {}",
                    block.attestation.violated_invariant.as_deref().unwrap_or("?")
                ),
            },
            serde_json::to_value(block.action.runtime)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default()
        ));
    }
    let doc = json!({
        "appended": blocks.iter().map(|b| b.to_doc()).collect::<Vec<_>>(),
        "ledger": ledger.path.display().to_string(),
        "records": ledger.len(),
    });
    Ok(Outcome::with_code(doc, text.trim_end().to_string(), code))
}

fn cmd_verify_ledger(
    ledger_file: &Path,
    registry_root: &Option<PathBuf>,
) -> Result<Outcome, CliError> {
    let registry = require_registry(registry_root)?;
    let ledger = Ledger::open(ledger_file)?;
    let trust = registry.trust_map()?;
    let verdict = verify_chain(&ledger, &trust);
    let code = if verdict.ok { EXIT_OK } else { EXIT_INTEGRITY };
    let text = match &verdict.first_failure {
        None => format!("ledger verified: {} records", verdict.records),
        Some(f) => format!("ledger verification failed at index {}: {}", f.index, f.reason),
    };
    Ok(Outcome::with_code(
        serde_json::to_value(&verdict).expect("verdict serializes"),
        text,
        code,
    ))
}

fn cmd_refine_check(
    refined_ref: &str,
    base_ref: &str,
    registry_root: &Option<PathBuf>,
) -> Result<Outcome, CliError> {
    let registry = open_registry(registry_root)?;
    let (refined, _) = resolve_bundle(refined_ref, &registry)?;
    let (base, _) = resolve_bundle(base_ref, &registry)?;
    let report = check_refinement(&refined, &base).map_err(|e| CliError::usage(e.to_string()))?;
    let code = if report.refines { EXIT_OK } else { EXIT_FAILED };
    let mut text = format!(
        "{} {} -> {}: {}",
        report.protocol_id,
        report.base_version,
        report.refined_version,
        if report.refines { "refines" } else { "does not refine" }
    );
    for clause in &report.clauses {
        text.push_str(&format!(
            "\n  {:<44} {:<14} {}",
            clause.clause,
            serde_json::to_value(clause.relation)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            clause.detail
        ));
    }
    Ok(Outcome::with_code(
        serde_json::to_value(&report).expect("report serializes"),
        text,
        code,
    ))
}

fn cmd_remediate(
    ledger_path: &Path,
    block_id: Option<&str>,
    registry_root: &Option<PathBuf>,
) -> Result<Outcome, CliError> {
    let registry = require_registry(registry_root)?;
    let ledger = Ledger::open(ledger_path)?;

    let block = match block_id {
        Some(id) => ledger
            .block_by_id(id)
            .ok_or_else(|| CliError::usage(format!("no ledger block {id:?}")))?,
        None => ledger
            .blocks
            .iter()
            .rev()
            .find(|b| b.attestation.decision == Decision::Violation)
            .ok_or_else(|| CliError::usage("ledger holds no violation blocks"))?,
    };

    // The context binds the bundle by digest: fetch the version the
    // admission evidence names and insist on digest equality.
    let sealed = registry.get(
        &ledger.genesis.protocol.protocol_id,
        &ledger.genesis.protocol.version,
    )?;
    if sealed.bundle_digest != ledger.genesis.protocol.bundle_digest {
        return Err(CliError::integrity(format!(
            "registry bundle digest {} does not match admission evidence {}",
            sealed.bundle_digest, ledger.genesis.protocol.bundle_digest
        )));
    }

    let context = build_repair_context(block, &ledger, &sealed, BTreeMap::new())?;
    let doc = context.to_doc();
    let out_path = ledger.trace_root().join(format!("{}.json", context.context_id));
    std::fs::write(&out_path, canonical_line(&doc))?;
    registry.store_evidence(&doc)?;

    Ok(Outcome::ok(
        doc,
        format!(
            "{} (clause {}, written to {})",
            context.context_id,
            context.violated_clause.clause_id,
            out_path.display()
        ),
    ))
}

fn cmd_registry(op: RegistryOp, registry_root: &Option<PathBuf>) -> Result<Outcome, CliError> {
    let registry = require_registry(registry_root)?;
    match op {
        RegistryOp::Publish { bundle_dir } => {
            let bundle = parse_bundle(&bundle_dir)?;
            let sealed = seal_bundle(&bundle, &SystemClock);
            let record = registry.publish(&sealed, DEFAULT_ISSUER)?;
            Ok(Outcome::ok(
                serde_json::to_value(&record).expect("record serializes"),
                format!(
                    "published {}@{} {}",
                    record.protocol_id, record.version, record.bundle_digest
                ),
            ))
        }
        RegistryOp::Get { protocol_id, version, out } => {
            let sealed = registry.get(&protocol_id, &version)?;
            if let Some(out) = &out {
                crate::bundle::write_bundle_dir(out, &sealed.bundle.source)?;
            }
            Ok(Outcome::ok(
                sealed.descriptor(),
                format!("{} sealed at {}", sealed.bundle_digest, sealed.sealed_at),
            ))
        }
        RegistryOp::List => {
            let entries = registry.list()?;
            let docs: Vec<Doc> = entries
                .iter()
                .map(|(id, version, digest)| {
                    json!({
                        "protocol_id": id,
                        "version": version.to_string(),
                        "bundle_digest": digest.to_string(),
                    })
                })
                .collect();
            let text = entries
                .iter()
                .map(|(id, version, digest)| format!("{id}@{version} {digest}"))
                .collect::<Vec<_>>()
                .join("\n");
            Ok(Outcome::ok(json!({"bundles": docs}), text))
        }
    }
}
