//! The compiled guarantee surface of a sealed bundle.
//!
//! Compilation turns every declared invariant clause into exactly one
//! executable predicate over observation traces. The full predicate for a
//! bundle is the conjunction of all clauses; evaluation reports every
//! violation in deterministic order (clause declaration order, then
//! observation order).
//!
//! This evaluator is deliberately trace-driven: it re-derives verdicts from
//! stored observations alone, independently of the case-driven validators,
//! so validator results can be cross-checked against it. It is also the
//! evaluation engine behind runtime attestation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Number};

use crate::bundle::{Direction, PropertyKind, RequireClause, SealedBundle};
use crate::canon::{canonical_bytes, Doc};
use crate::harness::{EffectKind, EffectTrace, InvocationRecord, Outcome};
use crate::schema::StructuralSchema;

/// Clause identifiers for the three structural predicate groups.
pub const CLAUSE_REQUEST_SCHEMA: &str = "request_schema";
pub const CLAUSE_RESPONSE_SCHEMA: &str = "response_schema";
pub const CLAUSE_ERROR_KINDS: &str = "error_kinds";

/// Clause identifiers for the fixed operational clauses.
pub const CLAUSE_OUTBOUND_ALLOWLIST: &str = "outbound_allowlist";
pub const CLAUSE_FILESYSTEM_WRITE: &str = "filesystem_write";
pub const CLAUSE_DEPENDENCY_ALLOWLIST: &str = "dependency_allowlist";
pub const CLAUSE_SECRETS_ALLOWLIST: &str = "secrets_allowlist";
pub const CLAUSE_MAX_LATENCY: &str = "max_latency_ms_p95";
pub const CLAUSE_MAX_MEMORY: &str = "max_memory_mb";
pub const CLAUSE_BACKGROUND_WORK: &str = "background_work";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClauseCategory {
    Structural,
    Behavioral,
    OperationalAllowlist,
    OperationalBudget,
}

/// One compiled clause: identifier, category, and executable predicate.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledClause {
    pub id: String,
    pub category: ClauseCategory,
    pub predicate: ClausePredicate,
}

impl CompiledClause {
    /// Behavioral property kind, when this clause is behavioral.
    pub fn property_kind(&self) -> Option<PropertyKind> {
        match &self.predicate {
            ClausePredicate::Behavioral { require, .. } => Some(require.kind()),
            _ => None,
        }
    }

    /// The clause's declaration as a document, used in repair contexts.
    pub fn declaration(&self) -> Doc {
        match &self.predicate {
            ClausePredicate::RequestSchema { schema } => {
                json!({"clause": self.id, "request": serde_json::to_value(&schema.request).unwrap_or(Doc::Null)})
            }
            ClausePredicate::ResponseSchema { schema } => {
                json!({"clause": self.id, "response": serde_json::to_value(&schema.response).unwrap_or(Doc::Null)})
            }
            ClausePredicate::ErrorKinds { declared } => {
                json!({"clause": self.id, "errors": declared})
            }
            ClausePredicate::Behavioral { require, .. } => {
                json!({"clause": self.id, "property": serde_json::to_value(require).unwrap_or(Doc::Null)})
            }
            ClausePredicate::OutboundAllowlist { allowlist, deny_other_outbound } => {
                json!({"clause": self.id, "outbound_allowlist": allowlist, "deny_other_outbound": deny_other_outbound})
            }
            ClausePredicate::FsWrite { prefixes } => {
                json!({"clause": self.id, "write": prefixes})
            }
            ClausePredicate::DependencyAllowlist { allow } => {
                json!({"clause": self.id, "allow": allow})
            }
            ClausePredicate::SecretsAllowlist { allow } => {
                json!({"clause": self.id, "allow": allow})
            }
            ClausePredicate::CallBudget { target, max_per_request } => {
                json!({"clause": self.id, "target": target, "max_per_request": max_per_request})
            }
            ClausePredicate::LatencyP95 { max_ms } => {
                json!({"clause": self.id, "max_latency_ms_p95": max_ms})
            }
            ClausePredicate::MemoryPeak { max_mb } => {
                json!({"clause": self.id, "max_memory_mb": max_mb})
            }
            ClausePredicate::BackgroundWork { allowed } => {
                json!({"clause": self.id, "allowed": allowed})
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClausePredicate {
    RequestSchema { schema: StructuralSchema },
    ResponseSchema { schema: StructuralSchema },
    ErrorKinds { declared: Vec<String> },
    Behavioral { require: RequireClause, schema: StructuralSchema },
    OutboundAllowlist { allowlist: Vec<String>, deny_other_outbound: bool },
    FsWrite { prefixes: Vec<String> },
    DependencyAllowlist { allow: Vec<String> },
    SecretsAllowlist { allow: Vec<String> },
    CallBudget { target: String, max_per_request: u64 },
    LatencyP95 { max_ms: u64 },
    MemoryPeak { max_mb: u64 },
    BackgroundWork { allowed: bool },
}

/// One observed violation of one clause.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub clause_id: String,
    /// Sequence number of the observation that witnessed the violation,
    /// when one observation suffices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_value: Option<Number>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed_value: Option<Number>,
}

impl Violation {
    fn at(clause_id: &str, seq: Option<u64>, detail: String) -> Self {
        Self {
            clause_id: clause_id.to_string(),
            seq,
            path: None,
            detail,
            observed_value: None,
            allowed_value: None,
        }
    }

    fn budget(clause_id: &str, seq: Option<u64>, detail: String, observed: Number, allowed: Number) -> Self {
        Self {
            clause_id: clause_id.to_string(),
            seq,
            path: None,
            detail,
            observed_value: Some(observed),
            allowed_value: Some(allowed),
        }
    }
}

/// The compiled structural, behavioral, and operational predicates of one
/// sealed bundle, in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct GuaranteeSurface {
    pub protocol_id: String,
    pub clauses: Vec<CompiledClause>,
}

impl GuaranteeSurface {
    pub fn clause(&self, id: &str) -> Option<&CompiledClause> {
        self.clauses.iter().find(|c| c.id == id)
    }

    pub fn clause_ids(&self) -> Vec<&str> {
        self.clauses.iter().map(|c| c.id.as_str()).collect()
    }

    /// Evaluate every clause over a trace. Violations come back in clause
    /// declaration order, then observation order.
    pub fn evaluate(&self, trace: &EffectTrace) -> Vec<Violation> {
        evaluate_clauses(&self.clauses, trace)
    }

    pub fn accepts(&self, trace: &EffectTrace) -> bool {
        self.evaluate(trace).is_empty()
    }
}

/// Evaluate an arbitrary clause subset (e.g. a runtime projection) over a
/// trace, in the given order.
pub fn evaluate_clauses(clauses: &[CompiledClause], trace: &EffectTrace) -> Vec<Violation> {
    let mut out = Vec::new();
    for clause in clauses {
        evaluate_clause(clause, trace, &mut out);
    }
    out
}

/// Compile a sealed bundle into its guarantee surface: one predicate per
/// declared invariant clause.
pub fn compile_guarantees(sealed: &SealedBundle) -> GuaranteeSurface {
    let bundle = &sealed.bundle;
    let schema = &bundle.structural;
    let caps = &bundle.operational;
    let mut clauses = Vec::new();

    // Structural predicate groups.
    clauses.push(CompiledClause {
        id: CLAUSE_REQUEST_SCHEMA.to_string(),
        category: ClauseCategory::Structural,
        predicate: ClausePredicate::RequestSchema { schema: schema.clone() },
    });
    clauses.push(CompiledClause {
        id: CLAUSE_RESPONSE_SCHEMA.to_string(),
        category: ClauseCategory::Structural,
        predicate: ClausePredicate::ResponseSchema { schema: schema.clone() },
    });
    clauses.push(CompiledClause {
        id: CLAUSE_ERROR_KINDS.to_string(),
        category: ClauseCategory::Structural,
        predicate: ClausePredicate::ErrorKinds { declared: schema.errors.clone() },
    });

    // Behavioral clauses, in declaration order.
    for property in &bundle.behavioral {
        clauses.push(CompiledClause {
            id: property.name.clone(),
            category: ClauseCategory::Behavioral,
            predicate: ClausePredicate::Behavioral {
                require: property.require.clone(),
                schema: schema.clone(),
            },
        });
    }

    // Operational clauses, in manifest order. Read grants carry no
    // runtime-checkable obligation and compile to no clause.
    clauses.push(CompiledClause {
        id: CLAUSE_OUTBOUND_ALLOWLIST.to_string(),
        category: ClauseCategory::OperationalAllowlist,
        predicate: ClausePredicate::OutboundAllowlist {
            allowlist: caps.network_allowlist.clone(),
            deny_other_outbound: caps.deny_other_outbound,
        },
    });
    clauses.push(CompiledClause {
        id: CLAUSE_FILESYSTEM_WRITE.to_string(),
        category: ClauseCategory::OperationalAllowlist,
        predicate: ClausePredicate::FsWrite { prefixes: caps.fs_write.clone() },
    });
    clauses.push(CompiledClause {
        id: CLAUSE_DEPENDENCY_ALLOWLIST.to_string(),
        category: ClauseCategory::OperationalAllowlist,
        predicate: ClausePredicate::DependencyAllowlist { allow: caps.dependency_allowlist.clone() },
    });
    clauses.push(CompiledClause {
        id: CLAUSE_SECRETS_ALLOWLIST.to_string(),
        category: ClauseCategory::OperationalAllowlist,
        predicate: ClausePredicate::SecretsAllowlist { allow: caps.secrets_allowlist.clone() },
    });
    for budget in &caps.call_budgets {
        clauses.push(CompiledClause {
            id: budget.clause_id.clone(),
            category: ClauseCategory::OperationalBudget,
            predicate: ClausePredicate::CallBudget {
                target: budget.target.clone(),
                max_per_request: budget.max_per_request,
            },
        });
    }
    clauses.push(CompiledClause {
        id: CLAUSE_MAX_LATENCY.to_string(),
        category: ClauseCategory::OperationalBudget,
        predicate: ClausePredicate::LatencyP95 { max_ms: caps.max_latency_ms_p95 },
    });
    clauses.push(CompiledClause {
        id: CLAUSE_MAX_MEMORY.to_string(),
        category: ClauseCategory::OperationalBudget,
        predicate: ClausePredicate::MemoryPeak { max_mb: caps.max_memory_mb },
    });
    clauses.push(CompiledClause {
        id: CLAUSE_BACKGROUND_WORK.to_string(),
        category: ClauseCategory::OperationalAllowlist,
        predicate: ClausePredicate::BackgroundWork { allowed: caps.background_work_allowed },
    });

    GuaranteeSurface {
        protocol_id: bundle.protocol_id.clone(),
        clauses,
    }
}

/// Nearest-rank p95 over a latency population. Zero for an empty trace.
pub fn p95_nearest_rank(latencies: &[u64]) -> u64 {
    if latencies.is_empty() {
        return 0;
    }
    let mut sorted = latencies.to_vec();
    sorted.sort_unstable();
    let rank = ((0.95 * sorted.len() as f64).ceil() as usize).max(1);
    sorted[rank - 1]
}

fn evaluate_clause(clause: &CompiledClause, trace: &EffectTrace, out: &mut Vec<Violation>) {
    match &clause.predicate {
        ClausePredicate::RequestSchema { schema } => {
            // An out-of-contract request is the implementation's violation
            // only if it was answered with a success or an undeclared
            // error; a declared error is the contract-honoring reply.
            for inv in &trace.invocations {
                if schema.request.is_valid(&inv.request) {
                    continue;
                }
                match &inv.outcome {
                    Outcome::Error { kind, .. } if schema.declares_error(kind) => {}
                    Outcome::Timeout => {}
                    Outcome::Response(_) => out.push(Violation::at(
                        &clause.id,
                        Some(inv.seq),
                        "schema-invalid request was answered with a success response".to_string(),
                    )),
                    Outcome::Error { kind, .. } => out.push(Violation::at(
                        &clause.id,
                        Some(inv.seq),
                        format!("schema-invalid request was answered with undeclared error kind {kind:?}"),
                    )),
                }
            }
        }
        ClausePredicate::ResponseSchema { schema } => {
            for inv in &trace.invocations {
                if !schema.request.is_valid(&inv.request) {
                    continue;
                }
                if let Outcome::Response(body) = &inv.outcome {
                    let mut violations = Vec::new();
                    schema.response.check(body, "/response", &mut violations);
                    for v in violations {
                        out.push(Violation {
                            clause_id: clause.id.clone(),
                            seq: Some(inv.seq),
                            path: Some(v.path),
                            detail: v.message,
                            observed_value: None,
                            allowed_value: None,
                        });
                    }
                }
            }
        }
        ClausePredicate::ErrorKinds { declared } => {
            for inv in &trace.invocations {
                if let Outcome::Error { kind, .. } = &inv.outcome {
                    if !declared.iter().any(|k| k == kind) {
                        out.push(Violation::at(
                            &clause.id,
                            Some(inv.seq),
                            format!("error kind {kind:?} is not declared (declared: {declared:?})"),
                        ));
                    }
                }
            }
        }
        ClausePredicate::Behavioral { require, schema } => {
            evaluate_behavioral(clause, require, schema, trace, out)
        }
        ClausePredicate::OutboundAllowlist { allowlist, deny_other_outbound } => {
            if !deny_other_outbound {
                return;
            }
            for inv in &trace.invocations {
                for effect in &inv.effects {
                    if effect.kind == EffectKind::NetworkCall
                        && !allowlist.iter().any(|a| a == &effect.target)
                    {
                        out.push(Violation::at(
                            &clause.id,
                            Some(inv.seq),
                            format!("outbound call to {:?} is not allowlisted", effect.target),
                        ));
                    }
                }
            }
        }
        ClausePredicate::FsWrite { prefixes } => {
            for inv in &trace.invocations {
                for effect in &inv.effects {
                    if effect.kind == EffectKind::FsWrite
                        && !prefixes.iter().any(|p| effect.target.starts_with(p))
                    {
                        out.push(Violation::at(
                            &clause.id,
                            Some(inv.seq),
                            format!("write to {:?} is outside the granted prefixes {prefixes:?}", effect.target),
                        ));
                    }
                }
            }
        }
        ClausePredicate::DependencyAllowlist { allow } => {
            for inv in &trace.invocations {
                for effect in &inv.effects {
                    if effect.kind == EffectKind::DependencyUse
                        && !allow.iter().any(|a| a == &effect.target)
                    {
                        out.push(Violation::at(
                            &clause.id,
                            Some(inv.seq),
                            format!("dependency {:?} is not approved", effect.target),
                        ));
                    }
                }
            }
        }
        ClausePredicate::SecretsAllowlist { allow } => {
            for inv in &trace.invocations {
                for effect in &inv.effects {
                    if effect.kind == EffectKind::SecretAccess
                        && !allow.iter().any(|a| a == &effect.target)
                    {
                        out.push(Violation::at(
                            &clause.id,
                            Some(inv.seq),
                            format!("secret {:?} is not granted", effect.target),
                        ));
                    }
                }
            }
        }
        ClausePredicate::CallBudget { target, max_per_request } => {
            for inv in &trace.invocations {
                let count = inv
                    .effects
                    .iter()
                    .filter(|e| e.kind == EffectKind::NetworkCall && &e.target == target)
                    .count() as u64;
                if count > *max_per_request {
                    out.push(Violation::budget(
                        &clause.id,
                        Some(inv.seq),
                        format!("{count} calls to {target:?} in one request, budget {max_per_request}"),
                        Number::from(count),
                        Number::from(*max_per_request),
                    ));
                }
            }
        }
        ClausePredicate::LatencyP95 { max_ms } => {
            let latencies: Vec<u64> = trace.invocations.iter().map(|i| i.latency_ms).collect();
            let p95 = p95_nearest_rank(&latencies);
            if p95 > *max_ms {
                out.push(Violation::budget(
                    &clause.id,
                    None,
                    format!("p95 latency {p95} ms exceeds budget {max_ms} ms"),
                    Number::from(p95),
                    Number::from(*max_ms),
                ));
            }
        }
        ClausePredicate::MemoryPeak { max_mb } => {
            let peak = trace.invocations.iter().map(|i| i.peak_memory_mb).max().unwrap_or(0);
            if peak > *max_mb {
                out.push(Violation::budget(
                    &clause.id,
                    None,
                    format!("peak memory {peak} MiB exceeds budget {max_mb} MiB"),
                    Number::from(peak),
                    Number::from(*max_mb),
                ));
            }
        }
        ClausePredicate::BackgroundWork { allowed } => {
            if *allowed {
                return;
            }
            for inv in &trace.invocations {
                for effect in &inv.effects {
                    if effect.post_response || effect.kind == EffectKind::BackgroundTask {
                        out.push(Violation::at(
                            &clause.id,
                            Some(inv.seq),
                            format!(
                                "background work is not allowed: {:?} effect on {:?}{}",
                                effect.kind,
                                effect.target,
                                if effect.post_response { " after the response" } else { "" }
                            ),
                        ));
                    }
                }
            }
        }
    }
}

fn numeric_field(doc: &Doc, field: &str) -> Option<f64> {
    doc.get(field).and_then(Doc::as_f64)
}

fn evaluate_behavioral(
    clause: &CompiledClause,
    require: &RequireClause,
    schema: &StructuralSchema,
    trace: &EffectTrace,
    out: &mut Vec<Violation>,
) {
    match require {
        RequireClause::Range { field, minimum, maximum } => {
            for inv in &trace.invocations {
                let Some(body) = inv.outcome.response() else { continue };
                let Some(v) = numeric_field(body, field) else { continue };
                let below = minimum.map(|m| v < m).unwrap_or(false);
                let above = maximum.map(|m| v > m).unwrap_or(false);
                if below || above {
                    out.push(Violation {
                        clause_id: clause.id.clone(),
                        seq: Some(inv.seq),
                        path: Some(format!("/response/{field}")),
                        detail: format!(
                            "{field} = {v} outside [{}, {}]",
                            minimum.map(|m| m.to_string()).unwrap_or_else(|| "-inf".into()),
                            maximum.map(|m| m.to_string()).unwrap_or_else(|| "+inf".into()),
                        ),
                        observed_value: Number::from_f64(v),
                        allowed_value: maximum.and_then(Number::from_f64),
                    });
                }
            }
        }
        RequireClause::FailsClosed { error_kind } => {
            for inv in &trace.invocations {
                if schema.request.is_valid(&inv.request) {
                    continue;
                }
                let ok = inv.outcome.error_kind() == Some(error_kind.as_str());
                if !ok && !matches!(inv.outcome, Outcome::Timeout) {
                    out.push(Violation::at(
                        &clause.id,
                        Some(inv.seq),
                        format!(
                            "invalid input did not fail closed with {error_kind:?}: got {}",
                            outcome_summary(&inv.outcome)
                        ),
                    ));
                }
            }
        }
        RequireClause::Determinism => {
            // Witness pairs: identical requests observed more than once.
            let mut first_outcome: BTreeMap<Vec<u8>, (&InvocationRecord, Vec<u8>)> = BTreeMap::new();
            for inv in &trace.invocations {
                let req_key = canonical_bytes(&inv.request);
                let out_key = outcome_key(&inv.outcome);
                match first_outcome.get(&req_key) {
                    None => {
                        first_outcome.insert(req_key, (inv, out_key));
                    }
                    Some((first, expected)) if *expected != out_key => {
                        out.push(Violation::at(
                            &clause.id,
                            Some(inv.seq),
                            format!(
                                "identical request produced diverging outcomes at seq {} and {}",
                                first.seq, inv.seq
                            ),
                        ));
                    }
                    Some(_) => {}
                }
            }
        }
        RequireClause::Monotone { varied_field, output_field, direction } => {
            // Witness pairs: requests equal except the varied field.
            let mut groups: BTreeMap<Vec<u8>, Vec<(f64, f64, u64)>> = BTreeMap::new();
            for inv in &trace.invocations {
                let Some(body) = inv.outcome.response() else { continue };
                let Some(varied) = numeric_field(&inv.request, varied_field) else { continue };
                let Some(output) = numeric_field(body, output_field) else { continue };
                let mut key_doc = inv.request.clone();
                if let Doc::Object(map) = &mut key_doc {
                    map.remove(varied_field);
                }
                groups
                    .entry(canonical_bytes(&key_doc))
                    .or_default()
                    .push((varied, output, inv.seq));
            }
            for group in groups.values_mut() {
                group.sort_by(|a, b| a.0.total_cmp(&b.0));
                for pair in group.windows(2) {
                    let (lo, hi) = (&pair[0], &pair[1]);
                    let violated = match direction {
                        Direction::NonDecreasing => hi.1 < lo.1,
                        Direction::NonIncreasing => hi.1 > lo.1,
                    };
                    if violated {
                        out.push(Violation::at(
                            &clause.id,
                            Some(hi.2),
                            format!(
                                "{output_field} moved from {} to {} as {varied_field} rose from {} to {} (seq {} vs {})",
                                lo.1, hi.1, lo.0, hi.0, lo.2, hi.2
                            ),
                        ));
                    }
                }
            }
        }
        RequireClause::IdempotentOutput => {
            // f(f(x)) = f(x): for any y in the observed image of f, a
            // request equal to y must return y.
            let mut image: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
            for inv in &trace.invocations {
                if let Some(body) = inv.outcome.response() {
                    image.entry(canonical_bytes(body)).or_insert(inv.seq);
                }
            }
            for inv in &trace.invocations {
                let req_key = canonical_bytes(&inv.request);
                let Some(origin_seq) = image.get(&req_key) else { continue };
                if *origin_seq >= inv.seq {
                    continue;
                }
                let stable = inv
                    .outcome
                    .response()
                    .map(|body| canonical_bytes(body) == req_key)
                    .unwrap_or(false);
                if !stable {
                    out.push(Violation::at(
                        &clause.id,
                        Some(inv.seq),
                        format!(
                            "re-feeding the seq {} output did not reproduce it: got {}",
                            origin_seq,
                            outcome_summary(&inv.outcome)
                        ),
                    ));
                }
            }
        }
        RequireClause::IdempotentStateful => {
            // Replays of an identical request must repeat the outcome and
            // add no state-mutating effects.
            let mut seen: BTreeMap<Vec<u8>, Vec<u8>> = BTreeMap::new();
            for inv in &trace.invocations {
                let req_key = canonical_bytes(&inv.request);
                let out_key = outcome_key(&inv.outcome);
                match seen.get(&req_key) {
                    None => {
                        seen.insert(req_key, out_key);
                    }
                    Some(expected) => {
                        if *expected != out_key {
                            out.push(Violation::at(
                                &clause.id,
                                Some(inv.seq),
                                "replayed request produced a different outcome".to_string(),
                            ));
                        }
                        let mutations = inv
                            .effects
                            .iter()
                            .filter(|e| e.kind.is_state_mutating())
                            .count();
                        if mutations > 0 {
                            out.push(Violation::budget(
                                &clause.id,
                                Some(inv.seq),
                                format!("replay produced {mutations} state-mutating effects"),
                                Number::from(mutations as u64),
                                Number::from(0u64),
                            ));
                        }
                    }
                }
            }
        }
    }
}

fn outcome_key(outcome: &Outcome) -> Vec<u8> {
    // Timing fields are not part of the outcome; canonical bytes of the
    // serialized outcome compare response/error content only.
    canonical_bytes(&serde_json::to_value(outcome).expect("outcome serializes"))
}

fn outcome_summary(outcome: &Outcome) -> String {
    match outcome {
        Outcome::Response(_) => "a success response".to_string(),
        Outcome::Error { kind, .. } => format!("error kind {kind:?}"),
        Outcome::Timeout => "a timeout".to_string(),
    }
}
