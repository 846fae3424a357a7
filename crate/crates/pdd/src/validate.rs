//! The validation engine: structural, behavioral, and operational
//! validation of one candidate against one sealed bundle.
//!
//! Behavioral validation is generative: for every declared property it
//! derives per-case seeds from (run seed, property name, case index),
//! generates requests from the request schema, drives the candidate through
//! a session, and evaluates the property kind online. Counterexamples are
//! shrunk by greedy field-wise minimization. Structural and operational
//! validation run over the collected trace (the behavioral executions plus
//! a dedicated load pass).
//!
//! Identical (bundle, candidate, seed, case count, synthetic clock) yield
//! bytewise-identical results.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Number};

use crate::bundle::{BehavioralProperty, Direction, RequireClause, SealedBundle, VersionConstraint};
use crate::canon::{canonical_bytes, Doc};
use crate::gen::{generate, CaseRng};
use crate::harness::{EffectKind, EffectTrace, HarnessError, Outcome, Session, SessionFactory};
use crate::schema::SchemaNode;
use crate::surface::{
    p95_nearest_rank, CLAUSE_BACKGROUND_WORK, CLAUSE_DEPENDENCY_ALLOWLIST, CLAUSE_ERROR_KINDS,
    CLAUSE_FILESYSTEM_WRITE, CLAUSE_MAX_LATENCY, CLAUSE_MAX_MEMORY, CLAUSE_OUTBOUND_ALLOWLIST,
    CLAUSE_REQUEST_SCHEMA, CLAUSE_RESPONSE_SCHEMA, CLAUSE_SECRETS_ALLOWLIST,
};

/// The built-in validator identities, as published in validator sets.
pub const SCHEMA_CONFORMANCE: &str = "schema-conformance";
pub const SCHEMA_CONFORMANCE_VERSION: &str = "0.4.2";
pub const PROPERTY_CHECK: &str = "property-check";
pub const PROPERTY_CHECK_VERSION: &str = "0.9.1";
pub const CAPABILITY_MONITOR: &str = "capability-monitor";
pub const CAPABILITY_MONITOR_VERSION: &str = "0.3.0";

pub const DEFAULT_SHRINK_LIMIT: u32 = 64;
pub const DEFAULT_LOAD_PASS_CASES: u32 = 100;

#[derive(Debug, thiserror::Error)]
pub enum ValidateError {
    /// A required validator is unknown or its version constraint cannot be
    /// met; validation aborts before any candidate execution.
    #[error("required validator {name} {constraint} is not satisfiable (available: {available})")]
    UnknownValidator {
        name: String,
        constraint: String,
        available: String,
    },
    #[error("candidate unresponsive: {0}")]
    CandidateUnresponsive(String),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

/// Reproducibility parameters of one behavioral run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertyRun {
    pub seed: u64,
    pub case_count: u32,
    pub shrink_limit: u32,
}

impl PropertyRun {
    pub fn new(seed: u64, case_count: u32) -> Self {
        Self {
            seed,
            case_count: case_count.max(1),
            shrink_limit: DEFAULT_SHRINK_LIMIT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

/// The witness attached to a failed clause.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub inputs: Vec<Doc>,
    pub observed: Doc,
    pub expected: Doc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

/// Outcome of one clause under one validator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClauseOutcome {
    pub clause_id: String,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterexample: Option<Counterexample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_value: Option<Number>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed_value: Option<Number>,
}

impl ClauseOutcome {
    fn pass(clause_id: &str) -> Self {
        Self {
            clause_id: clause_id.to_string(),
            passed: true,
            counterexample: None,
            observed_value: None,
            allowed_value: None,
        }
    }

    fn fail(clause_id: &str, counterexample: Counterexample) -> Self {
        Self {
            clause_id: clause_id.to_string(),
            passed: false,
            counterexample: Some(counterexample),
            observed_value: None,
            allowed_value: None,
        }
    }

    fn fail_budget(clause_id: &str, observed: Number, allowed: Number, detail: Counterexample) -> Self {
        Self {
            clause_id: clause_id.to_string(),
            passed: false,
            counterexample: Some(detail),
            observed_value: Some(observed),
            allowed_value: Some(allowed),
        }
    }
}

/// One validator's result: pass iff every clause outcome passed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidatorResult {
    pub name: String,
    pub version: String,
    pub result: Verdict,
    pub clauses: Vec<ClauseOutcome>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, u64>,
}

impl ValidatorResult {
    fn from_clauses(
        name: &str,
        version: &str,
        clauses: Vec<ClauseOutcome>,
        metrics: BTreeMap<String, u64>,
    ) -> Self {
        let result = if clauses.iter().all(|c| c.passed) {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        Self {
            name: name.to_string(),
            version: version.to_string(),
            result,
            clauses,
            metrics,
        }
    }

    pub fn passed(&self) -> bool {
        self.result == Verdict::Pass
    }

    pub fn failed_clause_ids(&self) -> Vec<&str> {
        self.clauses
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.clause_id.as_str())
            .collect()
    }
}

/// Everything one full validation run produced.
#[derive(Debug, Clone)]
pub struct ValidationRun {
    pub results: Vec<ValidatorResult>,
    pub trace: EffectTrace,
}

impl ValidationRun {
    /// Admission is the conjunction of all validators.
    pub fn admitted(&self) -> bool {
        self.results.iter().all(ValidatorResult::passed)
    }

    pub fn failed_clause_ids(&self) -> Vec<&str> {
        self.results.iter().flat_map(|r| r.failed_clause_ids()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ValidationOptions {
    pub deadline_ms: u64,
    pub load_pass_cases: u32,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            deadline_ms: crate::harness::DEFAULT_INVOKE_DEADLINE_MS,
            load_pass_cases: DEFAULT_LOAD_PASS_CASES,
        }
    }
}

// ---------------------------------------------------------------------------
// Validator requirement gate
// ---------------------------------------------------------------------------

/// Our implemented validators and versions.
pub fn available_validators() -> Vec<(&'static str, &'static str)> {
    vec![
        (SCHEMA_CONFORMANCE, SCHEMA_CONFORMANCE_VERSION),
        (PROPERTY_CHECK, PROPERTY_CHECK_VERSION),
        (CAPABILITY_MONITOR, CAPABILITY_MONITOR_VERSION),
    ]
}

/// Abort before any candidate execution if a required validator is unknown
/// or out of version.
pub fn check_validator_requirements(bundle: &SealedBundle) -> Result<(), ValidateError> {
    let available = available_validators();
    for req in &bundle.bundle.validator_requirements {
        let ours = available.iter().find(|(name, _)| *name == req.name);
        let satisfied = ours
            .map(|(_, version)| match &req.version {
                VersionConstraint::Exact(v) => {
                    version.parse::<crate::version::SemVer>().ok() == Some(*v)
                }
                VersionConstraint::Range(r) => version
                    .parse::<crate::version::SemVer>()
                    .map(|v| r.contains(v))
                    .unwrap_or(false),
            })
            .unwrap_or(false);
        if !satisfied {
            return Err(ValidateError::UnknownValidator {
                name: req.name.clone(),
                constraint: req.version.to_string(),
                available: available
                    .iter()
                    .map(|(n, v)| format!("{n} {v}"))
                    .collect::<Vec<_>>()
                    .join(", "),
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Structural validation
// ---------------------------------------------------------------------------

/// Validate every exchange in the trace against the typed handshake.
pub fn validate_structural(bundle: &SealedBundle, trace: &EffectTrace) -> ValidatorResult {
    let schema = &bundle.bundle.structural;
    let mut request_outcome = ClauseOutcome::pass(CLAUSE_REQUEST_SCHEMA);
    let mut response_outcome = ClauseOutcome::pass(CLAUSE_RESPONSE_SCHEMA);
    let mut errors_outcome = ClauseOutcome::pass(CLAUSE_ERROR_KINDS);

    for inv in &trace.invocations {
        let request_valid = schema.request.is_valid(&inv.request);
        if !request_valid && request_outcome.passed {
            // The implementation violates the handshake only by answering
            // out-of-contract input with success or an undeclared error.
            let violating = match &inv.outcome {
                Outcome::Response(_) => true,
                Outcome::Error { kind, .. } => !schema.declares_error(kind),
                Outcome::Timeout => false,
            };
            if violating {
                request_outcome = ClauseOutcome::fail(
                    CLAUSE_REQUEST_SCHEMA,
                    Counterexample {
                        inputs: vec![inv.request.clone()],
                        observed: outcome_doc(&inv.outcome),
                        expected: json!("a declared error kind for schema-invalid input"),
                        path: None,
                    },
                );
            }
        }
        if request_valid {
            if let Outcome::Response(body) = &inv.outcome {
                if response_outcome.passed {
                    let mut violations = Vec::new();
                    schema.response.check(body, "/response", &mut violations);
                    if let Some(v) = violations.first() {
                        response_outcome = ClauseOutcome::fail(
                            CLAUSE_RESPONSE_SCHEMA,
                            Counterexample {
                                inputs: vec![inv.request.clone()],
                                observed: body.clone(),
                                expected: json!(v.message),
                                path: Some(v.path.clone()),
                            },
                        );
                    }
                }
            }
        }
        if let Outcome::Error { kind, .. } = &inv.outcome {
            if errors_outcome.passed && !schema.declares_error(kind) {
                errors_outcome = ClauseOutcome::fail(
                    CLAUSE_ERROR_KINDS,
                    Counterexample {
                        inputs: vec![inv.request.clone()],
                        observed: json!({ "kind": kind }),
                        expected: json!(schema.errors),
                        path: None,
                    },
                );
            }
        }
    }

    ValidatorResult::from_clauses(
        SCHEMA_CONFORMANCE,
        SCHEMA_CONFORMANCE_VERSION,
        vec![request_outcome, response_outcome, errors_outcome],
        BTreeMap::new(),
    )
}

fn outcome_doc(outcome: &Outcome) -> Doc {
    serde_json::to_value(outcome).unwrap_or(Doc::Null)
}

// ---------------------------------------------------------------------------
// Behavioral validation
// ---------------------------------------------------------------------------

struct PropertyCtx<'a> {
    schema: &'a SchemaNode,
    run: &'a PropertyRun,
    deadline_ms: u64,
}

/// Drive the candidate through every behavioral property.
///
/// Returns the validator result plus the full trace of behavioral
/// executions for the other validators to reuse.
pub fn validate_behavioral(
    bundle: &SealedBundle,
    sessions: &dyn SessionFactory,
    run: &PropertyRun,
) -> Result<(ValidatorResult, EffectTrace), ValidateError> {
    validate_behavioral_with(bundle, sessions, run, ValidationOptions::default().deadline_ms)
}

fn validate_behavioral_with(
    bundle: &SealedBundle,
    sessions: &dyn SessionFactory,
    run: &PropertyRun,
    deadline_ms: u64,
) -> Result<(ValidatorResult, EffectTrace), ValidateError> {
    let mut session = sessions.open()?;
    let schema = &bundle.bundle.structural.request;
    let ctx = PropertyCtx { schema, run, deadline_ms };

    let mut clauses = Vec::new();
    let mut counterexamples = 0u64;
    for property in &bundle.bundle.behavioral {
        let outcome = check_property(&ctx, property, session.as_mut())?;
        if !outcome.passed {
            counterexamples += 1;
        }
        clauses.push(outcome);
    }
    let trace = session.collect_trace()?;

    let mut metrics = BTreeMap::new();
    metrics.insert("generated_cases".to_string(), run.case_count as u64);
    metrics.insert("counterexamples".to_string(), counterexamples);
    Ok((
        ValidatorResult::from_clauses(PROPERTY_CHECK, PROPERTY_CHECK_VERSION, clauses, metrics),
        trace,
    ))
}

fn invoke(
    session: &mut dyn Session,
    request: &Doc,
    deadline_ms: u64,
) -> Result<Outcome, ValidateError> {
    session
        .invoke(request, deadline_ms)
        .map(|record| record.outcome)
        .map_err(harness_to_validate)
}

fn harness_to_validate(e: HarnessError) -> ValidateError {
    match e {
        HarnessError::CandidateUnresponsive { detail } => {
            ValidateError::CandidateUnresponsive(detail)
        }
        other => other.into(),
    }
}

fn outcome_equal(a: &Outcome, b: &Outcome) -> bool {
    // Canonical-byte equality of outcome content; timing fields are not
    // part of the outcome.
    canonical_bytes(&outcome_doc(a)) == canonical_bytes(&outcome_doc(b))
}

fn check_property(
    ctx: &PropertyCtx<'_>,
    property: &BehavioralProperty,
    session: &mut dyn Session,
) -> Result<ClauseOutcome, ValidateError> {
    for case_index in 0..ctx.run.case_count {
        let mut rng = CaseRng::for_case(ctx.run.seed, &property.name, case_index as u64);
        let request = match generate(ctx.schema, &mut rng) {
            Ok(doc) => doc,
            Err(e) => {
                return Ok(ClauseOutcome::fail(
                    &property.name,
                    Counterexample {
                        inputs: vec![],
                        observed: json!(e.to_string()),
                        expected: json!("a generatable request schema"),
                        path: None,
                    },
                ))
            }
        };
        if let Some(counterexample) = run_case(ctx, property, session, &request, &mut rng)? {
            let shrunk = shrink(ctx, property, session, counterexample)?;
            return Ok(ClauseOutcome::fail(&property.name, shrunk));
        }
    }
    Ok(ClauseOutcome::pass(&property.name))
}

/// Evaluate one generated case. `Some` is a counterexample.
fn run_case(
    ctx: &PropertyCtx<'_>,
    property: &BehavioralProperty,
    session: &mut dyn Session,
    request: &Doc,
    rng: &mut CaseRng,
) -> Result<Option<Counterexample>, ValidateError> {
    match &property.require {
        RequireClause::Determinism => {
            let first = invoke(session, request, ctx.deadline_ms)?;
            let second = invoke(session, request, ctx.deadline_ms)?;
            if outcome_equal(&first, &second) {
                Ok(None)
            } else {
                Ok(Some(Counterexample {
                    inputs: vec![request.clone()],
                    observed: json!({"first": outcome_doc(&first), "second": outcome_doc(&second)}),
                    expected: json!("identical outcomes for identical requests"),
                    path: None,
                }))
            }
        }
        RequireClause::Range { field, minimum, maximum } => {
            let outcome = invoke(session, request, ctx.deadline_ms)?;
            Ok(range_violation(request, &outcome, field, *minimum, *maximum))
        }
        RequireClause::Monotone { varied_field, output_field, direction } => {
            let Some(base_value) = request.get(varied_field).and_then(Doc::as_f64) else {
                return Ok(None);
            };
            let second_value = ctx
                .schema
                .properties
                .get(varied_field)
                .and_then(|node| generate(node, rng).ok())
                .and_then(|d| d.as_f64())
                .unwrap_or(base_value + 1.0);
            let pair = monotone_pair(request, varied_field, base_value, second_value);
            check_monotone_pair(ctx, session, &pair, varied_field, output_field, *direction)
        }
        RequireClause::FailsClosed { error_kind } => {
            let Doc::Object(map) = request else { return Ok(None) };
            let required = &ctx.schema.required;
            if required.is_empty() {
                return Ok(None);
            }
            let victim = &required[rng.below(required.len() as u64) as usize];
            let mut mutated = map.clone();
            mutated.remove(victim);
            let mutated = Doc::Object(mutated);
            let outcome = invoke(session, &mutated, ctx.deadline_ms)?;
            if outcome.error_kind() == Some(error_kind.as_str()) {
                Ok(None)
            } else {
                Ok(Some(Counterexample {
                    inputs: vec![mutated],
                    observed: outcome_doc(&outcome),
                    expected: json!({ "error_kind": error_kind }),
                    path: Some(format!("/request/{victim}")),
                }))
            }
        }
        RequireClause::IdempotentOutput => {
            let first = invoke(session, request, ctx.deadline_ms)?;
            let Outcome::Response(y) = first else { return Ok(None) };
            let second = invoke(session, &y, ctx.deadline_ms)?;
            let stable = second
                .response()
                .map(|z| canonical_bytes(z) == canonical_bytes(&y))
                .unwrap_or(false);
            if stable {
                Ok(None)
            } else {
                Ok(Some(Counterexample {
                    inputs: vec![request.clone(), y.clone()],
                    observed: outcome_doc(&second),
                    expected: y,
                    path: None,
                }))
            }
        }
        RequireClause::IdempotentStateful => {
            let first = session.invoke(request, ctx.deadline_ms).map_err(harness_to_validate)?;
            let replay = session.invoke(request, ctx.deadline_ms).map_err(harness_to_validate)?;
            let same_outcome = outcome_equal(&first.outcome, &replay.outcome);
            let mutations = replay
                .effects
                .iter()
                .filter(|e| e.kind.is_state_mutating())
                .count();
            if same_outcome && mutations == 0 {
                Ok(None)
            } else {
                Ok(Some(Counterexample {
                    inputs: vec![request.clone()],
                    observed: json!({
                        "first": outcome_doc(&first.outcome),
                        "replay": outcome_doc(&replay.outcome),
                        "replay_state_mutations": mutations,
                    }),
                    expected: json!("identical outcome and zero state-mutating effects on replay"),
                    path: None,
                }))
            }
        }
    }
}

fn range_violation(
    request: &Doc,
    outcome: &Outcome,
    field: &str,
    minimum: Option<f64>,
    maximum: Option<f64>,
) -> Option<Counterexample> {
    let body = outcome.response()?;
    let v = body.get(field).and_then(Doc::as_f64)?;
    let below = minimum.map(|m| v < m).unwrap_or(false);
    let above = maximum.map(|m| v > m).unwrap_or(false);
    if below || above {
        Some(Counterexample {
            inputs: vec![request.clone()],
            observed: json!({ field: v }),
            expected: json!({"minimum": minimum, "maximum": maximum}),
            path: Some(format!("/response/{field}")),
        })
    } else {
        None
    }
}

/// An ordered monotone probe pair: requests equal except the varied field.
#[derive(Debug, Clone)]
struct MonotonePair {
    low: Doc,
    high: Doc,
    low_value: f64,
    high_value: f64,
}

fn monotone_pair(request: &Doc, varied_field: &str, a: f64, b: f64) -> MonotonePair {
    let (low_value, high_value) = if a <= b { (a, b) } else { (b, a) };
    let with_value = |v: f64| {
        let mut doc = request.clone();
        if let Doc::Object(map) = &mut doc {
            let value = if v.fract() == 0.0 && v.abs() < 9.0e15 {
                json!(v as i64)
            } else {
                json!(v)
            };
            map.insert(varied_field.to_string(), value);
        }
        doc
    };
    MonotonePair {
        low: with_value(low_value),
        high: with_value(high_value),
        low_value,
        high_value,
    }
}

fn check_monotone_pair(
    ctx: &PropertyCtx<'_>,
    session: &mut dyn Session,
    pair: &MonotonePair,
    varied_field: &str,
    output_field: &str,
    direction: Direction,
) -> Result<Option<Counterexample>, ValidateError> {
    let low_out = invoke(session, &pair.low, ctx.deadline_ms)?;
    let high_out = invoke(session, &pair.high, ctx.deadline_ms)?;
    let (Some(low_doc), Some(high_doc)) = (low_out.response(), high_out.response()) else {
        return Ok(None);
    };
    let (Some(low_v), Some(high_v)) = (
        low_doc.get(output_field).and_then(Doc::as_f64),
        high_doc.get(output_field).and_then(Doc::as_f64),
    ) else {
        return Ok(None);
    };
    let violated = match direction {
        Direction::NonDecreasing => high_v < low_v,
        Direction::NonIncreasing => high_v > low_v,
    };
    if violated {
        Ok(Some(Counterexample {
            inputs: vec![pair.low.clone(), pair.high.clone()],
            observed: json!({
                varied_field: {"low": pair.low_value, "high": pair.high_value},
                output_field: {"low": low_v, "high": high_v},
            }),
            expected: json!(format!(
                "{output_field} {} as {varied_field} grows",
                match direction {
                    Direction::NonDecreasing => "does not decrease",
                    Direction::NonIncreasing => "does not increase",
                }
            )),
            path: None,
        }))
    } else {
        Ok(None)
    }
}

// ---------------------------------------------------------------------------
// Shrinking
// ---------------------------------------------------------------------------

/// Greedy field-wise minimization of a counterexample, re-running the
/// failing check after each candidate mutation, spending at most
/// `shrink_limit` re-checks. Best effort: the result is smaller, not
/// globally minimal.
fn shrink(
    ctx: &PropertyCtx<'_>,
    property: &BehavioralProperty,
    session: &mut dyn Session,
    counterexample: Counterexample,
) -> Result<Counterexample, ValidateError> {
    match &property.require {
        RequireClause::Monotone { varied_field, output_field, direction } => shrink_monotone(
            ctx,
            session,
            counterexample,
            varied_field,
            output_field,
            *direction,
        ),
        _ => shrink_single(ctx, property, session, counterexample),
    }
}

/// Re-run the property's failing check against one concrete input.
fn still_fails(
    ctx: &PropertyCtx<'_>,
    property: &BehavioralProperty,
    session: &mut dyn Session,
    input: &Doc,
) -> Result<Option<Counterexample>, ValidateError> {
    match &property.require {
        RequireClause::Determinism => {
            let first = invoke(session, input, ctx.deadline_ms)?;
            let second = invoke(session, input, ctx.deadline_ms)?;
            if outcome_equal(&first, &second) {
                Ok(None)
            } else {
                Ok(Some(Counterexample {
                    inputs: vec![input.clone()],
                    observed: json!({"first": outcome_doc(&first), "second": outcome_doc(&second)}),
                    expected: json!("identical outcomes for identical requests"),
                    path: None,
                }))
            }
        }
        RequireClause::Range { field, minimum, maximum } => {
            let outcome = invoke(session, input, ctx.deadline_ms)?;
            Ok(range_violation(input, &outcome, field, *minimum, *maximum))
        }
        RequireClause::FailsClosed { error_kind } => {
            let outcome = invoke(session, input, ctx.deadline_ms)?;
            if outcome.error_kind() == Some(error_kind.as_str()) {
                Ok(None)
            } else {
                Ok(Some(Counterexample {
                    inputs: vec![input.clone()],
                    observed: outcome_doc(&outcome),
                    expected: json!({ "error_kind": error_kind }),
                    path: None,
                }))
            }
        }
        RequireClause::IdempotentOutput => {
            let first = invoke(session, input, ctx.deadline_ms)?;
            let Outcome::Response(y) = first else { return Ok(None) };
            let second = invoke(session, &y, ctx.deadline_ms)?;
            let stable = second
                .response()
                .map(|z| canonical_bytes(z) == canonical_bytes(&y))
                .unwrap_or(false);
            if stable {
                Ok(None)
            } else {
                Ok(Some(Counterexample {
                    inputs: vec![input.clone(), y.clone()],
                    observed: outcome_doc(&second),
                    expected: y,
                    path: None,
                }))
            }
        }
        RequireClause::IdempotentStateful => {
            let first = session.invoke(input, ctx.deadline_ms).map_err(harness_to_validate)?;
            let replay = session.invoke(input, ctx.deadline_ms).map_err(harness_to_validate)?;
            let same = outcome_equal(&first.outcome, &replay.outcome);
            let mutations = replay.effects.iter().filter(|e| e.kind.is_state_mutating()).count();
            if same && mutations == 0 {
                Ok(None)
            } else {
                Ok(Some(Counterexample {
                    inputs: vec![input.clone()],
                    observed: json!({"replay_state_mutations": mutations}),
                    expected: json!("idempotent replay"),
                    path: None,
                }))
            }
        }
        RequireClause::Monotone { .. } => Ok(None),
    }
}

fn shrink_single(
    ctx: &PropertyCtx<'_>,
    property: &BehavioralProperty,
    session: &mut dyn Session,
    mut best: Counterexample,
) -> Result<Counterexample, ValidateError> {
    let Some(mut current) = best.inputs.first().cloned() else {
        return Ok(best);
    };
    let mut budget = ctx.run.shrink_limit;
    let field_names: Vec<String> = match &current {
        Doc::Object(map) => map.keys().cloned().collect(),
        _ => return Ok(best),
    };
    // Shrunk inputs stay inside the property's input domain: schema-valid
    // requests, except for fails_closed whose domain is the mutants.
    let in_domain = |attempt: &Doc| match property.require {
        RequireClause::FailsClosed { .. } => !ctx.schema.is_valid(attempt),
        _ => ctx.schema.is_valid(attempt),
    };

    for field in &field_names {
        if budget == 0 {
            break;
        }
        let original = current.get(field).cloned().unwrap_or(Doc::Null);
        let candidates: Vec<Doc> = match &original {
            Doc::Number(n) => {
                let v = n.as_f64().unwrap_or(0.0);
                let floor = ctx
                    .schema
                    .properties
                    .get(field)
                    .and_then(|node| node.minimum)
                    .unwrap_or(0.0)
                    .min(v);
                let mid = floor + (v - floor) / 2.0;
                let as_doc = |x: f64| {
                    if n.is_i64() || n.is_u64() {
                        json!(x.round() as i64)
                    } else {
                        json!((x * 100.0).round() / 100.0)
                    }
                };
                vec![as_doc(floor), as_doc(mid)]
            }
            Doc::String(s) if s.len() > 1 => {
                let shorter: String = s.chars().take(1).collect();
                let halved: String = s.chars().take(s.len() / 2).collect();
                vec![json!(shorter), json!(halved)]
            }
            _ => Vec::new(),
        };
        for candidate_value in candidates {
            if budget == 0 || candidate_value == original {
                break;
            }
            let mut attempt = current.clone();
            if let Doc::Object(map) = &mut attempt {
                map.insert(field.clone(), candidate_value);
            }
            if !in_domain(&attempt) {
                continue;
            }
            budget = budget.saturating_sub(1);
            if let Some(cx) = still_fails(ctx, property, session, &attempt)? {
                current = attempt;
                best = cx;
                break;
            }
        }
    }
    Ok(best)
}

fn shrink_monotone(
    ctx: &PropertyCtx<'_>,
    session: &mut dyn Session,
    best: Counterexample,
    varied_field: &str,
    output_field: &str,
    direction: Direction,
) -> Result<Counterexample, ValidateError> {
    let (Some(low), Some(high)) = (best.inputs.first(), best.inputs.get(1)) else {
        return Ok(best);
    };
    let (Some(mut lo), Some(mut hi)) = (
        low.get(varied_field).and_then(Doc::as_f64),
        high.get(varied_field).and_then(Doc::as_f64),
    ) else {
        return Ok(best);
    };
    let base = low.clone();
    let mut best = best;
    let mut budget = ctx.run.shrink_limit;

    // Close the varied gap while the pair still violates the ordering.
    while budget >= 2 && (hi - lo) > 1.0 {
        let mid = (lo + hi) / 2.0;
        let lower_half = monotone_pair(&base, varied_field, lo, mid);
        budget -= 2;
        if let Some(cx) =
            check_monotone_pair(ctx, session, &lower_half, varied_field, output_field, direction)?
        {
            hi = mid;
            best = cx;
            continue;
        }
        if budget < 2 {
            break;
        }
        let upper_half = monotone_pair(&base, varied_field, mid, hi);
        budget -= 2;
        if let Some(cx) =
            check_monotone_pair(ctx, session, &upper_half, varied_field, output_field, direction)?
        {
            lo = mid;
            best = cx;
        } else {
            break;
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Operational validation
// ---------------------------------------------------------------------------

/// Check every capability clause over the collected trace.
pub fn validate_operational(bundle: &SealedBundle, trace: &EffectTrace) -> ValidatorResult {
    let caps = &bundle.bundle.operational;
    let mut clauses = Vec::new();
    let mut network_violations = 0u64;
    let mut filesystem_writes = 0u64;

    let mut outbound = ClauseOutcome::pass(CLAUSE_OUTBOUND_ALLOWLIST);
    for inv in &trace.invocations {
        for effect in &inv.effects {
            if effect.kind == EffectKind::NetworkCall
                && caps.deny_other_outbound
                && !caps.network_allowlist.iter().any(|a| a == &effect.target)
            {
                network_violations += 1;
                if outbound.passed {
                    outbound = ClauseOutcome::fail(
                        CLAUSE_OUTBOUND_ALLOWLIST,
                        Counterexample {
                            inputs: vec![inv.request.clone()],
                            observed: json!({"network_call": effect.target}),
                            expected: json!(caps.network_allowlist),
                            path: None,
                        },
                    );
                }
            }
        }
    }
    clauses.push(outbound);

    let mut fs_outcome = ClauseOutcome::pass(CLAUSE_FILESYSTEM_WRITE);
    for inv in &trace.invocations {
        for effect in &inv.effects {
            if effect.kind == EffectKind::FsWrite {
                filesystem_writes += 1;
                let allowed = caps.fs_write.iter().any(|p| effect.target.starts_with(p));
                if !allowed && fs_outcome.passed {
                    fs_outcome = ClauseOutcome::fail(
                        CLAUSE_FILESYSTEM_WRITE,
                        Counterexample {
                            inputs: vec![inv.request.clone()],
                            observed: json!({"fs_write": effect.target}),
                            expected: json!(caps.fs_write),
                            path: None,
                        },
                    );
                }
            }
        }
    }
    clauses.push(fs_outcome);

    clauses.push(allowlist_clause(
        trace,
        CLAUSE_DEPENDENCY_ALLOWLIST,
        EffectKind::DependencyUse,
        &caps.dependency_allowlist,
    ));
    clauses.push(allowlist_clause(
        trace,
        CLAUSE_SECRETS_ALLOWLIST,
        EffectKind::SecretAccess,
        &caps.secrets_allowlist,
    ));

    for budget in &caps.call_budgets {
        let mut outcome = ClauseOutcome::pass(&budget.clause_id);
        for inv in &trace.invocations {
            let count = inv
                .effects
                .iter()
                .filter(|e| e.kind == EffectKind::NetworkCall && e.target == budget.target)
                .count() as u64;
            if count > budget.max_per_request && outcome.passed {
                outcome = ClauseOutcome::fail_budget(
                    &budget.clause_id,
                    Number::from(count),
                    Number::from(budget.max_per_request),
                    Counterexample {
                        inputs: vec![inv.request.clone()],
                        observed: json!({"calls": count, "target": budget.target}),
                        expected: json!({"max_per_request": budget.max_per_request}),
                        path: None,
                    },
                );
            }
        }
        clauses.push(outcome);
    }

    let latencies: Vec<u64> = trace.invocations.iter().map(|i| i.latency_ms).collect();
    let p95 = p95_nearest_rank(&latencies);
    clauses.push(if p95 <= caps.max_latency_ms_p95 {
        ClauseOutcome::pass(CLAUSE_MAX_LATENCY)
    } else {
        ClauseOutcome::fail_budget(
            CLAUSE_MAX_LATENCY,
            Number::from(p95),
            Number::from(caps.max_latency_ms_p95),
            Counterexample {
                inputs: vec![],
                observed: json!({"max_latency_ms_p95": p95}),
                expected: json!({"max_latency_ms_p95": caps.max_latency_ms_p95}),
                path: None,
            },
        )
    });

    let peak = trace.invocations.iter().map(|i| i.peak_memory_mb).max().unwrap_or(0);
    clauses.push(if peak <= caps.max_memory_mb {
        ClauseOutcome::pass(CLAUSE_MAX_MEMORY)
    } else {
        ClauseOutcome::fail_budget(
            CLAUSE_MAX_MEMORY,
            Number::from(peak),
            Number::from(caps.max_memory_mb),
            Counterexample {
                inputs: vec![],
                observed: json!({"peak_memory_mb": peak}),
                expected: json!({"max_memory_mb": caps.max_memory_mb}),
                path: None,
            },
        )
    });

    let mut background = ClauseOutcome::pass(CLAUSE_BACKGROUND_WORK);
    if !caps.background_work_allowed {
        'outer: for inv in &trace.invocations {
            for effect in &inv.effects {
                if effect.post_response || effect.kind == EffectKind::BackgroundTask {
                    background = ClauseOutcome::fail(
                        CLAUSE_BACKGROUND_WORK,
                        Counterexample {
                            inputs: vec![inv.request.clone()],
                            observed: json!({
                                "kind": format!("{:?}", effect.kind),
                                "target": effect.target,
                                "post_response": effect.post_response,
                            }),
                            expected: json!("no background work"),
                            path: None,
                        },
                    );
                    break 'outer;
                }
            }
        }
    }
    clauses.push(background);

    let mut metrics = BTreeMap::new();
    metrics.insert("max_latency_ms_p95".to_string(), p95);
    metrics.insert("network_violations".to_string(), network_violations);
    metrics.insert("filesystem_writes".to_string(), filesystem_writes);
    ValidatorResult::from_clauses(CAPABILITY_MONITOR, CAPABILITY_MONITOR_VERSION, clauses, metrics)
}

fn allowlist_clause(
    trace: &EffectTrace,
    clause_id: &str,
    kind: EffectKind,
    allow: &[String],
) -> ClauseOutcome {
    for inv in &trace.invocations {
        for effect in &inv.effects {
            if effect.kind == kind && !allow.iter().any(|a| a == &effect.target) {
                return ClauseOutcome::fail(
                    clause_id,
                    Counterexample {
                        inputs: vec![inv.request.clone()],
                        observed: json!({"target": effect.target}),
                        expected: json!(allow),
                        path: None,
                    },
                );
            }
        }
    }
    ClauseOutcome::pass(clause_id)
}

// ---------------------------------------------------------------------------
// Full validation
// ---------------------------------------------------------------------------

/// Run all three validators against one candidate. Admission is their
/// conjunction.
pub fn validate(
    bundle: &SealedBundle,
    sessions: &dyn SessionFactory,
    run: &PropertyRun,
    options: &ValidationOptions,
) -> Result<ValidationRun, ValidateError> {
    check_validator_requirements(bundle)?;

    let (behavioral, behavioral_trace) =
        validate_behavioral_with(bundle, sessions, run, options.deadline_ms)?;

    // Dedicated load pass for the operational measurements.
    let mut load_session = sessions.open()?;
    for case_index in 0..options.load_pass_cases {
        let mut rng = CaseRng::for_case(run.seed, "operational-load-pass", case_index as u64);
        if let Ok(request) = generate(&bundle.bundle.structural.request, &mut rng) {
            let _ = invoke(load_session.as_mut(), &request, options.deadline_ms)?;
        }
    }
    let load_trace = load_session.collect_trace()?;

    let trace = EffectTrace::merged(vec![behavioral_trace, load_trace]);
    let structural = validate_structural(bundle, &trace);
    let operational = validate_operational(bundle, &trace);

    Ok(ValidationRun {
        results: vec![structural, behavioral, operational],
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{parse_bundle, seal_bundle, Quantifier};
    use crate::corpus;
    use crate::harness::{EffectEvent, FnReply, FnSession};
    use crate::time::{FixedClock, UtcTime};
    use serde_json::json;

    fn sealed_fixture() -> SealedBundle {
        let dir = tempfile::tempdir().unwrap();
        corpus::write_fraud_score_bundle(dir.path()).unwrap();
        let bundle = parse_bundle(dir.path()).unwrap();
        seal_bundle(&bundle, &FixedClock(UtcTime::parse("2026-05-11T00:00:00Z").unwrap()))
    }

    /// In-memory candidate factory over a reply function fed the request
    /// and a per-session call counter.
    struct Scorer<F>(F);

    impl<F> SessionFactory for Scorer<F>
    where
        F: Fn(&Doc, u64) -> FnReply + Clone + Send + Sync + 'static,
    {
        fn open(&self) -> Result<Box<dyn Session>, HarnessError> {
            let f = self.0.clone();
            let mut calls = 0u64;
            Ok(Box::new(FnSession::new(move |req: &Doc, _seq| {
                calls += 1;
                f(req, calls)
            })))
        }
    }

    fn compliant_reply(req: &Doc) -> FnReply {
        let valid = req.get("transaction_id").map(Doc::is_string) == Some(true)
            && req.get("account_id").map(Doc::is_string) == Some(true)
            && req.get("amount_cents").and_then(Doc::as_i64).map(|a| a >= 0) == Some(true);
        if !valid {
            return FnReply {
                outcome: Outcome::Error { kind: "invalid_request".into(), message: "bad".into() },
                effects: vec![],
                declared_duration_ms: 5,
                peak_memory_mb: 64,
            };
        }
        let amount = req.get("amount_cents").and_then(Doc::as_f64).unwrap_or(0.0);
        let score = corpus::reference_score(amount);
        FnReply {
            outcome: Outcome::Response(json!({
                "transaction_id": req.get("transaction_id").cloned().unwrap(),
                "risk_score": score,
                "decision": corpus::decision_for(score),
            })),
            effects: vec![EffectEvent {
                kind: EffectKind::NetworkCall,
                target: corpus::FEATURE_STORE.into(),
                post_response: false,
            }],
            declared_duration_ms: 61,
            peak_memory_mb: 112,
        }
    }

    fn run(cases: u32) -> PropertyRun {
        PropertyRun::new(42, cases)
    }

    #[test]
    fn compliant_candidate_passes_all_validators() {
        let sealed = sealed_fixture();
        let factory = Scorer(|req: &Doc, _| compliant_reply(req));
        let outcome = validate(&sealed, &factory, &run(60), &ValidationOptions::default()).unwrap();
        assert!(outcome.admitted(), "failed: {:?}", outcome.failed_clause_ids());
        assert_eq!(outcome.results.len(), 3);
        let behavioral = &outcome.results[1];
        assert_eq!(behavioral.metrics["generated_cases"], 60);
        assert_eq!(behavioral.metrics["counterexamples"], 0);
        let operational = &outcome.results[2];
        assert_eq!(operational.metrics["max_latency_ms_p95"], 61);
        assert_eq!(operational.metrics["network_violations"], 0);
        assert_eq!(operational.metrics["filesystem_writes"], 0);
    }

    #[test]
    fn fresh_random_scores_fail_determinism_with_two_outcomes() {
        let sealed = sealed_fixture();
        // Score varies with the global call counter: same request, new
        // score.
        let factory = Scorer(|req: &Doc, calls| {
            let mut reply = compliant_reply(req);
            if let Outcome::Response(body) = &mut reply.outcome {
                body["risk_score"] = json!(0.1 + 0.0001 * calls as f64);
            }
            reply
        });
        let (result, _) = validate_behavioral(&sealed, &factory, &run(20)).unwrap();
        assert!(!result.passed());
        let failed = result.failed_clause_ids();
        assert!(failed.contains(&"deterministic_scoring"), "{failed:?}");
        let clause = result
            .clauses
            .iter()
            .find(|c| c.clause_id == "deterministic_scoring")
            .unwrap();
        let cx = clause.counterexample.as_ref().unwrap();
        assert!(cx.observed.get("first").is_some() && cx.observed.get("second").is_some());
    }

    #[test]
    fn inverse_amount_scoring_fails_monotone_and_shrinks_the_gap() {
        let sealed = sealed_fixture();
        let factory = Scorer(|req: &Doc, _| {
            let mut reply = compliant_reply(req);
            if let Outcome::Response(body) = &mut reply.outcome {
                let amount = req.get("amount_cents").and_then(Doc::as_f64).unwrap_or(0.0);
                body["risk_score"] = json!((1.0 - amount / 1_000_000.0).clamp(0.0, 1.0));
            }
            reply
        });
        let (result, _) = validate_behavioral(&sealed, &factory, &run(400)).unwrap();
        let clause = result
            .clauses
            .iter()
            .find(|c| c.clause_id == "monotone_amount_risk")
            .unwrap();
        assert!(!clause.passed, "expected a monotonicity counterexample");
        let cx = clause.counterexample.as_ref().unwrap();
        assert_eq!(cx.inputs.len(), 2);
        let gap = cx.inputs[1].get("amount_cents").and_then(Doc::as_f64).unwrap()
            - cx.inputs[0].get("amount_cents").and_then(Doc::as_f64).unwrap();
        assert!(gap >= 0.0);

        // Independent oracle: brute force over the same generated pairs
        // confirms a violating pair exists for this seed.
        let schema = &sealed.bundle.structural.request;
        let mut found = false;
        for case in 0..400u64 {
            let mut rng = CaseRng::for_case(42, "monotone_amount_risk", case);
            let Ok(request) = generate(schema, &mut rng) else { continue };
            let a = request.get("amount_cents").and_then(Doc::as_f64).unwrap();
            let b = generate(schema.properties.get("amount_cents").unwrap(), &mut rng)
                .unwrap()
                .as_f64()
                .unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let f = |x: f64| (1.0 - x / 1_000_000.0).clamp(0.0, 1.0);
            if f(hi) < f(lo) && lo != hi {
                found = true;
                break;
            }
        }
        assert!(found, "oracle found no violating pair; the validator must not have either");
    }

    #[test]
    fn empty_behavioral_set_passes_vacuously() {
        let mut sealed = sealed_fixture();
        sealed.bundle.behavioral.clear();
        let factory = Scorer(|req: &Doc, _| compliant_reply(req));
        let (result, _) = validate_behavioral(&sealed, &factory, &run(10)).unwrap();
        assert!(result.passed());
        assert!(result.clauses.is_empty());
        assert_eq!(result.metrics["counterexamples"], 0);
    }

    #[test]
    fn structural_examples_from_the_handshake() {
        let sealed = sealed_fixture();
        let good = corpus::compliant_trace(5);
        let result = validate_structural(&sealed, &good);
        assert!(result.passed(), "{:?}", result.failed_clause_ids());

        // Response missing transaction_id.
        let mut trace = corpus::compliant_trace(2);
        if let Outcome::Response(body) = &mut trace.invocations[0].outcome {
            body.as_object_mut().unwrap().remove("transaction_id");
        }
        let result = validate_structural(&sealed, &trace);
        let clause = result
            .clauses
            .iter()
            .find(|c| c.clause_id == CLAUSE_RESPONSE_SCHEMA)
            .unwrap();
        assert!(!clause.passed);
        assert_eq!(
            clause.counterexample.as_ref().unwrap().path.as_deref(),
            Some("/response/transaction_id")
        );

        // risk_score out of range fails the range constraint.
        let mut trace = corpus::compliant_trace(2);
        if let Outcome::Response(body) = &mut trace.invocations[1].outcome {
            body["risk_score"] = json!(1.2);
        }
        let result = validate_structural(&sealed, &trace);
        assert!(!result.passed());
        assert_eq!(result.failed_clause_ids(), vec![CLAUSE_RESPONSE_SCHEMA]);
    }

    #[test]
    fn operational_flags_each_capability_class() {
        let sealed = sealed_fixture();

        // Two feature-store calls in one request: observed 2, allowed 1.
        let trace = corpus::runtime_violation_trace();
        let result = validate_operational(&sealed, &trace);
        let clause = result
            .clauses
            .iter()
            .find(|c| c.clause_id == "max_feature_store_calls_per_request")
            .unwrap();
        assert!(!clause.passed);
        assert_eq!(clause.observed_value, Some(Number::from(2u64)));
        assert_eq!(clause.allowed_value, Some(Number::from(1u64)));

        // A single write with an empty write list.
        let mut trace = corpus::compliant_trace(3);
        trace.invocations[1].effects.push(EffectEvent {
            kind: EffectKind::FsWrite,
            target: "/tmp/sneaky".into(),
            post_response: false,
        });
        let result = validate_operational(&sealed, &trace);
        assert!(result.failed_clause_ids().contains(&CLAUSE_FILESYSTEM_WRITE));
        assert_eq!(result.metrics["filesystem_writes"], 1);

        // p95 pass case records the metric.
        let trace = corpus::compliant_trace(20);
        let result = validate_operational(&sealed, &trace);
        assert!(result.passed());
        assert!(result.metrics["max_latency_ms_p95"] <= 75);
    }

    #[test]
    fn validation_aborts_on_unknown_required_validator() {
        let dir = tempfile::tempdir().unwrap();
        corpus::write_fraud_score_bundle(dir.path()).unwrap();
        let set = dir.path().join("validators/validator-set.yaml");
        let text = std::fs::read_to_string(&set).unwrap();
        std::fs::write(&set, text.replace("schema-conformance", "theorem-prover")).unwrap();
        let bundle = parse_bundle(dir.path()).unwrap();
        let sealed =
            seal_bundle(&bundle, &FixedClock(UtcTime::parse("2026-05-11T00:00:00Z").unwrap()));
        let factory = Scorer(|req: &Doc, _| compliant_reply(req));
        let err = validate(&sealed, &factory, &run(5), &ValidationOptions::default()).unwrap_err();
        assert!(matches!(err, ValidateError::UnknownValidator { .. }));
    }

    #[test]
    fn results_are_bytewise_reproducible() {
        let sealed = sealed_fixture();
        let factory = Scorer(|req: &Doc, _| compliant_reply(req));
        let a = validate(&sealed, &factory, &run(40), &ValidationOptions::default()).unwrap();
        let b = validate(&sealed, &factory, &run(40), &ValidationOptions::default()).unwrap();
        let bytes = |r: &ValidationRun| crate::canon::canonical_bytes_of(&r.results).unwrap();
        assert_eq!(bytes(&a), bytes(&b));
        // A different seed changes the generated population.
        let c = validate(&sealed, &factory, &PropertyRun::new(43, 40), &ValidationOptions::default())
            .unwrap();
        assert!(c.admitted());
        assert_ne!(
            crate::canon::canonical_bytes_of(&a.trace.invocations).unwrap(),
            crate::canon::canonical_bytes_of(&c.trace.invocations).unwrap()
        );
    }

    #[test]
    fn single_planted_clause_flips_admission() {
        // Candidate violating exactly one clause: rejection names that
        // clause and no other.
        let sealed = sealed_fixture();
        let factory = Scorer(|req: &Doc, _| {
            let mut reply = compliant_reply(req);
            reply.effects.push(EffectEvent {
                kind: EffectKind::DependencyUse,
                target: "left-pad".into(),
                post_response: false,
            });
            reply
        });
        let outcome = validate(&sealed, &factory, &run(30), &ValidationOptions::default()).unwrap();
        assert!(!outcome.admitted());
        assert_eq!(outcome.failed_clause_ids(), vec![CLAUSE_DEPENDENCY_ALLOWLIST]);
    }

    #[test]
    fn soundness_cross_check_against_the_surface() {
        // A pass result implies the compiled surface holds over the stored
        // trace.
        let sealed = sealed_fixture();
        let factory = Scorer(|req: &Doc, _| compliant_reply(req));
        let outcome = validate(&sealed, &factory, &run(50), &ValidationOptions::default()).unwrap();
        assert!(outcome.admitted());
        let surface = crate::surface::compile_guarantees(&sealed);
        let violations = surface.evaluate(&outcome.trace);
        assert!(violations.is_empty(), "surface disagrees: {violations:?}");
    }

    #[test]
    fn idempotent_kinds_are_checked() {
        // Swap the fraud-score behavioral set for an idempotence property
        // and drive a double that mutates state on replay.
        let mut sealed = sealed_fixture();
        sealed.bundle.behavioral = vec![BehavioralProperty {
            name: "replay_idempotent".into(),
            quantifier: Quantifier::One,
            require: RequireClause::IdempotentStateful,
            case_count: 10,
        }];
        let factory = Scorer(|req: &Doc, _| {
            let mut reply = compliant_reply(req);
            reply.effects = vec![EffectEvent {
                kind: EffectKind::FsWrite,
                target: "/data/users".into(),
                post_response: false,
            }];
            reply
        });
        let (result, _) = validate_behavioral(&sealed, &factory, &run(10)).unwrap();
        assert!(!result.passed());
        assert_eq!(result.failed_clause_ids(), vec!["replay_idempotent"]);
    }

    #[test]
    fn admission_flips_to_reject_for_every_clause() {
        // Conjunction at the clause level: for each clause of the corpus
        // bundle, a candidate made to fail (at least) that clause is
        // rejected with the clause named. Inherently coupled clauses
        // (an invalid request answered with success also fails the
        // fails-closed property) are allowed to co-fail; nothing else may.
        let sealed = sealed_fixture();
        let surface_ids: Vec<String> = crate::surface::compile_guarantees(&sealed)
            .clause_ids()
            .iter()
            .map(|s| s.to_string())
            .collect();

        type Mutator = fn(&Doc, FnReply) -> FnReply;
        let respond_to_invalid: Mutator = |req, mut reply| {
            if matches!(reply.outcome, Outcome::Error { .. }) {
                reply.outcome = Outcome::Response(json!({
                    "transaction_id": req.get("transaction_id").cloned().unwrap_or(json!("t")),
                    "risk_score": 0.2,
                    "decision": "approve",
                }));
            }
            reply
        };
        let drop_decision: Mutator = |_req, mut reply| {
            if let Outcome::Response(body) = &mut reply.outcome {
                body.as_object_mut().unwrap().remove("decision");
            }
            reply
        };
        let undeclared_error_sometimes: Mutator = |req, mut reply| {
            let amount = req.get("amount_cents").and_then(Doc::as_i64).unwrap_or(0);
            if matches!(reply.outcome, Outcome::Response(_)) && amount % 3 == 0 {
                reply.outcome = Outcome::Error { kind: "weird".into(), message: String::new() };
            }
            reply
        };
        let wrong_declared_error: Mutator = |_req, mut reply| {
            if let Outcome::Error { kind, .. } = &mut reply.outcome {
                *kind = "dependency_unavailable".to_string();
            }
            reply
        };
        let out_of_range: Mutator = |_req, mut reply| {
            if let Outcome::Response(body) = &mut reply.outcome {
                body["risk_score"] = json!(1.2);
            }
            reply
        };
        let inverse_slope: Mutator = |req, mut reply| {
            if let Outcome::Response(body) = &mut reply.outcome {
                let amount = req.get("amount_cents").and_then(Doc::as_f64).unwrap_or(0.0);
                body["risk_score"] = json!((1.0 - amount / 2.0e9).clamp(0.0, 1.0));
            }
            reply
        };
        let extra_effect = |kind: EffectKind, target: &'static str| {
            move |_req: &Doc, mut reply: FnReply| {
                if matches!(reply.outcome, Outcome::Response(_)) {
                    reply.effects.push(EffectEvent {
                        kind,
                        target: target.to_string(),
                        post_response: false,
                    });
                }
                reply
            }
        };

        // (planted clause, candidate behavior, clauses allowed to co-fail)
        type Plan = std::sync::Arc<dyn Fn(&Doc, FnReply) -> FnReply + Send + Sync>;
        fn plan(f: impl Fn(&Doc, FnReply) -> FnReply + Send + Sync + 'static) -> Plan {
            std::sync::Arc::new(f)
        }
        let plans: Vec<(&str, Plan, Vec<&str>)> = vec![
            (
                CLAUSE_REQUEST_SCHEMA,
                plan(respond_to_invalid),
                vec!["invalid_request_fails_closed"],
            ),
            (CLAUSE_RESPONSE_SCHEMA, plan(drop_decision), vec![]),
            (CLAUSE_ERROR_KINDS, plan(undeclared_error_sometimes), vec![]),
            ("score_range", plan(out_of_range), vec![CLAUSE_RESPONSE_SCHEMA]),
            ("monotone_amount_risk", plan(inverse_slope), vec![]),
            ("invalid_request_fails_closed", plan(wrong_declared_error), vec![]),
            (
                CLAUSE_OUTBOUND_ALLOWLIST,
                plan(extra_effect(EffectKind::NetworkCall, "evil.example:443")),
                vec![],
            ),
            (
                CLAUSE_FILESYSTEM_WRITE,
                plan(extra_effect(EffectKind::FsWrite, "/tmp/cache")),
                vec![],
            ),
            (
                CLAUSE_DEPENDENCY_ALLOWLIST,
                plan(extra_effect(EffectKind::DependencyUse, "left-pad")),
                vec![],
            ),
            (
                CLAUSE_SECRETS_ALLOWLIST,
                plan(extra_effect(EffectKind::SecretAccess, "ROOT_TOKEN")),
                vec![],
            ),
            (
                "max_feature_store_calls_per_request",
                plan(extra_effect(EffectKind::NetworkCall, corpus::FEATURE_STORE)),
                vec![],
            ),
            ("max_latency_ms_p95", plan(|_req: &Doc, mut reply: FnReply| {
                reply.declared_duration_ms = 200;
                reply
            }), vec![]),
            ("max_memory_mb", plan(|_req: &Doc, mut reply: FnReply| {
                reply.peak_memory_mb = 999;
                reply
            }), vec![]),
            (CLAUSE_BACKGROUND_WORK, plan(|_req: &Doc, mut reply: FnReply| {
                // A read carries no clause of its own, so only the
                // post_response flag can be at fault.
                if matches!(reply.outcome, Outcome::Response(_)) {
                    reply.effects.push(EffectEvent {
                        kind: EffectKind::FsRead,
                        target: "/var/cache/features".into(),
                        post_response: true,
                    });
                }
                reply
            }), vec![]),
        ];

        struct PlanScorer(Plan);
        impl SessionFactory for PlanScorer {
            fn open(&self) -> Result<Box<dyn Session>, HarnessError> {
                let f = std::sync::Arc::clone(&self.0);
                Ok(Box::new(FnSession::new(move |req: &Doc, _seq| {
                    f(req, compliant_reply(req))
                })))
            }
        }

        let mut planted_total: Vec<String> = vec!["deterministic_scoring".to_string()];
        {
            // Stateful double: fresh score on each repeated call.
            let factory = Scorer(|req: &Doc, calls| {
                let mut reply = compliant_reply(req);
                if let Outcome::Response(body) = &mut reply.outcome {
                    body["risk_score"] = json!(0.1 + 0.000_1 * calls as f64);
                }
                reply
            });
            let outcome =
                validate(&sealed, &factory, &run(30), &ValidationOptions::default()).unwrap();
            assert!(!outcome.admitted());
            assert!(outcome.failed_clause_ids().contains(&"deterministic_scoring"));
        }
        for (clause, mutate, allowed_cofail) in &plans {
            let factory = PlanScorer(std::sync::Arc::clone(mutate));
            let outcome =
                validate(&sealed, &factory, &run(30), &ValidationOptions::default()).unwrap();
            assert!(!outcome.admitted(), "{clause}: planted failure did not flip admission");
            let failed = outcome.failed_clause_ids();
            assert!(failed.contains(clause), "{clause}: not named, failed = {failed:?}");
            for f in &failed {
                assert!(
                    f == clause || allowed_cofail.contains(f),
                    "{clause}: unexpected co-failing clause {f}"
                );
            }
            planted_total.push(clause.to_string());
        }

        // Every clause of the corpus bundle was flipped by some plan.
        for id in surface_ids {
            assert!(planted_total.iter().any(|p| p == &id), "no plan flips clause {id}");
        }
    }

    #[test]
    fn idempotent_output_feeds_the_response_back() {
        let mut sealed = sealed_fixture();
        sealed.bundle.behavioral = vec![BehavioralProperty {
            name: "projection_idempotent".into(),
            quantifier: Quantifier::One,
            require: RequireClause::IdempotentOutput,
            case_count: 5,
        }];
        // Identity-like candidate: echoes a normal form; f(f(x)) = f(x).
        let normalizing = Scorer(|req: &Doc, _| FnReply {
            outcome: Outcome::Response(json!({
                "transaction_id": req.get("transaction_id").cloned().unwrap_or(json!("t")),
                "account_id": req.get("account_id").cloned().unwrap_or(json!("a")),
                "amount_cents": req.get("amount_cents").cloned().unwrap_or(json!(0)),
            })),
            effects: vec![],
            declared_duration_ms: 1,
            peak_memory_mb: 1,
        });
        let (result, _) = validate_behavioral(&sealed, &normalizing, &run(5)).unwrap();
        assert!(result.passed(), "{:?}", result.failed_clause_ids());

        // A drifting candidate keeps appending: f(f(x)) != f(x).
        let drifting = Scorer(|req: &Doc, _| {
            let tid = req.get("transaction_id").and_then(Doc::as_str).unwrap_or("t");
            FnReply {
                outcome: Outcome::Response(json!({
                    "transaction_id": format!("{tid}+"),
                    "account_id": req.get("account_id").cloned().unwrap_or(json!("a")),
                    "amount_cents": req.get("amount_cents").cloned().unwrap_or(json!(0)),
                })),
                effects: vec![],
                declared_duration_ms: 1,
                peak_memory_mb: 1,
            }
        });
        let (result, _) = validate_behavioral(&sealed, &drifting, &run(5)).unwrap();
        assert!(!result.passed());
    }
}
