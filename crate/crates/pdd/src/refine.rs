//! Conservative syntactic refinement checking between bundle versions.
//!
//! `check_refinement(p_prime, p)` answers whether every constraint of `p`
//! is present and possibly strengthened in `p_prime`. The check is
//! deliberately syntactic: semantic subsumption is undecidable in general,
//! so an incomparable rewrite is reported as non-refining rather than
//! guessed at. When the check passes, every observation admitted by
//! `p_prime`'s guarantee surface is admitted by `p`'s.

use serde::{Deserialize, Serialize};

use crate::bundle::{
    BehavioralProperty, CapabilityManifest, Direction, RequireClause, SealedBundle,
};
use crate::schema::{SchemaKind, SchemaNode};
use crate::surface::{
    CLAUSE_BACKGROUND_WORK, CLAUSE_DEPENDENCY_ALLOWLIST, CLAUSE_ERROR_KINDS, CLAUSE_MAX_LATENCY,
    CLAUSE_MAX_MEMORY, CLAUSE_OUTBOUND_ALLOWLIST, CLAUSE_REQUEST_SCHEMA, CLAUSE_RESPONSE_SCHEMA,
    CLAUSE_SECRETS_ALLOWLIST,
};

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error("protocol mismatch: cannot compare {p_prime} against {p}")]
    ProtocolMismatch { p_prime: String, p: String },
}

/// How one clause of the candidate refinement compares to its predecessor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClauseRelation {
    Equal,
    Strengthened,
    Added,
    Weakened,
    Removed,
    Incomparable,
}

impl ClauseRelation {
    pub fn refines(self) -> bool {
        matches!(self, ClauseRelation::Equal | ClauseRelation::Strengthened | ClauseRelation::Added)
    }
}

/// One row of the refinement report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClauseComparison {
    pub clause: String,
    pub relation: ClauseRelation,
    pub detail: String,
}

/// Full per-clause comparison of two sealed bundles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementReport {
    pub protocol_id: String,
    pub refined_version: String,
    pub base_version: String,
    pub refines: bool,
    pub clauses: Vec<ClauseComparison>,
}

impl RefinementReport {
    pub fn weakened_clauses(&self) -> Vec<&str> {
        self.clauses
            .iter()
            .filter(|c| !c.relation.refines())
            .map(|c| c.clause.as_str())
            .collect()
    }
}

struct Report {
    rows: Vec<ClauseComparison>,
}

impl Report {
    fn push(&mut self, clause: &str, relation: ClauseRelation, detail: impl Into<String>) {
        self.rows.push(ClauseComparison {
            clause: clause.to_string(),
            relation,
            detail: detail.into(),
        });
    }
}

/// Check that `p_prime` refines `p`, reporting every clause comparison.
pub fn check_refinement(
    p_prime: &SealedBundle,
    p: &SealedBundle,
) -> Result<RefinementReport, RefineError> {
    if p_prime.bundle.protocol_id != p.bundle.protocol_id {
        return Err(RefineError::ProtocolMismatch {
            p_prime: p_prime.bundle.protocol_id.clone(),
            p: p.bundle.protocol_id.clone(),
        });
    }
    let mut report = Report { rows: Vec::new() };

    compare_schema_node(
        &p_prime.bundle.structural.request,
        &p.bundle.structural.request,
        CLAUSE_REQUEST_SCHEMA,
        "/request",
        &mut report,
    );
    compare_schema_node(
        &p_prime.bundle.structural.response,
        &p.bundle.structural.response,
        CLAUSE_RESPONSE_SCHEMA,
        "/response",
        &mut report,
    );
    compare_subset(
        &p_prime.bundle.structural.errors,
        &p.bundle.structural.errors,
        CLAUSE_ERROR_KINDS,
        "error kind",
        &mut report,
    );
    compare_behavioral(&p_prime.bundle.behavioral, &p.bundle.behavioral, &mut report);
    compare_operational(&p_prime.bundle.operational, &p.bundle.operational, &mut report);

    let refines = report.rows.iter().all(|c| c.relation.refines());
    Ok(RefinementReport {
        protocol_id: p.bundle.protocol_id.clone(),
        refined_version: p_prime.bundle.version.to_string(),
        base_version: p.bundle.version.to_string(),
        refines,
        clauses: report.rows,
    })
}

fn compare_subset(
    prime: &[String],
    base: &[String],
    clause: &str,
    noun: &str,
    report: &mut Report,
) {
    let extra: Vec<&String> = prime.iter().filter(|e| !base.contains(e)).collect();
    if !extra.is_empty() {
        report.push(
            clause,
            ClauseRelation::Weakened,
            format!("{noun} set gained {extra:?}, widening what is admissible"),
        );
    } else if prime.len() == base.len() {
        report.push(clause, ClauseRelation::Equal, format!("{noun} set unchanged"));
    } else {
        report.push(
            clause,
            ClauseRelation::Strengthened,
            format!("{noun} set narrowed from {} to {} entries", base.len(), prime.len()),
        );
    }
}

fn compare_schema_node(
    prime: &SchemaNode,
    base: &SchemaNode,
    clause: &str,
    path: &str,
    report: &mut Report,
) {
    if prime.kind != base.kind {
        report.push(
            clause,
            ClauseRelation::Incomparable,
            format!("{path}: kind changed {} -> {}", base.kind, prime.kind),
        );
        return;
    }
    match base.kind {
        SchemaKind::Object => {
            for field in &base.required {
                if !prime.required.contains(field) {
                    report.push(
                        clause,
                        ClauseRelation::Weakened,
                        format!("{path}/{field}: required field dropped"),
                    );
                }
            }
            for field in &prime.required {
                if !base.required.contains(field) {
                    report.push(
                        clause,
                        ClauseRelation::Strengthened,
                        format!("{path}/{field}: field newly required"),
                    );
                }
            }
            for (name, base_child) in &base.properties {
                match prime.properties.get(name) {
                    Some(prime_child) => compare_schema_node(
                        prime_child,
                        base_child,
                        clause,
                        &format!("{path}/{name}"),
                        report,
                    ),
                    None => report.push(
                        clause,
                        ClauseRelation::Weakened,
                        format!("{path}/{name}: declared field dropped, its constraints no longer apply"),
                    ),
                }
            }
            for name in prime.properties.keys() {
                if !base.properties.contains_key(name) {
                    report.push(
                        clause,
                        ClauseRelation::Added,
                        format!("{path}/{name}: new constrained field"),
                    );
                }
            }
        }
        SchemaKind::Integer | SchemaKind::Number => {
            compare_bound(prime.minimum, base.minimum, true, clause, path, report);
            compare_bound(prime.maximum, base.maximum, false, clause, path, report);
        }
        SchemaKind::Enum => {
            let extra: Vec<&String> = prime
                .enum_values
                .iter()
                .filter(|v| !base.enum_values.contains(v))
                .collect();
            if !extra.is_empty() {
                report.push(
                    clause,
                    ClauseRelation::Weakened,
                    format!("{path}: enum gained {extra:?}"),
                );
            } else if prime.enum_values.len() == base.enum_values.len() {
                report.push(clause, ClauseRelation::Equal, format!("{path}: enum unchanged"));
            } else {
                report.push(
                    clause,
                    ClauseRelation::Strengthened,
                    format!("{path}: enum narrowed"),
                );
            }
        }
        SchemaKind::String => match (&prime.pattern, &base.pattern) {
            (a, b) if a == b => {
                report.push(clause, ClauseRelation::Equal, format!("{path}: unchanged"))
            }
            (Some(p), None) => report.push(
                clause,
                ClauseRelation::Strengthened,
                format!("{path}: pattern {p:?} added"),
            ),
            (None, Some(p)) => report.push(
                clause,
                ClauseRelation::Weakened,
                format!("{path}: pattern {p:?} dropped"),
            ),
            (Some(a), Some(b)) => report.push(
                clause,
                ClauseRelation::Incomparable,
                format!("{path}: pattern changed {b:?} -> {a:?}; pattern subsumption is not checked"),
            ),
            (None, None) => unreachable!("equal patterns matched above"),
        },
    }
}

fn compare_bound(
    prime: Option<f64>,
    base: Option<f64>,
    is_lower: bool,
    clause: &str,
    path: &str,
    report: &mut Report,
) {
    let side = if is_lower { "minimum" } else { "maximum" };
    match (prime, base) {
        (a, b) if a == b => {}
        (Some(p), Some(b)) => {
            let stronger = if is_lower { p > b } else { p < b };
            report.push(
                clause,
                if stronger { ClauseRelation::Strengthened } else { ClauseRelation::Weakened },
                format!("{path}: {side} moved {b} -> {p}"),
            );
        }
        (Some(p), None) => report.push(
            clause,
            ClauseRelation::Strengthened,
            format!("{path}: {side} {p} added"),
        ),
        (None, Some(b)) => report.push(
            clause,
            ClauseRelation::Weakened,
            format!("{path}: {side} {b} dropped"),
        ),
        (None, None) => unreachable!("equal bounds matched above"),
    }
}

fn compare_behavioral(
    prime: &[BehavioralProperty],
    base: &[BehavioralProperty],
    report: &mut Report,
) {
    for bp in base {
        let Some(pp) = prime.iter().find(|p| p.name == bp.name) else {
            report.push(&bp.name, ClauseRelation::Removed, "behavioral property dropped");
            continue;
        };
        if pp.kind() != bp.kind() {
            report.push(
                &bp.name,
                ClauseRelation::Incomparable,
                format!("property kind changed {} -> {}", bp.kind(), pp.kind()),
            );
            continue;
        }
        if pp.case_count < bp.case_count {
            report.push(
                &bp.name,
                ClauseRelation::Weakened,
                format!("case_count lowered {} -> {}", bp.case_count, pp.case_count),
            );
            continue;
        }
        match (&pp.require, &bp.require) {
            (
                RequireClause::Range { field: fa, minimum: mina, maximum: maxa },
                RequireClause::Range { field: fb, minimum: minb, maximum: maxb },
            ) => {
                if fa != fb {
                    report.push(
                        &bp.name,
                        ClauseRelation::Incomparable,
                        format!("range target changed {fb:?} -> {fa:?}"),
                    );
                    continue;
                }
                let min_ok = bound_at_least_as_strong(*mina, *minb, true);
                let max_ok = bound_at_least_as_strong(*maxa, *maxb, false);
                if min_ok && max_ok {
                    let tightened = mina != minb || maxa != maxb || pp.case_count > bp.case_count;
                    report.push(
                        &bp.name,
                        if tightened { ClauseRelation::Strengthened } else { ClauseRelation::Equal },
                        "range bounds at least as strong",
                    );
                } else {
                    report.push(&bp.name, ClauseRelation::Weakened, "range bounds widened");
                }
            }
            (
                RequireClause::Monotone { varied_field: va, output_field: oa, direction: da },
                RequireClause::Monotone { varied_field: vb, output_field: ob, direction: db },
            ) => {
                if va != vb || oa != ob || !matches_direction(*da, *db) {
                    report.push(
                        &bp.name,
                        ClauseRelation::Incomparable,
                        "monotonicity fields or direction changed",
                    );
                } else {
                    strengthened_by_cases(pp, bp, report);
                }
            }
            (
                RequireClause::FailsClosed { error_kind: a },
                RequireClause::FailsClosed { error_kind: b },
            ) => {
                if a != b {
                    report.push(
                        &bp.name,
                        ClauseRelation::Incomparable,
                        format!("fails-closed error kind changed {b:?} -> {a:?}"),
                    );
                } else {
                    strengthened_by_cases(pp, bp, report);
                }
            }
            _ => strengthened_by_cases(pp, bp, report),
        }
    }
    for pp in prime {
        if !base.iter().any(|b| b.name == pp.name) {
            report.push(&pp.name, ClauseRelation::Added, "new behavioral property");
        }
    }
}

fn matches_direction(a: Direction, b: Direction) -> bool {
    a == b
}

fn bound_at_least_as_strong(prime: Option<f64>, base: Option<f64>, is_lower: bool) -> bool {
    match (prime, base) {
        (_, None) => true,
        (None, Some(_)) => false,
        (Some(p), Some(b)) => {
            if is_lower {
                p >= b
            } else {
                p <= b
            }
        }
    }
}

fn strengthened_by_cases(pp: &BehavioralProperty, bp: &BehavioralProperty, report: &mut Report) {
    report.push(
        &bp.name,
        if pp.case_count > bp.case_count {
            ClauseRelation::Strengthened
        } else {
            ClauseRelation::Equal
        },
        format!("case_count {} -> {}", bp.case_count, pp.case_count),
    );
}

fn compare_operational(prime: &CapabilityManifest, base: &CapabilityManifest, report: &mut Report) {
    compare_subset(
        &prime.network_allowlist,
        &base.network_allowlist,
        CLAUSE_OUTBOUND_ALLOWLIST,
        "outbound allowlist",
        report,
    );
    if base.deny_other_outbound && !prime.deny_other_outbound {
        report.push(
            CLAUSE_OUTBOUND_ALLOWLIST,
            ClauseRelation::Weakened,
            "deny_other_outbound relaxed true -> false",
        );
    } else if !base.deny_other_outbound && prime.deny_other_outbound {
        report.push(
            CLAUSE_OUTBOUND_ALLOWLIST,
            ClauseRelation::Strengthened,
            "deny_other_outbound tightened false -> true",
        );
    }
    compare_subset(&prime.fs_write, &base.fs_write, "filesystem_write", "write grant", report);
    compare_subset(&prime.fs_read, &base.fs_read, "filesystem_read", "read grant", report);
    compare_subset(
        &prime.dependency_allowlist,
        &base.dependency_allowlist,
        CLAUSE_DEPENDENCY_ALLOWLIST,
        "dependency allowlist",
        report,
    );
    compare_subset(
        &prime.secrets_allowlist,
        &base.secrets_allowlist,
        CLAUSE_SECRETS_ALLOWLIST,
        "secret grant",
        report,
    );
    compare_budget(
        prime.max_latency_ms_p95,
        base.max_latency_ms_p95,
        CLAUSE_MAX_LATENCY,
        report,
    );
    compare_budget(prime.max_memory_mb, base.max_memory_mb, CLAUSE_MAX_MEMORY, report);
    for bb in &base.call_budgets {
        match prime.call_budgets.iter().find(|p| p.target == bb.target) {
            None => report.push(
                &bb.clause_id,
                ClauseRelation::Removed,
                format!("budget for {:?} dropped, calls become unbounded", bb.target),
            ),
            Some(pb) => compare_budget(pb.max_per_request, bb.max_per_request, &bb.clause_id, report),
        }
    }
    for pb in &prime.call_budgets {
        if !base.call_budgets.iter().any(|b| b.target == pb.target) {
            report.push(&pb.clause_id, ClauseRelation::Added, "new per-request budget");
        }
    }
    if base.background_work_allowed && !prime.background_work_allowed {
        report.push(
            CLAUSE_BACKGROUND_WORK,
            ClauseRelation::Strengthened,
            "background work revoked",
        );
    } else if !base.background_work_allowed && prime.background_work_allowed {
        report.push(
            CLAUSE_BACKGROUND_WORK,
            ClauseRelation::Weakened,
            "background work newly permitted",
        );
    } else {
        report.push(CLAUSE_BACKGROUND_WORK, ClauseRelation::Equal, "unchanged");
    }
}

fn compare_budget(prime: u64, base: u64, clause: &str, report: &mut Report) {
    use std::cmp::Ordering;
    match prime.cmp(&base) {
        Ordering::Equal => report.push(clause, ClauseRelation::Equal, format!("budget {base}")),
        Ordering::Less => report.push(
            clause,
            ClauseRelation::Strengthened,
            format!("budget lowered {base} -> {prime}"),
        ),
        Ordering::Greater => report.push(
            clause,
            ClauseRelation::Weakened,
            format!("budget raised {base} -> {prime}"),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{parse_bundle, seal_bundle};
    use crate::corpus;
    use crate::time::{FixedClock, UtcTime};

    fn sealed_fixture() -> SealedBundle {
        let dir = tempfile::tempdir().unwrap();
        corpus::write_fraud_score_bundle(dir.path()).unwrap();
        let bundle = parse_bundle(dir.path()).unwrap();
        seal_bundle(&bundle, &FixedClock(UtcTime::parse("2026-05-11T00:00:00Z").unwrap()))
    }

    fn sealed_with(edit: impl Fn(&str) -> String, file: &str) -> SealedBundle {
        let dir = tempfile::tempdir().unwrap();
        corpus::write_fraud_score_bundle(dir.path()).unwrap();
        let path = dir.path().join(file);
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, edit(&text)).unwrap();
        let bundle = parse_bundle(dir.path()).unwrap();
        seal_bundle(&bundle, &FixedClock(UtcTime::parse("2026-05-11T00:00:00Z").unwrap()))
    }

    #[test]
    fn refinement_is_reflexive() {
        let p = sealed_fixture();
        let report = check_refinement(&p, &p).unwrap();
        assert!(report.refines, "{:#?}", report.weakened_clauses());
    }

    #[test]
    fn added_required_field_and_lowered_latency_refines() {
        let p = sealed_fixture();
        let p_prime = {
            let dir = tempfile::tempdir().unwrap();
            corpus::write_fraud_score_bundle(dir.path()).unwrap();
            let schema = dir.path().join("structural/request-response.schema.yaml");
            let text = std::fs::read_to_string(&schema).unwrap();
            let text = text.replace(
                "required: [transaction_id, account_id, amount_cents]",
                "required: [transaction_id, account_id, amount_cents, channel]",
            );
            let text = text.replace(
                "    merchant_country:",
                "    channel: {kind: enum, enum_values: [web, pos]}\n    merchant_country:",
            );
            std::fs::write(&schema, text).unwrap();
            let caps = dir.path().join("operational/capabilities.yaml");
            let text = std::fs::read_to_string(&caps).unwrap();
            std::fs::write(&caps, text.replace("max_latency_ms_p95: 75", "max_latency_ms_p95: 60")).unwrap();
            let bundle = parse_bundle(dir.path()).unwrap();
            seal_bundle(&bundle, &FixedClock(UtcTime::parse("2026-05-11T00:00:00Z").unwrap()))
        };
        let report = check_refinement(&p_prime, &p).unwrap();
        assert!(report.refines, "weakened: {:?}", report.weakened_clauses());
        assert!(report
            .clauses
            .iter()
            .any(|c| c.clause == CLAUSE_MAX_LATENCY && c.relation == ClauseRelation::Strengthened));
    }

    #[test]
    fn raised_latency_budget_is_flagged_weakened() {
        let p = sealed_fixture();
        let p_prime = sealed_with(
            |t| t.replace("max_latency_ms_p95: 75", "max_latency_ms_p95: 100"),
            "operational/capabilities.yaml",
        );
        let report = check_refinement(&p_prime, &p).unwrap();
        assert!(!report.refines);
        assert_eq!(report.weakened_clauses(), vec![CLAUSE_MAX_LATENCY]);
    }

    #[test]
    fn dropped_property_is_flagged() {
        let p = sealed_fixture();
        let p_prime = sealed_with(
            |t| {
                t.replace(
                    "  - name: deterministic_scoring\n    kind: determinism\n    for_all: request\n    case_count: 5000\n",
                    "",
                )
            },
            "behavioral/scoring.properties.yaml",
        );
        let report = check_refinement(&p_prime, &p).unwrap();
        assert!(!report.refines);
        assert!(report
            .clauses
            .iter()
            .any(|c| c.clause == "deterministic_scoring" && c.relation == ClauseRelation::Removed));
    }

    #[test]
    fn protocol_mismatch_is_an_error() {
        let p = sealed_fixture();
        let other = sealed_with(
            |t| t.replace("protocol_id: fraud-score", "protocol_id: other-protocol"),
            "protocol.yaml",
        );
        assert!(matches!(
            check_refinement(&other, &p),
            Err(RefineError::ProtocolMismatch { .. })
        ));
    }

    #[test]
    fn widened_enum_is_weakened() {
        let p = sealed_fixture();
        let p_prime = sealed_with(
            |t| t.replace("[approve, review, decline]", "[approve, review, decline, escalate]"),
            "structural/request-response.schema.yaml",
        );
        let report = check_refinement(&p_prime, &p).unwrap();
        assert!(!report.refines);
    }
}
