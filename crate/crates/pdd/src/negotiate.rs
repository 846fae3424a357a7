//! Contract negotiation: dependency resolution, capability reconciliation,
//! and the sealed bundle that generation targets.
//!
//! Resolution computes the transitive dependency closure against a
//! registry, pinning one version per protocol: the highest published
//! version satisfying the intersection of every collected range. An empty
//! intersection is a version conflict; an unpublished protocol is
//! unresolvable. Reconciliation then checks that no pinned dependency
//! demands a network destination the root manifest denies. Negotiation
//! succeeds, and seals with the pins recorded in provenance, only when
//! both steps produce zero conflicts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bundle::{seal_bundle, ProtocolBundle, SealedBundle};
use crate::canon::ContentDigest;
use crate::store::{RegistryHandle, StoreError};
use crate::time::Clock;
use crate::version::{SemVer, VersionRange};

#[derive(Debug, thiserror::Error)]
pub enum NegotiateError {
    #[error("registry unavailable: {0}")]
    RegistryUnavailable(String),
    #[error("negotiation failed with {} conflict(s)", conflicts.len())]
    NegotiationFailed { conflicts: Vec<ConflictRecord> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictKind {
    VersionConflict,
    Unresolvable,
    CapabilityConflict,
}

/// One negotiation conflict with the constraint sets involved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictRecord {
    pub protocol_id: String,
    pub kind: ConflictKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ranges: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub available_versions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// One pinned dependency.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pin {
    pub version: SemVer,
    pub bundle_digest: ContentDigest,
}

/// Outcome of dependency resolution: pins and conflicts never overlap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionResult {
    pub pinned: BTreeMap<String, Pin>,
    pub conflicts: Vec<ConflictRecord>,
}

impl ResolutionResult {
    pub fn ok(&self) -> bool {
        self.conflicts.is_empty()
    }
}

/// Resolve the transitive dependency closure of `root` against the
/// registry.
///
/// Constraint collection iterates to a fixed point: when a new range
/// arrives for a protocol, its pin is recomputed (highest satisfying
/// version) and that pinned bundle's own dependencies join the closure.
pub fn resolve_dependencies(
    root: &ProtocolBundle,
    registry: &RegistryHandle,
) -> Result<ResolutionResult, NegotiateError> {
    let mut ranges: BTreeMap<String, Vec<VersionRange>> = BTreeMap::new();
    let mut pinned: BTreeMap<String, Pin> = BTreeMap::new();
    let mut conflicts: Vec<ConflictRecord> = Vec::new();
    let mut failed: BTreeMap<String, ()> = BTreeMap::new();

    for dep in &root.dependencies {
        ranges.entry(dep.protocol_id.clone()).or_default().push(dep.version_range);
    }

    // The closure is finite (one pin per protocol id, registries are
    // finite); the iteration cap guards cyclic or pathological graphs.
    for _round in 0..64 {
        let mut changed = false;
        let ids: Vec<String> = ranges.keys().cloned().collect();
        for id in ids {
            if failed.contains_key(&id) {
                continue;
            }
            let collected = ranges.get(&id).cloned().unwrap_or_default();
            let available = registry
                .versions_of(&id)
                .map_err(|e| NegotiateError::RegistryUnavailable(e.to_string()))?;
            if available.is_empty() {
                conflicts.push(ConflictRecord {
                    protocol_id: id.clone(),
                    kind: ConflictKind::Unresolvable,
                    ranges: collected.iter().map(|r| r.to_string()).collect(),
                    available_versions: vec![],
                    detail: Some("protocol is not published in the registry".to_string()),
                });
                failed.insert(id.clone(), ());
                pinned.remove(&id);
                changed = true;
                continue;
            }
            // Highest version satisfying every collected range.
            let best = available
                .iter()
                .rev()
                .find(|v| collected.iter().all(|r| r.contains(**v)))
                .copied();
            let Some(best) = best else {
                conflicts.push(ConflictRecord {
                    protocol_id: id.clone(),
                    kind: ConflictKind::VersionConflict,
                    ranges: collected.iter().map(|r| r.to_string()).collect(),
                    available_versions: available.iter().map(|v| v.to_string()).collect(),
                    detail: Some("no published version satisfies every collected range".to_string()),
                });
                failed.insert(id.clone(), ());
                pinned.remove(&id);
                changed = true;
                continue;
            };
            let already = pinned.get(&id).map(|p| p.version);
            if already == Some(best) {
                continue;
            }
            let sealed = registry
                .get(&id, &best.to_string())
                .map_err(|e| match e {
                    StoreError::NotFound { .. } => NegotiateError::RegistryUnavailable(format!(
                        "index names {id}@{best} but the bundle is missing"
                    )),
                    other => NegotiateError::RegistryUnavailable(other.to_string()),
                })?;
            pinned.insert(
                id.clone(),
                Pin { version: best, bundle_digest: sealed.bundle_digest.clone() },
            );
            for dep in &sealed.bundle.dependencies {
                ranges.entry(dep.protocol_id.clone()).or_default().push(dep.version_range);
            }
            changed = true;
        }
        if !changed {
            break;
        }
    }

    Ok(ResolutionResult { pinned, conflicts })
}

/// Capability reconciliation over the pinned closure: a dependency's
/// outbound destinations must be reachable under the root manifest.
pub fn reconcile_capabilities(
    root: &ProtocolBundle,
    pinned_bundles: &[&SealedBundle],
) -> Vec<ConflictRecord> {
    let mut conflicts = Vec::new();
    if !root.operational.deny_other_outbound {
        return conflicts;
    }
    for dep in pinned_bundles {
        for destination in &dep.bundle.operational.network_allowlist {
            if !root.operational.network_allowlist.contains(destination) {
                conflicts.push(ConflictRecord {
                    protocol_id: dep.bundle.protocol_id.clone(),
                    kind: ConflictKind::CapabilityConflict,
                    ranges: vec![],
                    available_versions: vec![],
                    detail: Some(format!(
                        "dependency requires outbound {destination:?}, which the root manifest denies"
                    )),
                });
            }
        }
    }
    conflicts
}

/// Negotiate the root bundle: resolve, reconcile, and seal with pinned
/// dependency digests recorded in provenance. Any conflict fails the whole
/// negotiation; nothing is written.
pub fn negotiate(
    root: &ProtocolBundle,
    registry: &RegistryHandle,
    clock: &dyn Clock,
) -> Result<SealedBundle, NegotiateError> {
    let resolution = resolve_dependencies(root, registry)?;
    let mut conflicts = resolution.conflicts.clone();

    let mut pinned_bundles = Vec::new();
    for (id, pin) in &resolution.pinned {
        match registry.get(id, &pin.version.to_string()) {
            Ok(sealed) => pinned_bundles.push(sealed),
            Err(e) => return Err(NegotiateError::RegistryUnavailable(e.to_string())),
        }
    }
    let refs: Vec<&SealedBundle> = pinned_bundles.iter().collect();
    conflicts.extend(reconcile_capabilities(root, &refs));

    if !conflicts.is_empty() {
        return Err(NegotiateError::NegotiationFailed { conflicts });
    }

    let pins: BTreeMap<String, (SemVer, ContentDigest)> = resolution
        .pinned
        .iter()
        .map(|(id, pin)| (id.clone(), (pin.version, pin.bundle_digest.clone())))
        .collect();
    Ok(seal_bundle(&root.with_pinned_dependencies(&pins), clock))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::parse_bundle;
    use crate::corpus;
    use crate::time::{FixedClock, UtcTime};
    use std::path::Path;

    fn clock() -> FixedClock {
        FixedClock(UtcTime::parse("2026-05-11T00:00:00Z").unwrap())
    }

    /// Write a fraud-score-derived bundle with a new id/version and
    /// optional dependency lines, returning the parsed bundle.
    fn variant(
        dir: &Path,
        id: &str,
        version: &str,
        deps: &[(&str, &str)],
        allowlist: Option<&str>,
    ) -> ProtocolBundle {
        corpus::write_fraud_score_bundle(dir).unwrap();
        let manifest = dir.join("protocol.yaml");
        let mut text = std::fs::read_to_string(&manifest).unwrap();
        text = text.replace("protocol_id: fraud-score", &format!("protocol_id: {id}"));
        text = text.replace("version: 1.0.0", &format!("version: {version}"));
        if !deps.is_empty() {
            text.push_str("dependencies:\n");
            for (dep_id, range) in deps {
                text.push_str(&format!(
                    "  - {{protocol_id: {dep_id}, version_range: '{range}'}}\n"
                ));
            }
        }
        std::fs::write(&manifest, text).unwrap();
        if let Some(extra) = allowlist {
            let caps = dir.join("operational/capabilities.yaml");
            let text = std::fs::read_to_string(&caps).unwrap();
            std::fs::write(
                &caps,
                text.replace(
                    "outbound_allowlist: ['feature-store.internal:443']",
                    &format!("outbound_allowlist: ['feature-store.internal:443', '{extra}']"),
                ),
            )
            .unwrap();
        }
        parse_bundle(dir).unwrap()
    }

    fn publish(registry: &RegistryHandle, work: &Path, id: &str, version: &str, deps: &[(&str, &str)]) {
        let dir = work.join(format!("{id}-{version}"));
        std::fs::create_dir_all(&dir).unwrap();
        let bundle = variant(&dir, id, version, deps, None);
        registry.publish(&seal_bundle(&bundle, &clock()), "tester").unwrap();
    }

    #[test]
    fn no_dependencies_resolves_empty() {
        let work = tempfile::tempdir().unwrap();
        let registry = RegistryHandle::open(work.path().join("registry")).unwrap();
        let root = variant(&work.path().join("root"), "fraud-score", "1.0.0", &[], None);
        let result = resolve_dependencies(&root, &registry).unwrap();
        assert!(result.pinned.is_empty());
        assert!(result.conflicts.is_empty());
    }

    #[test]
    fn pins_the_highest_version_in_the_intersection() {
        let work = tempfile::tempdir().unwrap();
        let registry = RegistryHandle::open(work.path().join("registry")).unwrap();
        for v in ["1.4.0", "1.6.0", "1.9.0"] {
            publish(&registry, work.path(), "risk-common", v, &[]);
        }
        let root = variant(
            &work.path().join("root"),
            "fraud-score",
            "1.0.0",
            &[("risk-common", ">=1.0.0 <2.0.0"), ("risk-common", ">=1.5.0 <1.8.0")],
            None,
        );
        let result = resolve_dependencies(&root, &registry).unwrap();
        assert!(result.ok(), "{:?}", result.conflicts);
        assert_eq!(result.pinned["risk-common"].version.to_string(), "1.6.0");

        // Oracle: brute force over all published versions against both
        // ranges picks the same maximum.
        let ranges: Vec<VersionRange> =
            vec![">=1.0.0 <2.0.0".parse().unwrap(), ">=1.5.0 <1.8.0".parse().unwrap()];
        let best = registry
            .versions_of("risk-common")
            .unwrap()
            .into_iter()
            .filter(|v| ranges.iter().all(|r| r.contains(*v)))
            .max()
            .unwrap();
        assert_eq!(best, result.pinned["risk-common"].version);
    }

    #[test]
    fn empty_intersection_is_a_version_conflict_with_both_ranges() {
        let work = tempfile::tempdir().unwrap();
        let registry = RegistryHandle::open(work.path().join("registry")).unwrap();
        publish(&registry, work.path(), "risk-common", "1.1.0", &[]);
        publish(&registry, work.path(), "risk-common", "2.5.0", &[]);
        let root = variant(
            &work.path().join("root"),
            "fraud-score",
            "1.0.0",
            &[("risk-common", ">=1.0.0 <1.2.0"), ("risk-common", ">=2.0.0 <3.0.0")],
            None,
        );
        let result = resolve_dependencies(&root, &registry).unwrap();
        assert_eq!(result.conflicts.len(), 1);
        let conflict = &result.conflicts[0];
        assert_eq!(conflict.kind, ConflictKind::VersionConflict);
        assert_eq!(conflict.ranges.len(), 2);
        assert!(!result.pinned.contains_key("risk-common"), "pins and conflicts are disjoint");
    }

    #[test]
    fn missing_protocol_is_unresolvable() {
        let work = tempfile::tempdir().unwrap();
        let registry = RegistryHandle::open(work.path().join("registry")).unwrap();
        let root = variant(
            &work.path().join("root"),
            "fraud-score",
            "1.0.0",
            &[("ghost-protocol", ">=1.0.0 <2.0.0")],
            None,
        );
        let result = resolve_dependencies(&root, &registry).unwrap();
        assert_eq!(result.conflicts[0].kind, ConflictKind::Unresolvable);
    }

    #[test]
    fn transitive_ranges_join_the_closure() {
        let work = tempfile::tempdir().unwrap();
        let registry = RegistryHandle::open(work.path().join("registry")).unwrap();
        publish(&registry, work.path(), "protocol-runtime", "0.3.0", &[]);
        publish(&registry, work.path(), "protocol-runtime", "0.9.0", &[]);
        // risk-common depends on protocol-runtime < 0.5.
        publish(
            &registry,
            work.path(),
            "risk-common",
            "1.6.0",
            &[("protocol-runtime", ">=0.1.0 <0.5.0")],
        );
        let root = variant(
            &work.path().join("root"),
            "fraud-score",
            "1.0.0",
            &[("risk-common", ">=1.0.0 <2.0.0")],
            None,
        );
        let result = resolve_dependencies(&root, &registry).unwrap();
        assert!(result.ok(), "{:?}", result.conflicts);
        assert_eq!(result.pinned["risk-common"].version.to_string(), "1.6.0");
        assert_eq!(result.pinned["protocol-runtime"].version.to_string(), "0.3.0");
    }

    #[test]
    fn capability_reconciliation_flags_denied_destinations() {
        let work = tempfile::tempdir().unwrap();
        let registry = RegistryHandle::open(work.path().join("registry")).unwrap();

        // Dependency wanting an external destination the root denies.
        let dep_dir = work.path().join("dep");
        std::fs::create_dir_all(&dep_dir).unwrap();
        let dep = variant(&dep_dir, "payments-gateway", "1.0.0", &[], Some("payments.external:443"));
        let dep_sealed = seal_bundle(&dep, &clock());
        registry.publish(&dep_sealed, "tester").unwrap();

        let root = variant(&work.path().join("root"), "fraud-score", "1.0.0", &[], None);
        let conflicts = reconcile_capabilities(&root, &[&dep_sealed]);
        assert_eq!(conflicts.len(), 1);
        assert_eq!(conflicts[0].kind, ConflictKind::CapabilityConflict);
        assert!(conflicts[0].detail.as_ref().unwrap().contains("payments.external:443"));

        // Subset allowlists reconcile cleanly.
        let quiet_dir = work.path().join("quiet");
        std::fs::create_dir_all(&quiet_dir).unwrap();
        let quiet = seal_bundle(&variant(&quiet_dir, "quiet-dep", "1.0.0", &[], None), &clock());
        assert!(reconcile_capabilities(&root, &[&quiet]).is_empty());

        // A permissive root never reports capability conflicts.
        let mut permissive = root.clone();
        permissive.operational.deny_other_outbound = false;
        assert!(reconcile_capabilities(&permissive, &[&dep_sealed]).is_empty());
    }

    #[test]
    fn negotiate_seals_with_pins_or_fails_atomically() {
        let work = tempfile::tempdir().unwrap();
        let registry = RegistryHandle::open(work.path().join("registry")).unwrap();
        publish(&registry, work.path(), "risk-common", "1.6.0", &[]);
        publish(&registry, work.path(), "protocol-runtime", "0.3.0", &[]);

        // Dependency-free: negotiation equals plain sealing.
        let plain = variant(&work.path().join("plain"), "fraud-score", "1.0.0", &[], None);
        let negotiated = negotiate(&plain, &registry, &clock()).unwrap();
        assert_eq!(negotiated.bundle_digest, seal_bundle(&plain, &clock()).bundle_digest);

        // Two resolvable dependencies: pins recorded in provenance.
        let root = variant(
            &work.path().join("root"),
            "fraud-score",
            "1.0.0",
            &[("risk-common", ">=1.0.0 <2.0.0"), ("protocol-runtime", ">=0.1.0 <1.0.0")],
            None,
        );
        let negotiated = negotiate(&root, &registry, &clock()).unwrap();
        let pins = negotiated.bundle.provenance.get("pinned_dependencies").unwrap();
        assert!(pins.get("risk-common").is_some());
        assert!(pins.get("protocol-runtime").is_some());
        let pinned_digest = pins["risk-common"]["bundle_digest"].as_str().unwrap();
        let registry_digest = registry.get("risk-common", "1.6.0").unwrap().bundle_digest;
        assert_eq!(pinned_digest, registry_digest.to_string());

        // A conflict produces NegotiationFailed and writes nothing.
        let registry_files_before = count_files(registry.root());
        let bad = variant(
            &work.path().join("bad"),
            "fraud-score",
            "1.0.0",
            &[("ghost", ">=1.0.0 <2.0.0")],
            None,
        );
        let err = negotiate(&bad, &registry, &clock()).unwrap_err();
        assert!(matches!(err, NegotiateError::NegotiationFailed { .. }));
        assert_eq!(count_files(registry.root()), registry_files_before, "failure left artifacts");
    }

    fn count_files(root: &Path) -> usize {
        let mut count = 0;
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(dir).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    count += 1;
                }
            }
        }
        count
    }

    #[test]
    fn resolution_is_deterministic() {
        let work = tempfile::tempdir().unwrap();
        let registry = RegistryHandle::open(work.path().join("registry")).unwrap();
        for v in ["1.0.0", "1.5.0", "1.9.0"] {
            publish(&registry, work.path(), "risk-common", v, &[]);
        }
        let root = variant(
            &work.path().join("root"),
            "fraud-score",
            "1.0.0",
            &[("risk-common", ">=1.0.0 <2.0.0")],
            None,
        );
        let a = resolve_dependencies(&root, &registry).unwrap();
        let b = resolve_dependencies(&root, &registry).unwrap();
        assert_eq!(a, b);
    }
}
