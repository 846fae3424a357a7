//! Protocol bundles: parsing, validation, sealing, and emission.
//!
//! A bundle directory holds the governing artifact:
//!
//! ```text
//! <name>.protocol/
//!   protocol.yaml                      # manifest
//!   structural/request-response.schema.yaml
//!   behavioral/scoring.properties.yaml
//!   operational/capabilities.yaml
//!   validators/validator-set.yaml
//!   evidence/                          # outputs, never part of the digest
//! ```
//!
//! All files are in a restricted YAML-compatible subset (maps, lists,
//! scalars), UTF-8, LF line endings. Sealing computes a SHA-256 digest over
//! the canonical form of the manifest plus every manifest-referenced
//! invariant file, so the digest is stable under key reordering and
//! reformatting of the sources.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::canon::{doc_from_yaml_str, ContentDigest, Doc};
use crate::schema::StructuralSchema;
use crate::time::{Clock, UtcTime};
use crate::version::{SemVer, VersionRange};

pub const MANIFEST_FILE: &str = "protocol.yaml";

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("no {MANIFEST_FILE} manifest under {root}")]
    MissingManifest { root: PathBuf },
    /// The manifest names (or requires) an invariant artifact that does not
    /// exist.
    #[error("dangling reference: {reference}")]
    DanglingReference { reference: String },
    /// A file parses but violates the bundle grammar or a type invariant.
    #[error("grammar error in {file} at {path}: {message}")]
    Grammar {
        file: String,
        path: String,
        message: String,
    },
    #[error("failed to read {file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
}

impl BundleError {
    fn grammar(file: &str, path: &str, message: impl fmt::Display) -> Self {
        BundleError::Grammar {
            file: file.to_string(),
            path: path.to_string(),
            message: message.to_string(),
        }
    }
}

// ---------------------------------------------------------------------------
// Behavioral properties
// ---------------------------------------------------------------------------

/// The six behavioral property kinds the validator understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropertyKind {
    Determinism,
    Range,
    Monotone,
    FailsClosed,
    IdempotentOutput,
    IdempotentStateful,
}

impl fmt::Display for PropertyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PropertyKind::Determinism => "determinism",
            PropertyKind::Range => "range",
            PropertyKind::Monotone => "monotone",
            PropertyKind::FailsClosed => "fails_closed",
            PropertyKind::IdempotentOutput => "idempotent_output",
            PropertyKind::IdempotentStateful => "idempotent_stateful",
        };
        f.write_str(s)
    }
}

/// How many requests one generated case quantifies over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantifier {
    One,
    Pair,
}

/// Ordering direction for monotone properties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    NonDecreasing,
    NonIncreasing,
}

/// Kind-specific parameters of a behavioral property.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RequireClause {
    Determinism,
    Range {
        field: String,
        minimum: Option<f64>,
        maximum: Option<f64>,
    },
    Monotone {
        varied_field: String,
        output_field: String,
        direction: Direction,
    },
    FailsClosed {
        error_kind: String,
    },
    IdempotentOutput,
    IdempotentStateful,
}

impl RequireClause {
    pub fn kind(&self) -> PropertyKind {
        match self {
            RequireClause::Determinism => PropertyKind::Determinism,
            RequireClause::Range { .. } => PropertyKind::Range,
            RequireClause::Monotone { .. } => PropertyKind::Monotone,
            RequireClause::FailsClosed { .. } => PropertyKind::FailsClosed,
            RequireClause::IdempotentOutput => PropertyKind::IdempotentOutput,
            RequireClause::IdempotentStateful => PropertyKind::IdempotentStateful,
        }
    }
}

/// One behavioral invariant of the protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehavioralProperty {
    pub name: String,
    pub quantifier: Quantifier,
    pub require: RequireClause,
    pub case_count: u32,
}

impl BehavioralProperty {
    pub fn kind(&self) -> PropertyKind {
        self.require.kind()
    }
}

// ---------------------------------------------------------------------------
// Capability manifest
// ---------------------------------------------------------------------------

/// A named per-request call budget. The clause id (the map key in
/// `capabilities.yaml`) is what ledger blocks and clause outcomes report,
/// e.g. `max_feature_store_calls_per_request`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallBudget {
    pub clause_id: String,
    pub target: String,
    pub max_per_request: u64,
}

/// The operational invariant: what a compliant implementation may do.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapabilityManifest {
    pub network_allowlist: Vec<String>,
    pub deny_other_outbound: bool,
    pub fs_read: Vec<String>,
    pub fs_write: Vec<String>,
    pub dependency_allowlist: Vec<String>,
    pub max_latency_ms_p95: u64,
    pub max_memory_mb: u64,
    pub call_budgets: Vec<CallBudget>,
    pub secrets_allowlist: Vec<String>,
    pub background_work_allowed: bool,
}

impl CapabilityManifest {
    pub fn budget_for(&self, target: &str) -> Option<&CallBudget> {
        self.call_budgets.iter().find(|b| b.target == target)
    }

    fn check(&self, file: &str) -> Result<(), BundleError> {
        for (name, list) in [
            ("network.outbound_allowlist", &self.network_allowlist),
            ("filesystem.read", &self.fs_read),
            ("filesystem.write", &self.fs_write),
            ("dependencies.allow", &self.dependency_allowlist),
            ("secrets.allow", &self.secrets_allowlist),
        ] {
            let mut seen = BTreeSet::new();
            for item in list {
                if !seen.insert(item) {
                    return Err(BundleError::grammar(
                        file,
                        &format!("/capabilities/{name}"),
                        format!("duplicate allowlist entry {item:?}"),
                    ));
                }
            }
        }
        let mut clause_ids = BTreeSet::new();
        for budget in &self.call_budgets {
            if !clause_ids.insert(&budget.clause_id) {
                return Err(BundleError::grammar(
                    file,
                    "/capabilities/resources/call_budgets",
                    format!("duplicate budget clause {:?}", budget.clause_id),
                ));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Dependencies and validator requirements
// ---------------------------------------------------------------------------

/// A declared protocol dependency with its admissible version range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyDecl {
    pub protocol_id: String,
    pub version_range: VersionRange,
}

/// Constraint on a required validator's version: exact or a range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VersionConstraint {
    Range(VersionRange),
    Exact(SemVer),
}

impl VersionConstraint {
    pub fn admits(&self, v: SemVer) -> bool {
        match self {
            VersionConstraint::Exact(e) => *e == v,
            VersionConstraint::Range(r) => r.contains(v),
        }
    }
}

impl fmt::Display for VersionConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VersionConstraint::Exact(v) => write!(f, "{v}"),
            VersionConstraint::Range(r) => write!(f, "{r}"),
        }
    }
}

/// One entry of `validators/validator-set.yaml`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidatorRequirement {
    pub name: String,
    pub version: VersionConstraint,
}

// ---------------------------------------------------------------------------
// The bundle
// ---------------------------------------------------------------------------

/// Source documents as parsed from the bundle directory. These are the
/// digest inputs; the typed fields are projections of them.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleSource {
    pub manifest: Doc,
    pub structural: Doc,
    pub behavioral: Doc,
    pub operational: Doc,
    pub validators: Doc,
    /// Manifest-relative paths of the invariant files, for emission.
    pub paths: BundlePaths,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundlePaths {
    pub structural: String,
    pub behavioral: String,
    pub operational: String,
    pub validators: String,
}

impl Default for BundlePaths {
    fn default() -> Self {
        Self {
            structural: "structural/request-response.schema.yaml".to_string(),
            behavioral: "behavioral/scoring.properties.yaml".to_string(),
            operational: "operational/capabilities.yaml".to_string(),
            validators: "validators/validator-set.yaml".to_string(),
        }
    }
}

/// A parsed, validated protocol bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolBundle {
    pub protocol_id: String,
    pub version: SemVer,
    pub component: String,
    pub structural: StructuralSchema,
    pub behavioral: Vec<BehavioralProperty>,
    pub operational: CapabilityManifest,
    pub dependencies: Vec<DependencyDecl>,
    pub validator_requirements: Vec<ValidatorRequirement>,
    pub provenance: BTreeMap<String, Doc>,
    pub source: BundleSource,
}

impl ProtocolBundle {
    /// The composite document the content digest covers: manifest plus all
    /// manifest-referenced invariant files, in fixed role order.
    pub fn content_doc(&self) -> Doc {
        json!({
            "manifest": self.source.manifest,
            "invariants": {
                "structural": self.source.structural,
                "behavioral": self.source.behavioral,
                "operational": self.source.operational,
            },
            "validators": self.source.validators,
        })
    }

    pub fn content_digest(&self) -> ContentDigest {
        ContentDigest::of_doc(&self.content_doc())
    }

    /// A copy with pinned dependency versions recorded in provenance. The
    /// manifest source document is updated too, so the sealed digest
    /// covers the pins.
    pub fn with_pinned_dependencies(
        &self,
        pins: &BTreeMap<String, (SemVer, ContentDigest)>,
    ) -> ProtocolBundle {
        let mut out = self.clone();
        if pins.is_empty() {
            return out;
        }
        let mut pin_doc = serde_json::Map::new();
        for (id, (version, digest)) in pins {
            pin_doc.insert(
                id.clone(),
                json!({"version": version.to_string(), "bundle_digest": digest.to_string()}),
            );
        }
        out.provenance
            .insert("pinned_dependencies".to_string(), Doc::Object(pin_doc.clone()));
        if let Doc::Object(manifest) = &mut out.source.manifest {
            let provenance = manifest
                .entry("provenance".to_string())
                .or_insert_with(|| Doc::Object(serde_json::Map::new()));
            if let Doc::Object(p) = provenance {
                p.insert("pinned_dependencies".to_string(), Doc::Object(pin_doc));
            }
        }
        out
    }

    /// Largest declared behavioral case count, the default run size.
    pub fn default_case_count(&self) -> u32 {
        self.behavioral.iter().map(|p| p.case_count).max().unwrap_or(100)
    }
}

/// A sealed bundle: the parsed content plus its content digest.
#[derive(Debug, Clone, PartialEq)]
pub struct SealedBundle {
    pub bundle: ProtocolBundle,
    pub bundle_digest: ContentDigest,
    pub sealed_at: UtcTime,
}

impl SealedBundle {
    /// Summary document for `sealed.json` style outputs.
    pub fn descriptor(&self) -> Doc {
        json!({
            "protocol_id": self.bundle.protocol_id,
            "version": self.bundle.version.to_string(),
            "component": self.bundle.component,
            "bundle_digest": self.bundle_digest.to_string(),
            "sealed_at": self.sealed_at.to_string(),
        })
    }
}

/// Seal a bundle: compute the content digest and stamp the time.
///
/// Sealing is idempotent over content: the digest depends only on the
/// parsed source documents.
pub fn seal_bundle(bundle: &ProtocolBundle, clock: &dyn Clock) -> SealedBundle {
    SealedBundle {
        bundle: bundle.clone(),
        bundle_digest: bundle.content_digest(),
        sealed_at: clock.now(),
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

fn protocol_id_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new("^[a-z0-9][a-z0-9-]*$").expect("static pattern"))
}

fn load_doc(root: &Path, rel: &str) -> Result<Doc, BundleError> {
    let path = root.join(rel);
    if !path.is_file() {
        return Err(BundleError::DanglingReference {
            reference: rel.to_string(),
        });
    }
    let text = std::fs::read_to_string(&path).map_err(|source| BundleError::Io {
        file: rel.to_string(),
        source,
    })?;
    doc_from_yaml_str(&text).map_err(|e| BundleError::grammar(rel, "/", e))
}

fn from_doc<T: serde::de::DeserializeOwned>(doc: &Doc, file: &str) -> Result<T, BundleError> {
    let deserializer = doc.clone();
    serde_path_to_error::deserialize(deserializer).map_err(|e| {
        let path = format!("/{}", e.path().to_string().replace('.', "/"));
        BundleError::grammar(file, &path, e.into_inner())
    })
}

fn get_str<'d>(doc: &'d Doc, key: &str, file: &str) -> Result<&'d str, BundleError> {
    doc.get(key)
        .and_then(Doc::as_str)
        .ok_or_else(|| BundleError::grammar(file, &format!("/{key}"), "expected string"))
}

/// Parse and validate a bundle directory.
pub fn parse_bundle(root: &Path) -> Result<ProtocolBundle, BundleError> {
    let manifest_path = root.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(BundleError::MissingManifest {
            root: root.to_path_buf(),
        });
    }
    let manifest = load_doc(root, MANIFEST_FILE)?;

    let protocol_id = get_str(&manifest, "protocol_id", MANIFEST_FILE)?.to_string();
    if !protocol_id_pattern().is_match(&protocol_id) {
        return Err(BundleError::grammar(
            MANIFEST_FILE,
            "/protocol_id",
            format!("{protocol_id:?} does not match [a-z0-9][a-z0-9-]*"),
        ));
    }
    let version: SemVer = get_str(&manifest, "version", MANIFEST_FILE)?
        .parse()
        .map_err(|e| BundleError::grammar(MANIFEST_FILE, "/version", e))?;
    let component = get_str(&manifest, "component", MANIFEST_FILE)?.to_string();

    let invariants = manifest.get("invariants").ok_or(BundleError::DanglingReference {
        reference: "invariants".to_string(),
    })?;
    let invariant_path = |key: &str| -> Result<String, BundleError> {
        invariants
            .get(key)
            .and_then(Doc::as_str)
            .map(str::to_string)
            .ok_or_else(|| BundleError::DanglingReference {
                reference: format!("invariants.{key}"),
            })
    };
    let paths = BundlePaths {
        structural: invariant_path("structural")?,
        behavioral: invariant_path("behavioral")?,
        operational: invariant_path("operational")?,
        validators: manifest
            .get("validators")
            .and_then(|v| v.get("required_set"))
            .and_then(Doc::as_str)
            .map(str::to_string)
            .ok_or_else(|| BundleError::DanglingReference {
                reference: "validators.required_set".to_string(),
            })?,
    };

    let structural_doc = load_doc(root, &paths.structural)?;
    let behavioral_doc = load_doc(root, &paths.behavioral)?;
    let operational_doc = load_doc(root, &paths.operational)?;
    let validators_doc = load_doc(root, &paths.validators)?;

    let structural: StructuralSchema = from_doc(&structural_doc, &paths.structural)?;
    structural
        .check_declaration()
        .map_err(|d| BundleError::grammar(&paths.structural, &d.path, d.message))?;

    let behavioral = parse_properties(&behavioral_doc, &paths.behavioral, &structural)?;
    let operational = parse_capabilities(&operational_doc, &paths.operational)?;
    operational.check(&paths.operational)?;
    let validator_requirements = parse_validator_set(&validators_doc, &paths.validators)?;

    let dependencies: Vec<DependencyDecl> = match manifest.get("dependencies") {
        None | Some(Doc::Null) => Vec::new(),
        Some(doc) => from_doc(doc, MANIFEST_FILE)?,
    };
    let provenance: BTreeMap<String, Doc> = match manifest.get("provenance") {
        None | Some(Doc::Null) => BTreeMap::new(),
        Some(Doc::Object(map)) => map.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        Some(_) => {
            return Err(BundleError::grammar(
                MANIFEST_FILE,
                "/provenance",
                "expected map",
            ))
        }
    };

    Ok(ProtocolBundle {
        protocol_id,
        version,
        component,
        structural,
        behavioral,
        operational,
        dependencies,
        validator_requirements,
        provenance,
        source: BundleSource {
            manifest,
            structural: structural_doc,
            behavioral: behavioral_doc,
            operational: operational_doc,
            validators: validators_doc,
            paths,
        },
    })
}

fn parse_properties(
    doc: &Doc,
    file: &str,
    structural: &StructuralSchema,
) -> Result<Vec<BehavioralProperty>, BundleError> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct RawFile {
        properties: Vec<RawProperty>,
    }
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct RawProperty {
        name: String,
        kind: PropertyKind,
        #[serde(default)]
        for_all: Option<Doc>,
        #[serde(default)]
        when: Option<RawWhen>,
        #[serde(default)]
        require: Option<RawRequire>,
        case_count: u32,
    }
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct RawWhen {
        #[serde(default)]
        equal_except: Option<String>,
        // Accepted and recorded in the source doc; the mutation strategy
        // for fails_closed is fixed (drop one required field).
        #[serde(default, rename = "invalid_input")]
        _invalid_input: Option<String>,
    }
    #[derive(Deserialize, Default)]
    #[serde(deny_unknown_fields)]
    struct RawRequire {
        #[serde(default)]
        field: Option<String>,
        #[serde(default)]
        minimum: Option<f64>,
        #[serde(default)]
        maximum: Option<f64>,
        #[serde(default)]
        output_field: Option<String>,
        #[serde(default)]
        direction: Option<Direction>,
        #[serde(default)]
        error_kind: Option<String>,
    }

    let raw: RawFile = from_doc(doc, file)?;
    let mut out = Vec::with_capacity(raw.properties.len());
    let mut names = BTreeSet::new();
    for (i, p) in raw.properties.into_iter().enumerate() {
        let at = format!("/properties/{i}");
        let err = |msg: String| BundleError::grammar(file, &at, msg);
        if !names.insert(p.name.clone()) {
            return Err(err(format!("duplicate property name {:?}", p.name)));
        }
        if p.case_count == 0 {
            return Err(err("case_count must be at least 1".to_string()));
        }
        let quantifier = match &p.for_all {
            Some(Doc::Array(items)) if items.len() == 2 => Quantifier::Pair,
            Some(Doc::String(_)) | None => Quantifier::One,
            Some(other) => {
                return Err(err(format!(
                    "for_all must be one request name or a pair, got {other}"
                )))
            }
        };
        let req = p.require.unwrap_or_default();
        let require = match p.kind {
            PropertyKind::Determinism => RequireClause::Determinism,
            PropertyKind::IdempotentOutput => RequireClause::IdempotentOutput,
            PropertyKind::IdempotentStateful => RequireClause::IdempotentStateful,
            PropertyKind::Range => RequireClause::Range {
                field: req
                    .field
                    .ok_or_else(|| err("range property requires a target field".to_string()))?,
                minimum: req.minimum,
                maximum: req.maximum,
            },
            PropertyKind::Monotone => {
                let varied = p
                    .when
                    .as_ref()
                    .and_then(|w| w.equal_except.clone())
                    .ok_or_else(|| {
                        err("monotone property requires when.equal_except naming the varied field"
                            .to_string())
                    })?;
                RequireClause::Monotone {
                    varied_field: varied,
                    output_field: req.output_field.ok_or_else(|| {
                        err("monotone property requires an ordered output field".to_string())
                    })?,
                    direction: req.direction.unwrap_or(Direction::NonDecreasing),
                }
            }
            PropertyKind::FailsClosed => {
                let kind = req
                    .error_kind
                    .ok_or_else(|| err("fails_closed property requires an error kind".to_string()))?;
                if !structural.declares_error(&kind) {
                    return Err(err(format!(
                        "error kind {kind:?} is not declared in the structural error list"
                    )));
                }
                RequireClause::FailsClosed { error_kind: kind }
            }
        };
        if p.kind == PropertyKind::Monotone && quantifier != Quantifier::Pair {
            return Err(err("monotone properties quantify over a request pair".to_string()));
        }
        out.push(BehavioralProperty {
            name: p.name,
            quantifier,
            require,
            case_count: p.case_count,
        });
    }
    Ok(out)
}

fn parse_capabilities(doc: &Doc, file: &str) -> Result<CapabilityManifest, BundleError> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct RawFile {
        capabilities: RawCaps,
    }
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct RawCaps {
        network: RawNetwork,
        filesystem: RawFs,
        dependencies: RawAllow,
        resources: RawResources,
        secrets: RawAllow,
        background_work: RawBackground,
    }
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct RawNetwork {
        #[serde(default)]
        outbound_allowlist: Vec<String>,
        deny_other_outbound: bool,
    }
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct RawFs {
        #[serde(default)]
        read: Vec<String>,
        #[serde(default)]
        write: Vec<String>,
    }
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct RawAllow {
        #[serde(default)]
        allow: Vec<String>,
    }
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct RawResources {
        max_latency_ms_p95: u64,
        max_memory_mb: u64,
        #[serde(default)]
        call_budgets: BTreeMap<String, RawBudget>,
    }
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct RawBudget {
        target: String,
        max_per_request: u64,
    }
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct RawBackground {
        allowed: bool,
    }

    let raw: RawFile = from_doc(doc, file)?;
    let caps = raw.capabilities;
    Ok(CapabilityManifest {
        network_allowlist: caps.network.outbound_allowlist,
        deny_other_outbound: caps.network.deny_other_outbound,
        fs_read: caps.filesystem.read,
        fs_write: caps.filesystem.write,
        dependency_allowlist: caps.dependencies.allow,
        max_latency_ms_p95: caps.resources.max_latency_ms_p95,
        max_memory_mb: caps.resources.max_memory_mb,
        call_budgets: caps
            .resources
            .call_budgets
            .into_iter()
            .map(|(clause_id, b)| CallBudget {
                clause_id,
                target: b.target,
                max_per_request: b.max_per_request,
            })
            .collect(),
        secrets_allowlist: caps.secrets.allow,
        background_work_allowed: caps.background_work.allowed,
    })
}

fn parse_validator_set(doc: &Doc, file: &str) -> Result<Vec<ValidatorRequirement>, BundleError> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct RawFile {
        required: Vec<RawEntry>,
    }
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct RawEntry {
        name: String,
        version: String,
    }
    let raw: RawFile = from_doc(doc, file)?;
    raw.required
        .into_iter()
        .map(|e| {
            let version = if e.version.starts_with(">=") {
                VersionConstraint::Range(
                    e.version
                        .parse()
                        .map_err(|err| BundleError::grammar(file, "/required", err))?,
                )
            } else {
                VersionConstraint::Exact(
                    e.version
                        .parse()
                        .map_err(|err| BundleError::grammar(file, "/required", err))?,
                )
            };
            Ok(ValidatorRequirement { name: e.name, version })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

/// Write a bundle's source documents back to a directory in the standard
/// layout. Re-parsing the emitted directory yields the same content digest.
pub fn write_bundle_dir(root: &Path, source: &BundleSource) -> std::io::Result<()> {
    let write_yaml = |rel: &str, doc: &Doc| -> std::io::Result<()> {
        let path = root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let text = serde_yaml::to_string(doc)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        std::fs::write(path, text)
    };
    write_yaml(MANIFEST_FILE, &source.manifest)?;
    write_yaml(&source.paths.structural, &source.structural)?;
    write_yaml(&source.paths.behavioral, &source.behavioral)?;
    write_yaml(&source.paths.operational, &source.operational)?;
    write_yaml(&source.paths.validators, &source.validators)?;
    std::fs::create_dir_all(root.join("evidence"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;
    use crate::time::FixedClock;

    fn fixture_root() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        corpus::write_fraud_score_bundle(dir.path()).unwrap();
        dir
    }

    fn fixed_clock() -> FixedClock {
        FixedClock(UtcTime::parse("2026-05-11T00:00:00Z").unwrap())
    }

    #[test]
    fn parses_fraud_score_fixture() {
        let dir = fixture_root();
        let bundle = parse_bundle(dir.path()).unwrap();
        assert_eq!(bundle.protocol_id, "fraud-score");
        assert_eq!(bundle.version, SemVer::new(1, 0, 0));
        assert_eq!(bundle.component, "risk.scoring.FraudScore");
        assert_eq!(bundle.behavioral.len(), 4);
        assert_eq!(bundle.validator_requirements.len(), 3);
        assert_eq!(bundle.operational.max_latency_ms_p95, 75);
        assert_eq!(bundle.operational.call_budgets.len(), 1);
        assert_eq!(
            bundle.operational.call_budgets[0].clause_id,
            "max_feature_store_calls_per_request"
        );
    }

    #[test]
    fn missing_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = parse_bundle(dir.path()).unwrap_err();
        assert!(matches!(err, BundleError::MissingManifest { .. }));
    }

    #[test]
    fn omitted_invariants_key_is_a_dangling_reference() {
        let dir = fixture_root();
        let manifest = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest).unwrap();
        let text = text.replace("structural:", "structural_gone:");
        std::fs::write(&manifest, text).unwrap();
        let err = parse_bundle(dir.path()).unwrap_err();
        match err {
            BundleError::DanglingReference { reference } => {
                assert_eq!(reference, "invariants.structural")
            }
            other => panic!("expected DanglingReference, got {other}"),
        }
    }

    #[test]
    fn missing_invariant_file_is_a_dangling_reference() {
        let dir = fixture_root();
        std::fs::remove_file(dir.path().join("behavioral/scoring.properties.yaml")).unwrap();
        let err = parse_bundle(dir.path()).unwrap_err();
        assert!(matches!(err, BundleError::DanglingReference { .. }));
    }

    #[test]
    fn inverted_bounds_are_a_grammar_error_at_the_node_path() {
        let dir = fixture_root();
        let schema = dir.path().join("structural/request-response.schema.yaml");
        let text = std::fs::read_to_string(&schema).unwrap();
        let text = text.replace("minimum: 0}", "minimum: 10, maximum: 5}");
        std::fs::write(&schema, text).unwrap();
        let err = parse_bundle(dir.path()).unwrap_err();
        match err {
            BundleError::Grammar { file, path, .. } => {
                assert!(file.contains("request-response"));
                assert_eq!(path, "/request/amount_cents");
            }
            other => panic!("expected Grammar error, got {other}"),
        }
    }

    #[test]
    fn bad_protocol_id_is_rejected() {
        let dir = fixture_root();
        let manifest = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest).unwrap();
        std::fs::write(&manifest, text.replace("fraud-score", "Fraud_Score")).unwrap();
        let err = parse_bundle(dir.path()).unwrap_err();
        assert!(matches!(err, BundleError::Grammar { .. }));
    }

    #[test]
    fn fails_closed_must_name_a_declared_error_kind() {
        let dir = fixture_root();
        let props = dir.path().join("behavioral/scoring.properties.yaml");
        let text = std::fs::read_to_string(&props).unwrap();
        std::fs::write(&props, text.replace("invalid_request", "not_declared")).unwrap();
        let err = parse_bundle(dir.path()).unwrap_err();
        assert!(matches!(err, BundleError::Grammar { .. }));
    }

    #[test]
    fn sealing_is_deterministic_over_content() {
        let dir = fixture_root();
        let bundle = parse_bundle(dir.path()).unwrap();
        let a = seal_bundle(&bundle, &fixed_clock());
        let b = seal_bundle(&bundle, &fixed_clock());
        assert_eq!(a.bundle_digest, b.bundle_digest);
        let rendered = a.bundle_digest.to_string();
        assert!(rendered.starts_with("sha256:"));
        assert_eq!(rendered.len(), 71);
    }

    #[test]
    fn digest_survives_key_reordering_and_reemission() {
        let dir = fixture_root();
        let bundle = parse_bundle(dir.path()).unwrap();
        let original = bundle.content_digest();

        // Reorder manifest keys textually.
        let manifest = dir.path().join(MANIFEST_FILE);
        let doc = doc_from_yaml_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
        let Doc::Object(map) = doc else { panic!() };
        let mut reversed: Vec<(String, Doc)> = map.into_iter().collect();
        reversed.reverse();
        let mut text = String::new();
        for (k, v) in &reversed {
            let piece = serde_yaml::to_string(&json!({ k: v })).unwrap();
            text.push_str(piece.trim_start_matches("---\n"));
        }
        std::fs::write(&manifest, text).unwrap();
        let reparsed = parse_bundle(dir.path()).unwrap();
        assert_eq!(reparsed.content_digest(), original);

        // Emit to a fresh directory and parse again.
        let out = tempfile::tempdir().unwrap();
        write_bundle_dir(out.path(), &reparsed.source).unwrap();
        let reemitted = parse_bundle(out.path()).unwrap();
        assert_eq!(reemitted.content_digest(), original);
    }

    #[test]
    fn flipping_one_property_file_byte_changes_the_digest() {
        let dir = fixture_root();
        let before = parse_bundle(dir.path()).unwrap().content_digest();
        let props = dir.path().join("behavioral/scoring.properties.yaml");
        let text = std::fs::read_to_string(&props).unwrap();
        std::fs::write(&props, text.replace("case_count: 5000", "case_count: 5001")).unwrap();
        let after = parse_bundle(dir.path()).unwrap().content_digest();
        assert_ne!(before, after);
    }

    #[test]
    fn pinned_dependencies_enter_the_digest() {
        let dir = fixture_root();
        let bundle = parse_bundle(dir.path()).unwrap();
        let mut pins = BTreeMap::new();
        pins.insert(
            "risk-common".to_string(),
            (SemVer::new(1, 2, 0), ContentDigest::of_bytes(b"x")),
        );
        let pinned = bundle.with_pinned_dependencies(&pins);
        assert_ne!(bundle.content_digest(), pinned.content_digest());
        assert!(pinned.provenance.contains_key("pinned_dependencies"));
    }
}
