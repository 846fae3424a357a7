//! Structural schemas: the typed handshake half of a protocol bundle.
//!
//! A [`SchemaNode`] describes one value; [`StructuralSchema`] pairs the
//! request and response root nodes with the declared error kinds. Checking
//! reports every violation with a JSON-Pointer-style path into the offending
//! document.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::canon::Doc;

// Schema nodes are plain data, so compiled patterns live in a process-wide
// cache rather than in the nodes.
fn compile_pattern(pattern: &str) -> Result<Arc<Regex>, regex::Error> {
    static CACHE: OnceLock<Mutex<HashMap<String, Arc<Regex>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(found) = cache.lock().expect("pattern cache").get(pattern) {
        return Ok(Arc::clone(found));
    }
    let compiled = Arc::new(Regex::new(pattern)?);
    cache
        .lock()
        .expect("pattern cache")
        .insert(pattern.to_string(), Arc::clone(&compiled));
    Ok(compiled)
}

/// Value kinds the handshake grammar supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaKind {
    Object,
    String,
    Integer,
    Number,
    Enum,
}

impl fmt::Display for SchemaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SchemaKind::Object => "object",
            SchemaKind::String => "string",
            SchemaKind::Integer => "integer",
            SchemaKind::Number => "number",
            SchemaKind::Enum => "enum",
        };
        f.write_str(s)
    }
}

/// One node of a structural schema.
///
/// Kind-specific fields must be present exactly when the kind demands them:
/// `required`/`properties` for objects, `enum_values` for enums, `pattern`
/// for strings, numeric bounds for integers and numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaNode {
    pub kind: SchemaKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub required: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub properties: BTreeMap<String, SchemaNode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minimum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maximum: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub enum_values: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
}

impl SchemaNode {
    pub fn object(required: &[&str], properties: Vec<(&str, SchemaNode)>) -> Self {
        Self {
            kind: SchemaKind::Object,
            required: required.iter().map(|s| s.to_string()).collect(),
            properties: properties
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            minimum: None,
            maximum: None,
            enum_values: Vec::new(),
            pattern: None,
        }
    }

    pub fn string() -> Self {
        Self::leaf(SchemaKind::String)
    }

    pub fn string_pattern(pattern: &str) -> Self {
        let mut node = Self::leaf(SchemaKind::String);
        node.pattern = Some(pattern.to_string());
        node
    }

    pub fn integer(minimum: Option<f64>, maximum: Option<f64>) -> Self {
        let mut node = Self::leaf(SchemaKind::Integer);
        node.minimum = minimum;
        node.maximum = maximum;
        node
    }

    pub fn number(minimum: Option<f64>, maximum: Option<f64>) -> Self {
        let mut node = Self::leaf(SchemaKind::Number);
        node.minimum = minimum;
        node.maximum = maximum;
        node
    }

    pub fn enumeration(values: &[&str]) -> Self {
        let mut node = Self::leaf(SchemaKind::Enum);
        node.enum_values = values.iter().map(|s| s.to_string()).collect();
        node
    }

    fn leaf(kind: SchemaKind) -> Self {
        Self {
            kind,
            required: Vec::new(),
            properties: BTreeMap::new(),
            minimum: None,
            maximum: None,
            enum_values: Vec::new(),
            pattern: None,
        }
    }

    /// Validate the node's own declaration. Returns the first defect with
    /// its path relative to `path`.
    pub fn check_declaration(&self, path: &str) -> Result<(), SchemaDefect> {
        match self.kind {
            SchemaKind::Object => {
                for field in &self.required {
                    if !self.properties.contains_key(field) {
                        return Err(SchemaDefect {
                            path: path.to_string(),
                            message: format!(
                                "required field {field:?} is missing from properties"
                            ),
                        });
                    }
                }
            }
            SchemaKind::Enum => {
                if self.enum_values.is_empty() {
                    return Err(SchemaDefect {
                        path: path.to_string(),
                        message: "enum node declares no enum_values".to_string(),
                    });
                }
            }
            SchemaKind::String => {
                if let Some(p) = &self.pattern {
                    if compile_pattern(p).is_err() {
                        return Err(SchemaDefect {
                            path: path.to_string(),
                            message: format!("invalid pattern {p:?}"),
                        });
                    }
                }
            }
            SchemaKind::Integer | SchemaKind::Number => {}
        }
        if self.kind != SchemaKind::Object && (!self.required.is_empty() || !self.properties.is_empty()) {
            return Err(SchemaDefect {
                path: path.to_string(),
                message: format!("{} node carries object-only fields", self.kind),
            });
        }
        if self.kind != SchemaKind::Enum && !self.enum_values.is_empty() {
            return Err(SchemaDefect {
                path: path.to_string(),
                message: format!("{} node carries enum_values", self.kind),
            });
        }
        if self.kind != SchemaKind::String && self.pattern.is_some() {
            return Err(SchemaDefect {
                path: path.to_string(),
                message: format!("{} node carries a pattern", self.kind),
            });
        }
        if !matches!(self.kind, SchemaKind::Integer | SchemaKind::Number)
            && (self.minimum.is_some() || self.maximum.is_some())
        {
            return Err(SchemaDefect {
                path: path.to_string(),
                message: format!("{} node carries numeric bounds", self.kind),
            });
        }
        if let (Some(lo), Some(hi)) = (self.minimum, self.maximum) {
            if lo > hi {
                return Err(SchemaDefect {
                    path: path.to_string(),
                    message: format!("minimum {lo} exceeds maximum {hi}"),
                });
            }
        }
        for (name, child) in &self.properties {
            child.check_declaration(&format!("{path}/{name}"))?;
        }
        Ok(())
    }

    /// Check a document against this node, appending one
    /// [`SchemaViolation`] per defect.
    pub fn check(&self, doc: &Doc, path: &str, out: &mut Vec<SchemaViolation>) {
        match self.kind {
            SchemaKind::Object => {
                let Doc::Object(map) = doc else {
                    out.push(SchemaViolation::new(path, "expected object"));
                    return;
                };
                for field in &self.required {
                    if !map.contains_key(field) {
                        out.push(SchemaViolation::new(
                            &format!("{path}/{field}"),
                            "required field is missing",
                        ));
                    }
                }
                // Open-world: undeclared fields lie outside the commitment
                // surface and are not violations. A refined schema may
                // declare and require fields its predecessor never named.
                for (name, value) in map {
                    if let Some(child) = self.properties.get(name) {
                        child.check(value, &format!("{path}/{name}"), out);
                    }
                }
            }
            SchemaKind::String => {
                let Doc::String(s) = doc else {
                    out.push(SchemaViolation::new(path, "expected string"));
                    return;
                };
                if let Some(p) = &self.pattern {
                    match compile_pattern(p) {
                        Ok(re) if re.is_match(s) => {}
                        Ok(_) => out.push(SchemaViolation::new(
                            path,
                            &format!("value {s:?} does not match pattern {p:?}"),
                        )),
                        Err(_) => out.push(SchemaViolation::new(path, "invalid pattern")),
                    }
                }
            }
            SchemaKind::Integer => {
                let value = match doc {
                    Doc::Number(n) if n.is_i64() || n.is_u64() => n.as_f64(),
                    _ => None,
                };
                match value {
                    Some(v) => self.check_bounds(v, path, out),
                    None => out.push(SchemaViolation::new(path, "expected integer")),
                }
            }
            SchemaKind::Number => {
                let Doc::Number(n) = doc else {
                    out.push(SchemaViolation::new(path, "expected number"));
                    return;
                };
                match n.as_f64() {
                    Some(v) => self.check_bounds(v, path, out),
                    None => out.push(SchemaViolation::new(path, "expected number")),
                }
            }
            SchemaKind::Enum => {
                let Doc::String(s) = doc else {
                    out.push(SchemaViolation::new(path, "expected enum string"));
                    return;
                };
                if !self.enum_values.iter().any(|v| v == s) {
                    out.push(SchemaViolation::new(
                        path,
                        &format!("value {s:?} is not one of {:?}", self.enum_values),
                    ));
                }
            }
        }
    }

    fn check_bounds(&self, v: f64, path: &str, out: &mut Vec<SchemaViolation>) {
        if let Some(lo) = self.minimum {
            if v < lo {
                out.push(SchemaViolation::new(
                    path,
                    &format!("value {v} is below minimum {lo}"),
                ));
            }
        }
        if let Some(hi) = self.maximum {
            if v > hi {
                out.push(SchemaViolation::new(
                    path,
                    &format!("value {v} is above maximum {hi}"),
                ));
            }
        }
    }

    pub fn is_valid(&self, doc: &Doc) -> bool {
        let mut v = Vec::new();
        self.check(doc, "", &mut v);
        v.is_empty()
    }
}

/// A defect in a schema declaration itself.
#[derive(Debug, Clone, thiserror::Error)]
#[error("schema defect at {path}: {message}")]
pub struct SchemaDefect {
    pub path: String,
    pub message: String,
}

/// One violation found while checking a document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaViolation {
    pub path: String,
    pub message: String,
}

impl SchemaViolation {
    fn new(path: &str, message: &str) -> Self {
        Self {
            path: if path.is_empty() { "/".to_string() } else { path.to_string() },
            message: message.to_string(),
        }
    }
}

/// The structural invariant of a bundle: request and response handshakes
/// plus the declared error kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuralSchema {
    pub request: SchemaNode,
    pub response: SchemaNode,
    #[serde(default)]
    pub errors: Vec<String>,
}

impl StructuralSchema {
    pub fn check_declaration(&self) -> Result<(), SchemaDefect> {
        self.request.check_declaration("/request")?;
        self.response.check_declaration("/response")?;
        Ok(())
    }

    pub fn declares_error(&self, kind: &str) -> bool {
        self.errors.iter().any(|e| e == kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn fraud_request() -> SchemaNode {
        SchemaNode::object(
            &["transaction_id", "account_id", "amount_cents"],
            vec![
                ("transaction_id", SchemaNode::string()),
                ("account_id", SchemaNode::string()),
                ("amount_cents", SchemaNode::integer(Some(0.0), None)),
                ("merchant_country", SchemaNode::string_pattern("^[A-Z]{2}$")),
            ],
        )
    }

    #[test]
    fn accepts_valid_request() {
        let doc = json!({
            "transaction_id": "t-1",
            "account_id": "a-9",
            "amount_cents": 1200,
            "merchant_country": "DE"
        });
        assert!(fraud_request().is_valid(&doc));
    }

    #[test]
    fn reports_missing_required_with_path() {
        let doc = json!({"account_id": "a", "amount_cents": 3});
        let mut v = Vec::new();
        fraud_request().check(&doc, "/request", &mut v);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].path, "/request/transaction_id");
    }

    #[test]
    fn rejects_negative_amount_and_bad_country() {
        let doc = json!({
            "transaction_id": "t",
            "account_id": "a",
            "amount_cents": -5,
            "merchant_country": "DEU"
        });
        let mut v = Vec::new();
        fraud_request().check(&doc, "", &mut v);
        let paths: Vec<_> = v.iter().map(|x| x.path.as_str()).collect();
        assert!(paths.contains(&"/amount_cents"));
        assert!(paths.contains(&"/merchant_country"));
    }

    #[test]
    fn integer_kind_rejects_floats() {
        let node = SchemaNode::integer(Some(0.0), None);
        assert!(!node.is_valid(&json!(1.5)));
        assert!(node.is_valid(&json!(7)));
    }

    #[test]
    fn enum_membership() {
        let node = SchemaNode::enumeration(&["approve", "review", "decline"]);
        assert!(node.is_valid(&json!("review")));
        assert!(!node.is_valid(&json!("maybe")));
        assert!(!node.is_valid(&json!(3)));
    }

    #[test]
    fn declaration_catches_inverted_bounds() {
        let node = SchemaNode::integer(Some(10.0), Some(5.0));
        let err = node.check_declaration("/request/amount_cents").unwrap_err();
        assert_eq!(err.path, "/request/amount_cents");
    }

    #[test]
    fn declaration_catches_required_without_property() {
        let node = SchemaNode::object(&["ghost"], vec![("real", SchemaNode::string())]);
        assert!(node.check_declaration("").is_err());
    }

    #[test]
    fn undeclared_fields_are_outside_the_commitment_surface() {
        let doc = json!({
            "transaction_id": "t",
            "account_id": "a",
            "amount_cents": 1,
            "surprise": true
        });
        assert!(fraud_request().is_valid(&doc));
    }
}
