//! Canonical document encoding and content digests.
//!
//! Every signed or content-addressed artifact in the toolchain is reduced to
//! one byte sequence before hashing or signing. The encoding is compact JSON
//! with object keys sorted bytewise, so two documents that differ only in
//! source key order encode identically.
//!
//! Rules:
//! * map keys sorted by UTF-8 byte order, each key appearing once
//! * no insignificant whitespace
//! * integers without leading zeros; decimals in shortest round-trip form
//! * strings escaped exactly as `serde_json` escapes them
//! * non-finite numbers are not encodable and are rejected at the YAML
//!   conversion boundary

use std::io::Write;

use serde::Serialize;
use serde::{Deserialize, Deserializer, Serializer};
use sha2::{Digest as _, Sha256};

/// A structured document: maps, lists, strings, integers, decimals,
/// booleans, null.
pub type Doc = serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum CanonError {
    /// Non-finite numbers (and the YAML values that produce them) have no
    /// canonical form.
    #[error("document is not canonicalizable: {0}")]
    NonCanonicalizable(String),
    #[error("canonical serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// Deterministic canonical encoding of a document.
pub fn canonical_bytes(doc: &Doc) -> Vec<u8> {
    let mut out = Vec::with_capacity(128);
    write_canonical(doc, &mut out);
    out
}

/// Canonical encoding of any serializable value, via its document form.
pub fn canonical_bytes_of<T: Serialize>(value: &T) -> Result<Vec<u8>, CanonError> {
    let doc = serde_json::to_value(value)?;
    Ok(canonical_bytes(&doc))
}

// Key sorting is done here explicitly rather than relying on the map order
// of the underlying JSON value, so the encoding cannot drift if a feature
// flag changes serde_json's map type.
fn write_canonical(doc: &Doc, out: &mut Vec<u8>) {
    match doc {
        Doc::Null => out.extend_from_slice(b"null"),
        Doc::Bool(true) => out.extend_from_slice(b"true"),
        Doc::Bool(false) => out.extend_from_slice(b"false"),
        Doc::Number(_) | Doc::String(_) => {
            // Leaf encoding delegated to serde_json: itoa for integers, ryu
            // shortest form for decimals, standard string escapes.
            serde_json::to_writer(&mut *out, doc).expect("leaf serialization is infallible");
        }
        Doc::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_canonical(item, out);
            }
            out.push(b']');
        }
        Doc::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort_unstable();
            out.push(b'{');
            for (i, key) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                serde_json::to_writer(&mut *out, key).expect("string serialization is infallible");
                out.push(b':');
                write_canonical(&map[key.as_str()], out);
            }
            out.push(b'}');
        }
    }
}

/// Canonical encoding with a trailing LF, the on-disk form of stored
/// artifacts and ledger lines.
pub fn canonical_line(doc: &Doc) -> Vec<u8> {
    let mut bytes = canonical_bytes(doc);
    bytes.push(b'\n');
    bytes
}

// ---------------------------------------------------------------------------
// Content digests
// ---------------------------------------------------------------------------

/// A SHA-256 content digest rendered `sha256:` + 64 lowercase hex digits.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContentDigest([u8; 32]);

impl ContentDigest {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        let hash: [u8; 32] = Sha256::digest(bytes).into();
        Self(hash)
    }

    pub fn of_doc(doc: &Doc) -> Self {
        Self::of_bytes(&canonical_bytes(doc))
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// The 64 hex digits without the `sha256:` prefix, used in file names.
    pub fn hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn parse(s: &str) -> Result<Self, DigestParseError> {
        let hex_part = s
            .strip_prefix("sha256:")
            .ok_or_else(|| DigestParseError(s.to_string()))?;
        if hex_part.len() != 64 || hex_part.bytes().any(|b| !b.is_ascii_hexdigit() || b.is_ascii_uppercase()) {
            return Err(DigestParseError(s.to_string()));
        }
        let raw = hex::decode(hex_part).map_err(|_| DigestParseError(s.to_string()))?;
        let mut out = [0u8; 32];
        out.copy_from_slice(&raw);
        Ok(Self(out))
    }
}

impl std::fmt::Display for ContentDigest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "sha256:{}", hex::encode(self.0))
    }
}

impl Serialize for ContentDigest {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ContentDigest {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        ContentDigest::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("invalid content digest {0:?}, expected sha256: + 64 lowercase hex digits")]
pub struct DigestParseError(pub String);

// ---------------------------------------------------------------------------
// YAML conversion
// ---------------------------------------------------------------------------

/// Convert a parsed YAML value into a document.
///
/// The bundle grammar is a restricted YAML-compatible subset: maps with
/// string keys, lists, and scalars. Tagged values and non-string keys are
/// rejected; non-finite numbers are rejected because they have no canonical
/// form.
pub fn doc_from_yaml(value: serde_yaml::Value) -> Result<Doc, CanonError> {
    use serde_yaml::Value as Y;
    Ok(match value {
        Y::Null => Doc::Null,
        Y::Bool(b) => Doc::Bool(b),
        Y::Number(n) => {
            if let Some(i) = n.as_i64() {
                Doc::from(i)
            } else if let Some(u) = n.as_u64() {
                Doc::from(u)
            } else {
                let f = n.as_f64().unwrap_or(f64::NAN);
                if !f.is_finite() {
                    return Err(CanonError::NonCanonicalizable(format!(
                        "non-finite number {f}"
                    )));
                }
                Doc::from(f)
            }
        }
        Y::String(s) => Doc::String(s),
        Y::Sequence(items) => Doc::Array(
            items
                .into_iter()
                .map(doc_from_yaml)
                .collect::<Result<Vec<_>, _>>()?,
        ),
        Y::Mapping(map) => {
            let mut out = serde_json::Map::with_capacity(map.len());
            for (k, v) in map {
                let Y::String(key) = k else {
                    return Err(CanonError::NonCanonicalizable(
                        "map key is not a string".to_string(),
                    ));
                };
                out.insert(key, doc_from_yaml(v)?);
            }
            Doc::Object(out)
        }
        Y::Tagged(t) => {
            return Err(CanonError::NonCanonicalizable(format!(
                "tagged value {} is outside the bundle grammar",
                t.tag
            )))
        }
    })
}

/// Parse a YAML source string into a document in the restricted subset.
pub fn doc_from_yaml_str(source: &str) -> Result<Doc, CanonError> {
    let value: serde_yaml::Value = serde_yaml::from_str(source)
        .map_err(|e| CanonError::NonCanonicalizable(format!("YAML parse error: {e}")))?;
    doc_from_yaml(value)
}

/// Write a document to a writer as canonical bytes plus trailing LF.
pub fn write_canonical_line<W: Write>(doc: &Doc, mut w: W) -> std::io::Result<()> {
    w.write_all(&canonical_line(doc))
}
