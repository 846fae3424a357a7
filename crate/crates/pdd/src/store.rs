//! Durable, content-addressed persistence for sealed bundles, evidence
//! artifacts, and trust material.
//!
//! Layout under the registry root:
//!
//! ```text
//! registry/
//!   index.json              # "protocol_id@version" -> bundle digest
//!   index.lock              # advisory lock for index mutations
//!   bundles/<digest-hex>/   # stored bundle directories
//!   evidence/<digest-hex>.json
//!   trust.json
//!   keys/<issuer>.key
//! ```
//!
//! All writes are temp-then-rename; an interrupted write never leaves a
//! readable-but-wrong entry. Stored artifacts are immutable: publishing the
//! same (id, version) again succeeds only with identical content.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::bundle::{parse_bundle, BundleError, SealedBundle};
use crate::canon::{canonical_line, ContentDigest, Doc};
use crate::evidence::BundleDigestLookup;
use crate::sign::{SignError, SigningIdentity, TrustMap};
use crate::time::{Clock, UtcTime};
use crate::version::SemVer;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{protocol_id}@{version} is already published with digest {existing}; refusing {offered}")]
    VersionConflict {
        protocol_id: String,
        version: String,
        existing: ContentDigest,
        offered: ContentDigest,
    },
    #[error("no bundle published for {protocol_id}@{version}")]
    NotFound { protocol_id: String, version: String },
    #[error("stored bundle is corrupt: expected {expected}, recomputed {actual}")]
    DigestMismatch {
        expected: ContentDigest,
        actual: ContentDigest,
    },
    #[error("could not acquire the index lock within {waited_ms} ms")]
    LockFailure { waited_ms: u64 },
    #[error("write failure: {0}")]
    WriteFailure(#[from] std::io::Error),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Sign(#[from] SignError),
}

/// Receipt for a published bundle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicationRecord {
    pub protocol_id: String,
    pub version: String,
    pub bundle_digest: ContentDigest,
    pub path: PathBuf,
    pub publisher: String,
    pub published_at: UtcTime,
}

/// Receipt for a stored evidence artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageReceipt {
    pub digest: ContentDigest,
    pub path: PathBuf,
}

/// The index file is one canonical document mapping `protocol_id@version`
/// to the sealed bundle digest.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(transparent)]
struct Index {
    entries: BTreeMap<String, ContentDigest>,
}

/// Handle to one registry root.
#[derive(Debug, Clone)]
pub struct RegistryHandle {
    root: PathBuf,
}

// Fault-injection hook for the atomic-write contract tests: when armed,
// the write "crashes" after the temp file is written, before the rename.
#[cfg(test)]
thread_local! {
    static CRASH_BEFORE_RENAME: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact")
    ));
    std::fs::write(&tmp, bytes)?;
    #[cfg(test)]
    {
        let crash = CRASH_BEFORE_RENAME.with(|c| c.replace(false));
        if crash {
            return Err(std::io::Error::other("injected crash before rename"));
        }
    }
    std::fs::rename(&tmp, path)
}

struct IndexLock {
    path: PathBuf,
}

impl IndexLock {
    fn acquire(root: &Path) -> Result<Self, StoreError> {
        let path = root.join("index.lock");
        let deadline = std::time::Instant::now() + Duration::from_secs(5);
        loop {
            match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(_) => return Ok(Self { path }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    if std::time::Instant::now() >= deadline {
                        return Err(StoreError::LockFailure { waited_ms: 5_000 });
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl Drop for IndexLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

impl RegistryHandle {
    /// Open (creating if needed) a registry rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        std::fs::create_dir_all(root.join("bundles"))?;
        std::fs::create_dir_all(root.join("evidence"))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn index_path(&self) -> PathBuf {
        self.root.join("index.json")
    }

    fn read_index(&self) -> Result<Index, StoreError> {
        let path = self.index_path();
        if !path.exists() {
            return Ok(Index::default());
        }
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| {
            StoreError::WriteFailure(std::io::Error::new(std::io::ErrorKind::InvalidData, e))
        })
    }

    fn write_index(&self, index: &Index) -> Result<(), StoreError> {
        let doc = serde_json::to_value(index).expect("index serializes");
        write_atomic(&self.index_path(), &canonical_line(&doc))?;
        Ok(())
    }

    /// Publish a sealed bundle. Idempotent for identical content; a
    /// different digest under an existing (id, version) is a conflict.
    pub fn publish(
        &self,
        sealed: &SealedBundle,
        publisher: &str,
    ) -> Result<PublicationRecord, StoreError> {
        let _lock = IndexLock::acquire(&self.root)?;
        let mut index = self.read_index()?;
        let key = format!("{}@{}", sealed.bundle.protocol_id, sealed.bundle.version);
        let digest = &sealed.bundle_digest;

        if let Some(existing) = index.entries.get(&key) {
            if existing != digest {
                return Err(StoreError::VersionConflict {
                    protocol_id: sealed.bundle.protocol_id.clone(),
                    version: sealed.bundle.version.to_string(),
                    existing: existing.clone(),
                    offered: digest.clone(),
                });
            }
        }

        let bundle_dir = self.root.join("bundles").join(digest.hex());
        let record = PublicationRecord {
            protocol_id: sealed.bundle.protocol_id.clone(),
            version: sealed.bundle.version.to_string(),
            bundle_digest: digest.clone(),
            path: bundle_dir.clone(),
            publisher: publisher.to_string(),
            published_at: sealed.sealed_at,
        };
        if !bundle_dir.exists() {
            // Stage the directory, then rename into place.
            let staging = self.root.join("bundles").join(format!(".staging-{}", digest.hex()));
            if staging.exists() {
                std::fs::remove_dir_all(&staging)?;
            }
            crate::bundle::write_bundle_dir(&staging, &sealed.bundle.source)?;
            let descriptor = sealed.descriptor();
            std::fs::write(staging.join("sealed.json"), canonical_line(&descriptor))?;
            // Publisher provenance rides beside the content; it is not a
            // digest input.
            let provenance = serde_json::to_value(&record).expect("record serializes");
            std::fs::write(staging.join("publication.json"), canonical_line(&provenance))?;
            std::fs::rename(&staging, &bundle_dir)?;
        }

        index.entries.insert(key, digest.clone());
        self.write_index(&index)?;
        Ok(record)
    }

    /// Load a published bundle, re-verifying its digest from the stored
    /// files.
    pub fn get(&self, protocol_id: &str, version: &str) -> Result<SealedBundle, StoreError> {
        let index = self.read_index()?;
        let key = format!("{protocol_id}@{version}");
        let digest = index.entries.get(&key).ok_or_else(|| StoreError::NotFound {
            protocol_id: protocol_id.to_string(),
            version: version.to_string(),
        })?;
        let dir = self.root.join("bundles").join(digest.hex());
        let bundle = parse_bundle(&dir)?;
        let actual = bundle.content_digest();
        if &actual != digest {
            return Err(StoreError::DigestMismatch {
                expected: digest.clone(),
                actual,
            });
        }
        let sealed_at = std::fs::read_to_string(dir.join("sealed.json"))
            .ok()
            .and_then(|text| serde_json::from_str::<Doc>(&text).ok())
            .and_then(|doc| {
                doc.get("sealed_at")
                    .and_then(Doc::as_str)
                    .and_then(|s| UtcTime::parse(s).ok())
            })
            .unwrap_or_else(|| crate::time::SystemClock.now());
        Ok(SealedBundle {
            bundle,
            bundle_digest: actual,
            sealed_at,
        })
    }

    /// All published (protocol_id, version, digest) triples.
    pub fn list(&self) -> Result<Vec<(String, SemVer, ContentDigest)>, StoreError> {
        let index = self.read_index()?;
        let mut out = Vec::with_capacity(index.entries.len());
        for (key, digest) in index.entries {
            let Some((id, version)) = key.rsplit_once('@') else { continue };
            let Ok(version) = version.parse::<SemVer>() else { continue };
            out.push((id.to_string(), version, digest));
        }
        Ok(out)
    }

    /// Published versions of one protocol, ascending.
    pub fn versions_of(&self, protocol_id: &str) -> Result<Vec<SemVer>, StoreError> {
        let mut versions: Vec<SemVer> = self
            .list()?
            .into_iter()
            .filter(|(id, _, _)| id == protocol_id)
            .map(|(_, v, _)| v)
            .collect();
        versions.sort_unstable();
        Ok(versions)
    }

    /// Store any canonical document content-addressed under `evidence/`.
    /// Identical content stores to the same address.
    pub fn store_evidence(&self, doc: &Doc) -> Result<StorageReceipt, StoreError> {
        let bytes = canonical_line(doc);
        let digest = ContentDigest::of_bytes(&bytes);
        let path = self.root.join("evidence").join(format!("{}.json", digest.hex()));
        if !path.exists() {
            write_atomic(&path, &bytes)?;
        }
        Ok(StorageReceipt { digest, path })
    }

    pub fn load_evidence(&self, digest: &ContentDigest) -> Result<Doc, StoreError> {
        let path = self.root.join("evidence").join(format!("{}.json", digest.hex()));
        let bytes = std::fs::read(&path)?;
        let actual = ContentDigest::of_bytes(&bytes);
        if &actual != digest {
            return Err(StoreError::DigestMismatch {
                expected: digest.clone(),
                actual,
            });
        }
        serde_json::from_slice(&bytes).map_err(|e| {
            StoreError::WriteFailure(std::io::Error::new(std::io::ErrorKind::InvalidData, e))
        })
    }

    /// Every stored evidence artifact digest.
    pub fn evidence_inventory(&self) -> Result<Vec<PathBuf>, StoreError> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(self.root.join("evidence"))? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("json") {
                out.push(path);
            }
        }
        out.sort();
        Ok(out)
    }

    // -----------------------------------------------------------------
    // Trust material
    // -----------------------------------------------------------------

    pub fn trust_map(&self) -> Result<TrustMap, StoreError> {
        let path = self.root.join("trust.json");
        if !path.exists() {
            return Ok(TrustMap::default());
        }
        Ok(TrustMap::load(&path)?)
    }

    pub fn save_trust_map(&self, trust: &TrustMap) -> Result<(), StoreError> {
        trust.save(&self.root.join("trust.json"))?;
        Ok(())
    }

    /// Load the issuer's signing key, provisioning one (and trusting it)
    /// on first use.
    pub fn ensure_identity(&self, issuer: &str) -> Result<SigningIdentity, StoreError> {
        let key_path = self.root.join("keys").join(format!("{issuer}.key"));
        if key_path.exists() {
            return Ok(SigningIdentity::load(issuer, &key_path)?);
        }
        let identity = SigningIdentity::generate(issuer)?;
        identity.save(&key_path)?;
        let mut trust = self.trust_map()?;
        trust.insert(&identity);
        self.save_trust_map(&trust)?;
        Ok(identity)
    }
}

impl BundleDigestLookup for RegistryHandle {
    fn sealed_digest(&self, protocol_id: &str, version: &str) -> Option<ContentDigest> {
        let index = self.read_index().ok()?;
        index.entries.get(&format!("{protocol_id}@{version}")).cloned()
    }
}
