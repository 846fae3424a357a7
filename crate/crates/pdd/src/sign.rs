//! Ed25519 detached signatures over canonical bytes, and the static trust
//! map of issuer identities.
//!
//! Signatures render as `sig:` + base64; public keys as `ed25519:` +
//! base64. The scheme name also travels inside every signed payload (the
//! `signature_scheme` field) so a future scheme change is detectable.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use ed25519_dalek::{Signature, Signer as _, SigningKey, VerifyingKey};
use serde::{Deserialize, Serialize};

pub const SIGNATURE_SCHEME: &str = "ed25519";

#[derive(Debug, thiserror::Error)]
pub enum SignError {
    #[error("signing failed: {0}")]
    SigningFailure(String),
    #[error("issuer {0:?} is not in the trust map")]
    UnknownIssuer(String),
    #[error("signature does not verify for issuer {issuer}")]
    BadSignature { issuer: String },
    #[error("malformed signature {0:?}, expected sig:<base64>")]
    BadSignatureEncoding(String),
    #[error("malformed public key {0:?}, expected ed25519:<base64>")]
    BadKeyEncoding(String),
    #[error("key I/O failure: {0}")]
    Io(#[from] std::io::Error),
}

/// A signing identity: issuer name plus private key.
pub struct SigningIdentity {
    pub issuer: String,
    key: SigningKey,
}

impl std::fmt::Debug for SigningIdentity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SigningIdentity")
            .field("issuer", &self.issuer)
            .field("public_key", &self.public_key())
            .finish_non_exhaustive()
    }
}

impl SigningIdentity {
    pub fn from_seed(issuer: &str, seed: [u8; 32]) -> Self {
        Self {
            issuer: issuer.to_string(),
            key: SigningKey::from_bytes(&seed),
        }
    }

    pub fn generate(issuer: &str) -> Result<Self, SignError> {
        let mut seed = [0u8; 32];
        getrandom::fill(&mut seed).map_err(|e| SignError::SigningFailure(e.to_string()))?;
        Ok(Self::from_seed(issuer, seed))
    }

    /// Load a key file: 64 hex digits of seed.
    pub fn load(issuer: &str, path: &Path) -> Result<Self, SignError> {
        let text = std::fs::read_to_string(path)?;
        let raw = hex::decode(text.trim())
            .map_err(|_| SignError::BadKeyEncoding(path.display().to_string()))?;
        let seed: [u8; 32] = raw
            .try_into()
            .map_err(|_| SignError::BadKeyEncoding(path.display().to_string()))?;
        Ok(Self::from_seed(issuer, seed))
    }

    pub fn save(&self, path: &Path) -> Result<(), SignError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, hex::encode(self.key.to_bytes()))?;
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            std::fs::set_permissions(path, std::fs::Permissions::from_mode(0o600))?;
        }
        Ok(())
    }

    pub fn sign(&self, message: &[u8]) -> String {
        let signature: Signature = self.key.sign(message);
        format!("sig:{}", BASE64.encode(signature.to_bytes()))
    }

    /// `ed25519:<base64>` rendering of the public key.
    pub fn public_key(&self) -> String {
        format!(
            "{SIGNATURE_SCHEME}:{}",
            BASE64.encode(self.key.verifying_key().to_bytes())
        )
    }
}

/// Issuer name to public key. The entire key-management story: static,
/// file-backed, no rotation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustMap {
    pub issuers: BTreeMap<String, String>,
}

impl TrustMap {
    pub fn single(identity: &SigningIdentity) -> Self {
        let mut issuers = BTreeMap::new();
        issuers.insert(identity.issuer.clone(), identity.public_key());
        Self { issuers }
    }

    pub fn insert(&mut self, identity: &SigningIdentity) {
        self.issuers.insert(identity.issuer.clone(), identity.public_key());
    }

    pub fn load(path: &Path) -> Result<Self, SignError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| SignError::BadKeyEncoding(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), SignError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let doc = serde_json::to_value(self).map_err(|e| SignError::SigningFailure(e.to_string()))?;
        std::fs::write(path, crate::canon::canonical_line(&doc))?;
        Ok(())
    }

    /// Verify a detached `sig:` signature by a named issuer.
    pub fn verify(&self, issuer: &str, message: &[u8], signature: &str) -> Result<(), SignError> {
        let key_text = self
            .issuers
            .get(issuer)
            .ok_or_else(|| SignError::UnknownIssuer(issuer.to_string()))?;
        let key_b64 = key_text
            .strip_prefix("ed25519:")
            .ok_or_else(|| SignError::BadKeyEncoding(key_text.clone()))?;
        let key_raw: [u8; 32] = BASE64
            .decode(key_b64)
            .map_err(|_| SignError::BadKeyEncoding(key_text.clone()))?
            .try_into()
            .map_err(|_| SignError::BadKeyEncoding(key_text.clone()))?;
        let key = VerifyingKey::from_bytes(&key_raw)
            .map_err(|_| SignError::BadKeyEncoding(key_text.clone()))?;

        let sig_b64 = signature
            .strip_prefix("sig:")
            .ok_or_else(|| SignError::BadSignatureEncoding(signature.to_string()))?;
        let sig_raw: [u8; 64] = BASE64
            .decode(sig_b64)
            .map_err(|_| SignError::BadSignatureEncoding(signature.to_string()))?
            .try_into()
            .map_err(|_| SignError::BadSignatureEncoding(signature.to_string()))?;
        let signature = Signature::from_bytes(&sig_raw);

        key.verify_strict(message, &signature)
            .map_err(|_| SignError::BadSignature { issuer: issuer.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity() -> SigningIdentity {
        SigningIdentity::from_seed("validation-engine.example", [7u8; 32])
    }

    #[test]
    fn sign_verify_round_trip() {
        let id = identity();
        let trust = TrustMap::single(&id);
        let sig = id.sign(b"payload");
        assert!(sig.starts_with("sig:"));
        trust.verify(&id.issuer, b"payload", &sig).unwrap();
    }

    #[test]
    fn tampered_payload_fails() {
        let id = identity();
        let trust = TrustMap::single(&id);
        let sig = id.sign(b"payload");
        let err = trust.verify(&id.issuer, b"payloaX", &sig).unwrap_err();
        assert!(matches!(err, SignError::BadSignature { .. }));
    }

    #[test]
    fn unknown_issuer_fails() {
        let id = identity();
        let trust = TrustMap::single(&id);
        let sig = id.sign(b"payload");
        let err = trust.verify("rogue", b"payload", &sig).unwrap_err();
        assert!(matches!(err, SignError::UnknownIssuer(_)));
    }

    #[test]
    fn key_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("keys/issuer.key");
        let id = identity();
        id.save(&path).unwrap();
        let reloaded = SigningIdentity::load(&id.issuer, &path).unwrap();
        assert_eq!(id.public_key(), reloaded.public_key());
        let sig = reloaded.sign(b"x");
        TrustMap::single(&id).verify(&id.issuer, b"x", &sig).unwrap();
    }

    #[test]
    fn trust_map_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trust.json");
        let trust = TrustMap::single(&identity());
        trust.save(&path).unwrap();
        assert_eq!(TrustMap::load(&path).unwrap(), trust);
    }

    #[test]
    fn signatures_are_deterministic_per_key() {
        let id = identity();
        assert_eq!(id.sign(b"m"), id.sign(b"m"));
        assert_ne!(id.sign(b"m"), id.sign(b"n"));
    }
}
