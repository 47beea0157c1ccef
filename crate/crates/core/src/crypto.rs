//! Hashing and Ed25519 signatures, hex encoded at every boundary.

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand::rngs::OsRng;
use sha2::{Digest, Sha256};

pub use ed25519_dalek::SigningKey as SecretKey;

/// Lowercase hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content identifier: `cid:` followed by the SHA-256 of the bytes.
pub fn cid_of(bytes: &[u8]) -> String {
    format!("cid:{}", sha256_hex(bytes))
}

/// Syntactic check for `cid:<64 lowercase hex>`.
pub fn is_cid(text: &str) -> bool {
    text.strip_prefix("cid:")
        .is_some_and(|h| h.len() == 64 && h.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)))
}

pub fn generate_key() -> SigningKey {
    SigningKey::generate(&mut OsRng)
}

/// Deterministic key from a seed string; used for demo and test keys only.
pub fn key_from_seed(seed: &str) -> SigningKey {
    let digest: [u8; 32] = Sha256::digest(seed.as_bytes()).into();
    SigningKey::from_bytes(&digest)
}

pub fn public_hex(key: &SigningKey) -> String {
    hex::encode(key.verifying_key().to_bytes())
}

pub fn secret_hex(key: &SigningKey) -> String {
    hex::encode(key.to_bytes())
}

pub fn secret_from_hex(text: &str) -> Option<SigningKey> {
    let bytes: [u8; 32] = hex::decode(text.trim()).ok()?.try_into().ok()?;
    Some(SigningKey::from_bytes(&bytes))
}

pub fn sign_hex(key: &SigningKey, message: &[u8]) -> String {
    hex::encode(key.sign(message).to_bytes())
}

/// Verify a hex signature against a hex public key. Malformed hex is a
/// failed verification, not an error.
pub fn verify_hex(public: &str, message: &[u8], signature: &str) -> bool {
    let Some(key) = parse_public(public) else {
        return false;
    };
    let Ok(sig_bytes) = hex::decode(signature) else {
        return false;
    };
    let Ok(sig_bytes) = <[u8; 64]>::try_from(sig_bytes.as_slice()) else {
        return false;
    };
    key.verify(message, &Signature::from_bytes(&sig_bytes)).is_ok()
}

pub fn parse_public(public: &str) -> Option<VerifyingKey> {
    let bytes: [u8; 32] = hex::decode(public).ok()?.try_into().ok()?;
    VerifyingKey::from_bytes(&bytes).ok()
}
