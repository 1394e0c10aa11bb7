//! Identity keys, ECDH + HKDF key delivery, AEAD content protection and verdict signatures.
//!
//! Three delivery contexts share one derivation:
//!
//! - `audit`:   HKDF(sk_d * pk_i, audit,   skill_id || pk_i || pk_d)
//! - `license`: HKDF(sk_b * pk_d, license, skill_id || pk_b || pk_d)
//! - `sealed`:  HKDF(sk_d * pk_d, sealed,  skill_id)
//!
//! Serialized `WrappedKey` and `ContentBlob`: `context:u8 || nonce:[u8;12] || ciphertext`.
//! Content blobs use context byte `0x00`.

use std::fmt;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};

use crate::canon::{canonical_encode, hexser, ContentHash, Field};

pub const NONCE_LEN: usize = 12;
const CONTENT_CONTEXT: u8 = 0x00;
const HKDF_LABEL: &str = "sigil/delivery/v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("invalid or low-order public key")]
    InvalidPublicKey,
    #[error("authentication failed: wrong key or tampered ciphertext")]
    Authentication,
    #[error("malformed encoding: {0}")]
    Malformed(&'static str),
    #[error("malformed signature")]
    MalformedSignature,
}

/// Public half of an X25519 key-exchange pair.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExchangeKey(#[serde(with = "hexser")] pub [u8; 32]);

impl ExchangeKey {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for ExchangeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ExchangeKey({})", hex::encode(&self.0[..6]))
    }
}

/// Ed25519 verifying key bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VerifierKey(#[serde(with = "hexser")] pub [u8; 32]);

impl fmt::Debug for VerifierKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VerifierKey({})", hex::encode(&self.0[..6]))
    }
}

/// X25519 key pair used for every delivery context.
#[derive(Clone)]
pub struct KeyPair {
    secret: StaticSecret,
    public: PublicKey,
}

impl KeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        Self::from_secret_bytes(bytes)
    }

    pub fn from_secret_bytes(bytes: [u8; 32]) -> Self {
        let secret = StaticSecret::from(bytes);
        let public = PublicKey::from(&secret);
        KeyPair { secret, public }
    }

    pub fn public_key(&self) -> ExchangeKey {
        ExchangeKey(self.public.to_bytes())
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.secret.to_bytes()
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public", &self.public_key())
            .finish_non_exhaustive()
    }
}

/// A participant's full key material, derived from one 32-byte seed.
///
/// The exchange and signing keys are independent HKDF expansions of the seed.
#[derive(Clone)]
pub struct Identity {
    seed: [u8; 32],
    exchange: KeyPair,
    signing: SigningKey,
}

impl Identity {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_seed(seed)
    }

    pub fn from_seed(seed: [u8; 32]) -> Self {
        let hk = Hkdf::<Sha256>::new(Some(b"sigil/identity/v1"), &seed);
        let mut x = [0u8; 32];
        let mut e = [0u8; 32];
        hk.expand(b"x25519", &mut x).expect("32 bytes is a valid HKDF length");
        hk.expand(b"ed25519", &mut e).expect("32 bytes is a valid HKDF length");
        Identity {
            seed,
            exchange: KeyPair::from_secret_bytes(x),
            signing: SigningKey::from_bytes(&e),
        }
    }

    pub fn seed(&self) -> &[u8; 32] {
        &self.seed
    }

    pub fn exchange(&self) -> &KeyPair {
        &self.exchange
    }

    pub fn exchange_key(&self) -> ExchangeKey {
        self.exchange.public_key()
    }

    pub fn verifier_key(&self) -> VerifierKey {
        VerifierKey(self.signing.verifying_key().to_bytes())
    }

    pub fn signing_key(&self) -> &SigningKey {
        &self.signing
    }
}

impl fmt::Debug for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Identity")
            .field("exchange", &self.exchange_key())
            .field("verifier", &self.verifier_key())
            .finish_non_exhaustive()
    }
}

/// Raw X25519 output.
#[derive(Clone, PartialEq, Eq)]
pub struct SharedSecret([u8; 32]);

impl SharedSecret {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for SharedSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SharedSecret(..)")
    }
}

/// X25519 Diffie-Hellman. Rejects peer points that yield an all-zero output.
pub fn ecdh_shared_secret(own: &KeyPair, peer: &ExchangeKey) -> Result<SharedSecret, CryptoError> {
    let shared = own.secret.diffie_hellman(&PublicKey::from(peer.0));
    if !shared.was_contributory() {
        return Err(CryptoError::InvalidPublicKey);
    }
    Ok(SharedSecret(shared.to_bytes()))
}

/// HKDF info tag selecting one of the three delivery derivations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyContext {
    Audit,
    License,
    Sealed,
}

impl KeyContext {
    pub fn byte(self) -> u8 {
        match self {
            KeyContext::Audit => 0x01,
            KeyContext::License => 0x02,
            KeyContext::Sealed => 0x03,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0x01 => Some(KeyContext::Audit),
            0x02 => Some(KeyContext::License),
            0x03 => Some(KeyContext::Sealed),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            KeyContext::Audit => "audit",
            KeyContext::License => "license",
            KeyContext::Sealed => "sealed",
        }
    }
}

/// `skill_id || pk_i || pk_d`
pub fn audit_binding(skill_id: &ContentHash, auditor: &ExchangeKey, developer: &ExchangeKey) -> Vec<u8> {
    canonical_encode(&[
        Field::Bytes(skill_id.as_bytes()),
        Field::Bytes(&auditor.0),
        Field::Bytes(&developer.0),
    ])
}

/// `skill_id || pk_b || pk_d`
pub fn license_binding(skill_id: &ContentHash, buyer: &ExchangeKey, developer: &ExchangeKey) -> Vec<u8> {
    canonical_encode(&[
        Field::Bytes(skill_id.as_bytes()),
        Field::Bytes(&buyer.0),
        Field::Bytes(&developer.0),
    ])
}

/// `skill_id`
pub fn sealed_binding(skill_id: &ContentHash) -> Vec<u8> {
    canonical_encode(&[Field::Bytes(skill_id.as_bytes())])
}

macro_rules! secret_key_type {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Clone, PartialEq, Eq)]
        pub struct $name([u8; 32]);

        impl $name {
            pub fn from_bytes(bytes: [u8; 32]) -> Self {
                $name(bytes)
            }

            pub fn to_bytes(&self) -> [u8; 32] {
                self.0
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(concat!(stringify!($name), "(..)"))
            }
        }
    };
}

secret_key_type!(
    /// Per-recipient key that wraps a content key.
    DeliveryKey
);
secret_key_type!(
    /// Symmetric key protecting skill content.
    ContentKey
);

impl ContentKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut k = [0u8; 32];
        rng.fill_bytes(&mut k);
        ContentKey(k)
    }
}

/// HKDF-SHA256 with the context tag and binding folded into the info field.
pub fn derive_delivery_key(shared: &SharedSecret, context: KeyContext, binding: &[u8]) -> DeliveryKey {
    let hk = Hkdf::<Sha256>::new(None, shared.as_bytes());
    let info = canonical_encode(&[
        Field::Str(HKDF_LABEL),
        Field::Str(context.label()),
        Field::Bytes(binding),
    ]);
    let mut okm = [0u8; 32];
    hk.expand(&info, &mut okm).expect("32 bytes is a valid HKDF length");
    DeliveryKey(okm)
}

/// Sealing key for a skill, from the developer's self-handshake.
pub fn sealing_key(developer: &KeyPair, skill_id: &ContentHash) -> Result<DeliveryKey, CryptoError> {
    let shared = ecdh_shared_secret(developer, &developer.public_key())?;
    Ok(derive_delivery_key(&shared, KeyContext::Sealed, &sealed_binding(skill_id)))
}

/// A content key encrypted for one recipient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WrappedKey {
    pub context: KeyContext,
    #[serde(with = "hexser")]
    pub nonce: [u8; NONCE_LEN],
    #[serde(with = "hexser")]
    pub ciphertext: Vec<u8>,
}

impl WrappedKey {
    pub fn to_bytes(&self) -> Vec<u8> {
        frame(self.context.byte(), &self.nonce, &self.ciphertext)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let (ctx, nonce, ciphertext) = unframe(bytes)?;
        let context = KeyContext::from_byte(ctx).ok_or(CryptoError::Malformed("unknown key context"))?;
        Ok(WrappedKey { context, nonce, ciphertext })
    }
}

/// AEAD-encrypted skill content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentBlob {
    #[serde(with = "hexser")]
    pub nonce: [u8; NONCE_LEN],
    #[serde(with = "hexser")]
    pub ciphertext: Vec<u8>,
}

impl ContentBlob {
    pub fn to_bytes(&self) -> Vec<u8> {
        frame(CONTENT_CONTEXT, &self.nonce, &self.ciphertext)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let (ctx, nonce, ciphertext) = unframe(bytes)?;
        if ctx != CONTENT_CONTEXT {
            return Err(CryptoError::Malformed("not a content blob"));
        }
        Ok(ContentBlob { nonce, ciphertext })
    }
}

fn frame(ctx: u8, nonce: &[u8; NONCE_LEN], ct: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(1 + NONCE_LEN + ct.len());
    out.push(ctx);
    out.extend_from_slice(nonce);
    out.extend_from_slice(ct);
    out
}

fn unframe(bytes: &[u8]) -> Result<(u8, [u8; NONCE_LEN], Vec<u8>), CryptoError> {
    // 16-byte GCM tag at minimum.
    if bytes.len() < 1 + NONCE_LEN + 16 {
        return Err(CryptoError::Malformed("ciphertext frame too short"));
    }
    let mut nonce = [0u8; NONCE_LEN];
    nonce.copy_from_slice(&bytes[1..1 + NONCE_LEN]);
    Ok((bytes[0], nonce, bytes[1 + NONCE_LEN..].to_vec()))
}

fn wrap_aad(context: KeyContext, skill_id: &ContentHash) -> Vec<u8> {
    canonical_encode(&[Field::Enum(context.byte()), Field::Bytes(skill_id.as_bytes())])
}

fn seal(key: &[u8; 32], nonce: &[u8; NONCE_LEN], msg: &[u8], aad: &[u8]) -> Vec<u8> {
    Aes256Gcm::new(key.into())
        .encrypt(Nonce::from_slice(nonce), Payload { msg, aad })
        .expect("AES-GCM encryption of in-memory buffers does not fail")
}

fn open(key: &[u8; 32], nonce: &[u8; NONCE_LEN], ct: &[u8], aad: &[u8]) -> Result<Vec<u8>, CryptoError> {
    Aes256Gcm::new(key.into())
        .decrypt(Nonce::from_slice(nonce), Payload { msg: ct, aad })
        .map_err(|_| CryptoError::Authentication)
}

/// Encrypts `content_key` under `delivery_key`, bound to `(context, skill_id)`.
pub fn wrap_content_key<R: RngCore + CryptoRng>(
    content_key: &ContentKey,
    delivery_key: &DeliveryKey,
    context: KeyContext,
    skill_id: &ContentHash,
    rng: &mut R,
) -> WrappedKey {
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let ciphertext = seal(&delivery_key.0, &nonce, &content_key.0, &wrap_aad(context, skill_id));
    WrappedKey { context, nonce, ciphertext }
}

pub fn unwrap_content_key(
    wrapped: &WrappedKey,
    delivery_key: &DeliveryKey,
    skill_id: &ContentHash,
) -> Result<ContentKey, CryptoError> {
    let pt = open(
        &delivery_key.0,
        &wrapped.nonce,
        &wrapped.ciphertext,
        &wrap_aad(wrapped.context, skill_id),
    )?;
    let bytes: [u8; 32] = pt.try_into().map_err(|_| CryptoError::Malformed("content key length"))?;
    Ok(ContentKey(bytes))
}

/// AES-256-GCM over the full content, with the skill id as associated data.
pub fn encrypt_content<R: RngCore + CryptoRng>(
    plaintext: &[u8],
    key: &ContentKey,
    skill_id: &ContentHash,
    rng: &mut R,
) -> ContentBlob {
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let ciphertext = seal(&key.0, &nonce, plaintext, skill_id.as_bytes());
    ContentBlob { nonce, ciphertext }
}

pub fn decrypt_content(blob: &ContentBlob, key: &ContentKey, skill_id: &ContentHash) -> Result<Vec<u8>, CryptoError> {
    open(&key.0, &blob.nonce, &blob.ciphertext, skill_id.as_bytes())
}

/// Ed25519 signature over canonical verdict bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictSignature {
    #[serde(with = "hexser")]
    pub signature: Vec<u8>,
    pub signer: VerifierKey,
}

pub fn sign_verdict(verdict_bytes: &[u8], key: &SigningKey) -> VerdictSignature {
    VerdictSignature {
        signature: key.sign(verdict_bytes).to_bytes().to_vec(),
        signer: VerifierKey(key.verifying_key().to_bytes()),
    }
}

/// Strict Ed25519 verification. A malformed signature or key is an error,
/// a well-formed signature that does not verify is `Ok(false)`.
pub fn verify_verdict(
    verdict_bytes: &[u8],
    sig: &VerdictSignature,
    public_key: &VerifierKey,
) -> Result<bool, CryptoError> {
    let signature =
        ed25519_dalek::Signature::from_slice(&sig.signature).map_err(|_| CryptoError::MalformedSignature)?;
    let key = VerifyingKey::from_bytes(&public_key.0).map_err(|_| CryptoError::InvalidPublicKey)?;
    Ok(key.verify_strict(verdict_bytes, &signature).is_ok())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canon::content_hash;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(7)
    }

    #[test]
    fn dh_is_symmetric() {
        let mut r = rng();
        let d = KeyPair::generate(&mut r);
        let i = KeyPair::generate(&mut r);
        assert_eq!(
            ecdh_shared_secret(&d, &i.public_key()).unwrap(),
            ecdh_shared_secret(&i, &d.public_key()).unwrap()
        );
    }

    #[test]
    fn self_handshake_is_defined() {
        let d = KeyPair::generate(&mut rng());
        let a = ecdh_shared_secret(&d, &d.public_key()).unwrap();
        let b = ecdh_shared_secret(&d, &d.public_key()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.as_bytes(), &[0u8; 32]);
    }

    #[test]
    fn zero_point_rejected() {
        let d = KeyPair::generate(&mut rng());
        assert_eq!(
            ecdh_shared_secret(&d, &ExchangeKey([0u8; 32])),
            Err(CryptoError::InvalidPublicKey)
        );
    }

    #[test]
    fn contexts_are_separated() {
        let mut r = rng();
        let d = KeyPair::generate(&mut r);
        let s = ecdh_shared_secret(&d, &KeyPair::generate(&mut r).public_key()).unwrap();
        let b = b"binding";
        let audit = derive_delivery_key(&s, KeyContext::Audit, b);
        let license = derive_delivery_key(&s, KeyContext::License, b);
        let sealed = derive_delivery_key(&s, KeyContext::Sealed, b);
        assert_ne!(audit, license);
        assert_ne!(audit, sealed);
        assert_ne!(license, sealed);
        assert_eq!(audit, derive_delivery_key(&s, KeyContext::Audit, b));
    }

    #[test]
    fn golden_sealed_delivery_key() {
        // Frozen from the first build; guards the derivation layout.
        let s = SharedSecret([0x42; 32]);
        let skill = content_hash(b"golden skill");
        let k = derive_delivery_key(&s, KeyContext::Sealed, &sealed_binding(&skill));
        assert_eq!(hex::encode(k.to_bytes()), GOLDEN_SEALED_KEY);
    }

    const GOLDEN_SEALED_KEY: &str = "cde10a00f58dfb6bf2bbb89d4673dfb2ec9b33c408181f9e479ff353fd630360";

    #[test]
    fn wrap_round_trip_and_failures() {
        let mut r = rng();
        let skill = content_hash(b"s");
        let ck = ContentKey::generate(&mut r);
        let dk = DeliveryKey([9u8; 32]);
        let w = wrap_content_key(&ck, &dk, KeyContext::Audit, &skill, &mut r);
        assert_eq!(unwrap_content_key(&w, &dk, &skill).unwrap(), ck);

        let other = DeliveryKey([8u8; 32]);
        assert_eq!(unwrap_content_key(&w, &other, &skill), Err(CryptoError::Authentication));

        let mut flipped = w.clone();
        flipped.ciphertext[0] ^= 1;
        assert_eq!(unwrap_content_key(&flipped, &dk, &skill), Err(CryptoError::Authentication));

        let mut retagged = w.clone();
        retagged.context = KeyContext::License;
        assert_eq!(unwrap_content_key(&retagged, &dk, &skill), Err(CryptoError::Authentication));

        let other_skill = content_hash(b"t");
        assert_eq!(unwrap_content_key(&w, &dk, &other_skill), Err(CryptoError::Authentication));
    }

    #[test]
    fn wrapped_key_wire_format() {
        let mut r = rng();
        let w = wrap_content_key(
            &ContentKey::generate(&mut r),
            &DeliveryKey([1; 32]),
            KeyContext::Sealed,
            &ContentHash::ZERO,
            &mut r,
        );
        let bytes = w.to_bytes();
        assert_eq!(bytes[0], 0x03);
        assert_eq!(&bytes[1..13], &w.nonce);
        assert_eq!(bytes.len(), 1 + 12 + 32 + 16);
        assert_eq!(WrappedKey::from_bytes(&bytes).unwrap(), w);
        assert!(WrappedKey::from_bytes(&bytes[..20]).is_err());
        let mut bad = bytes.clone();
        bad[0] = 0x09;
        assert!(WrappedKey::from_bytes(&bad).is_err());
    }

    #[test]
    fn content_round_trip() {
        let mut r = rng();
        let key = ContentKey::generate(&mut r);
        let id = content_hash(b"id");
        let blob = encrypt_content(b"hello skill", &key, &id, &mut r);
        assert_eq!(decrypt_content(&blob, &key, &id).unwrap(), b"hello skill");
        assert_eq!(
            decrypt_content(&blob, &ContentKey([0; 32]), &id),
            Err(CryptoError::Authentication)
        );
        let parsed = ContentBlob::from_bytes(&blob.to_bytes()).unwrap();
        assert_eq!(parsed, blob);
    }

    #[test]
    fn signature_round_trip() {
        let id = Identity::generate(&mut rng());
        let other = Identity::from_seed([3; 32]);
        let sig = sign_verdict(b"verdict", id.signing_key());
        assert!(verify_verdict(b"verdict", &sig, &id.verifier_key()).unwrap());
        assert!(!verify_verdict(b"verdicT", &sig, &id.verifier_key()).unwrap());
        assert!(!verify_verdict(b"verdict", &sig, &other.verifier_key()).unwrap());
        let mut short = sig.clone();
        short.signature.truncate(10);
        assert_eq!(
            verify_verdict(b"verdict", &short, &id.verifier_key()),
            Err(CryptoError::MalformedSignature)
        );
    }

    #[test]
    fn identity_is_seed_deterministic() {
        let a = Identity::from_seed([5; 32]);
        let b = Identity::from_seed([5; 32]);
        assert_eq!(a.exchange_key(), b.exchange_key());
        assert_eq!(a.verifier_key(), b.verifier_key());
        assert_eq!(
            KeyPair::from_secret_bytes(a.exchange().secret_bytes()).public_key(),
            a.exchange_key()
        );
    }
}
