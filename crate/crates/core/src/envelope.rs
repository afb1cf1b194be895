//! Convergent record encryption and the two-layer key envelope.
//!
//! A record's data key and GCM nonce are the first 128 and the following 96
//! bits of `SHA-256(plaintext)`, so encryption is deterministic and equal
//! records produce equal ciphertexts (and equal CIDs). The usual convergent
//! encryption caveat applies: anyone who can guess a record's full content can
//! confirm the guess by re-encrypting it.
//!
//! The data key never meets the attribute scheme directly. It is wrapped
//! under a random key-encryption key (KEK), and only the KEK is encrypted
//! under the policy:
//!
//! ```text
//! KeyEnvelope
//!   wrapped_kek          = abe_encrypt(KEK, policy OR emergency:override)
//!   kek_wrapped_data_key = AES-128-GCM(KEK, kek_nonce, data_key)
//! ```
//!
//! A policy change re-wraps the KEK and leaves the inner layer alone, which
//! is what lets a proxy splice in a new envelope without ever holding a key.

use std::fmt;

use rand_core::CryptoRngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::abe::{abe_decrypt, abe_encrypt, AbeCiphertext, AbeError, AbeUserKey, AttributeKeySource, Policy};
use crate::aead::{self, NONCE_LEN, TAG_LEN};
use crate::canonical::{self, b64, b64_array};
use crate::cas::Cid;
use crate::error::ErrorCode;
use crate::key_tap;

#[derive(Debug, Error)]
pub enum EnvelopeError {
    #[error("record authentication failed")]
    AuthenticationFailure,
    #[error("attributes do not satisfy the envelope policy")]
    PolicyNotSatisfied,
    #[error("envelope failed authentication")]
    EnvelopeCorrupt,
    #[error("malformed policy: {0}")]
    MalformedPolicy(String),
    #[error("attribute `{0}` is not in the authority's universe")]
    UnknownAttribute(String),
    #[error("malformed envelope: {0}")]
    Malformed(String),
}

impl EnvelopeError {
    pub fn code(&self) -> ErrorCode {
        match self {
            EnvelopeError::AuthenticationFailure => ErrorCode::AuthenticationFailure,
            EnvelopeError::PolicyNotSatisfied => ErrorCode::PolicyNotSatisfied,
            EnvelopeError::EnvelopeCorrupt => ErrorCode::EnvelopeCorrupt,
            EnvelopeError::MalformedPolicy(_) => ErrorCode::MalformedPolicy,
            EnvelopeError::UnknownAttribute(_) => ErrorCode::UnknownAttribute,
            EnvelopeError::Malformed(_) => ErrorCode::Malformed,
        }
    }

    fn from_abe(err: AbeError) -> EnvelopeError {
        match err {
            AbeError::PolicyNotSatisfied => EnvelopeError::PolicyNotSatisfied,
            AbeError::ShareCorrupt => EnvelopeError::EnvelopeCorrupt,
            AbeError::UnknownAttribute(a) => EnvelopeError::UnknownAttribute(a),
            AbeError::Envelope(e) => e,
            other => EnvelopeError::MalformedPolicy(other.to_string()),
        }
    }
}

/// 128-bit record key, the truncated SHA-256 of the plaintext.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct DataKey([u8; 16]);

impl DataKey {
    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    pub fn from_bytes(bytes: [u8; 16]) -> DataKey {
        DataKey(bytes)
    }
}

impl fmt::Debug for DataKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("DataKey(..)")
    }
}

/// Key-encryption key. Lives only inside seal, open and rewrap.
#[derive(Clone, Copy)]
pub(crate) struct Kek([u8; 16]);

impl Kek {
    pub(crate) fn generate<R: CryptoRngCore + ?Sized>(rng: &mut R) -> Kek {
        let mut bytes = [0u8; 16];
        rng.fill_bytes(&mut bytes);
        key_tap::record(&bytes);
        Kek(bytes)
    }
}

pub type RecordNonce = [u8; NONCE_LEN];

pub fn derive_data_key(plaintext: &[u8]) -> (DataKey, RecordNonce) {
    let digest = Sha256::digest(plaintext);
    let mut key = [0u8; 16];
    key.copy_from_slice(&digest[..16]);
    let mut nonce = [0u8; NONCE_LEN];
    nonce.copy_from_slice(&digest[16..16 + NONCE_LEN]);
    key_tap::record(&key);
    (DataKey(key), nonce)
}

#[derive(Clone, PartialEq, Eq)]
pub struct RecordCiphertext {
    pub nonce: RecordNonce,
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl RecordCiphertext {
    /// Stored form: `nonce || ciphertext || tag`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(NONCE_LEN + self.ciphertext.len() + TAG_LEN);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<RecordCiphertext, EnvelopeError> {
        if bytes.len() < NONCE_LEN + TAG_LEN {
            return Err(EnvelopeError::Malformed("record ciphertext too short".into()));
        }
        let (nonce, rest) = bytes.split_at(NONCE_LEN);
        let (ciphertext, tag) = rest.split_at(rest.len() - TAG_LEN);
        Ok(RecordCiphertext {
            nonce: nonce.try_into().expect("split at nonce length"),
            ciphertext: ciphertext.to_vec(),
            tag: tag.try_into().expect("split at tag length"),
        })
    }
}

impl fmt::Debug for RecordCiphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RecordCiphertext({} bytes)", self.ciphertext.len())
    }
}

/// Deterministic authenticated encryption of a record under its own hash.
pub fn encrypt_record(plaintext: &[u8]) -> (RecordCiphertext, DataKey) {
    let (key, nonce) = derive_data_key(plaintext);
    let mut sealed = aead::seal(&key.0, &nonce, &[], plaintext);
    let tag: [u8; TAG_LEN] = sealed.split_off(sealed.len() - TAG_LEN).try_into().expect("gcm tag");
    (RecordCiphertext { nonce, ciphertext: sealed, tag }, key)
}

pub fn decrypt_record(ct: &RecordCiphertext, key: &DataKey) -> Result<Vec<u8>, EnvelopeError> {
    let mut sealed = ct.ciphertext.clone();
    sealed.extend_from_slice(&ct.tag);
    let plaintext = aead::open(&key.0, &ct.nonce, &[], &sealed).ok_or(EnvelopeError::AuthenticationFailure)?;
    let (expected, nonce) = derive_data_key(&plaintext);
    if expected != *key || nonce != ct.nonce {
        return Err(EnvelopeError::AuthenticationFailure);
    }
    Ok(plaintext)
}

/// Policy-gated wrapping of one record's data key. The unit of consent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyEnvelope {
    pub cid: Cid,
    pub version: u64,
    pub policy: Policy,
    pub wrapped_kek: AbeCiphertext,
    pub kek_nonce: [u8; NONCE_LEN],
    pub kek_wrapped_data_key: Vec<u8>,
}

fn kek_aad(cid: &Cid) -> Vec<u8> {
    let mut aad = b"sehr-kek-wrap\0".to_vec();
    aad.extend_from_slice(cid.to_string().as_bytes());
    aad
}

#[derive(Serialize, Deserialize)]
struct EnvelopeWire {
    cid: Cid,
    version: u64,
    policy: Policy,
    #[serde(with = "b64")]
    wrapped_kek: Vec<u8>,
    #[serde(with = "b64_array")]
    kek_nonce: [u8; NONCE_LEN],
    #[serde(with = "b64")]
    kek_wrapped_data_key: Vec<u8>,
}

impl KeyEnvelope {
    /// The consent policy without the implicit emergency branch.
    pub fn consent_policy(&self) -> &Policy {
        self.policy.strip_emergency_override().unwrap_or(&self.policy)
    }

    /// Canonical JSON; these exact bytes are stored and anchored.
    pub fn to_bytes(&self) -> Vec<u8> {
        canonical::to_canonical_bytes(&EnvelopeWire {
            cid: self.cid,
            version: self.version,
            policy: self.policy.clone(),
            wrapped_kek: self.wrapped_kek.to_bytes(),
            kek_nonce: self.kek_nonce,
            kek_wrapped_data_key: self.kek_wrapped_data_key.clone(),
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<KeyEnvelope, EnvelopeError> {
        let wire: EnvelopeWire =
            serde_json::from_slice(bytes).map_err(|e| EnvelopeError::Malformed(e.to_string()))?;
        let wrapped_kek = AbeCiphertext::from_bytes(&wire.wrapped_kek)
            .map_err(|e| EnvelopeError::Malformed(e.to_string()))?;
        if *wrapped_kek.policy() != wire.policy {
            return Err(EnvelopeError::Malformed("policy differs from the wrapped key's policy".into()));
        }
        if wire.version == 0 {
            return Err(EnvelopeError::Malformed("version must be at least 1".into()));
        }
        Ok(KeyEnvelope {
            cid: wire.cid,
            version: wire.version,
            policy: wire.policy,
            wrapped_kek,
            kek_nonce: wire.kek_nonce,
            kek_wrapped_data_key: wire.kek_wrapped_data_key,
        })
    }

    /// SHA-256 of the canonical bytes, i.e. the envelope's own CID.
    pub fn hash(&self) -> Cid {
        Cid::of(&self.to_bytes())
    }
}

impl Serialize for KeyEnvelope {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let value: serde_json::Value = serde_json::from_slice(&self.to_bytes()).expect("canonical json");
        value.serialize(s)
    }
}

impl<'de> Deserialize<'de> for KeyEnvelope {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let value = serde_json::Value::deserialize(d)?;
        let bytes = serde_json::to_vec(&value).map_err(serde::de::Error::custom)?;
        KeyEnvelope::from_bytes(&bytes).map_err(serde::de::Error::custom)
    }
}

/// Wraps `kek` under the emergency-extended `policy` around an existing inner layer.
pub(crate) fn wrap_with_kek<K, R>(
    kek: &Kek,
    inner: (&[u8; NONCE_LEN], &[u8]),
    policy: &Policy,
    keys: &K,
    cid: Cid,
    version: u64,
    rng: &mut R,
) -> Result<KeyEnvelope, EnvelopeError>
where
    K: AttributeKeySource + ?Sized,
    R: CryptoRngCore + ?Sized,
{
    policy.validate().map_err(EnvelopeError::from_abe)?;
    if version == 0 {
        return Err(EnvelopeError::Malformed("version must be at least 1".into()));
    }
    let extended = policy.with_emergency_override();
    let wrapped_kek = abe_encrypt(&kek.0, &extended, keys, rng).map_err(EnvelopeError::from_abe)?;
    Ok(KeyEnvelope {
        cid,
        version,
        policy: extended,
        wrapped_kek,
        kek_nonce: *inner.0,
        kek_wrapped_data_key: inner.1.to_vec(),
    })
}

pub(crate) fn wrap_data_key<R: CryptoRngCore + ?Sized>(
    kek: &Kek,
    data_key: &DataKey,
    cid: &Cid,
    rng: &mut R,
) -> ([u8; NONCE_LEN], Vec<u8>) {
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let sealed = aead::seal(&kek.0, &nonce, &kek_aad(cid), &data_key.0);
    (nonce, sealed)
}

/// Seals `data_key` for `policy`; the stored policy is `policy OR emergency:override`.
pub fn seal_envelope<K, R>(
    data_key: &DataKey,
    policy: &Policy,
    keys: &K,
    cid: Cid,
    version: u64,
    rng: &mut R,
) -> Result<KeyEnvelope, EnvelopeError>
where
    K: AttributeKeySource + ?Sized,
    R: CryptoRngCore + ?Sized,
{
    let kek = Kek::generate(rng);
    let (nonce, sealed) = wrap_data_key(&kek, data_key, &cid, rng);
    wrap_with_kek(&kek, (&nonce, &sealed), policy, keys, cid, version, rng)
}

pub(crate) fn open_kek(env: &KeyEnvelope, user_key: &AbeUserKey) -> Result<Kek, EnvelopeError> {
    abe_decrypt(&env.wrapped_kek, user_key)
        .map(Kek)
        .map_err(EnvelopeError::from_abe)
}

pub(crate) fn unwrap_data_key(env: &KeyEnvelope, kek: &Kek) -> Result<DataKey, EnvelopeError> {
    let plain = aead::open(&kek.0, &env.kek_nonce, &kek_aad(&env.cid), &env.kek_wrapped_data_key)
        .ok_or(EnvelopeError::EnvelopeCorrupt)?;
    let bytes: [u8; 16] = plain.try_into().map_err(|_| EnvelopeError::EnvelopeCorrupt)?;
    Ok(DataKey(bytes))
}

pub fn open_envelope(env: &KeyEnvelope, user_key: &AbeUserKey) -> Result<DataKey, EnvelopeError> {
    let kek = open_kek(env, user_key)?;
    unwrap_data_key(env, &kek)
}
