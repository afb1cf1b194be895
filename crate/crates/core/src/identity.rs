//! Decentralized identifiers, Ed25519 keys and verifiable credentials.
//!
//! A DID is `did:ex:` followed by the base58 of the first 20 bytes of
//! `SHA-256(public_key)`, so each DID is bound to exactly one key and can be
//! checked against a presented key without a lookup. Anywise DIDs are
//! registered on the ledger; pairwise DIDs stay inside the two wallets that
//! share them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ed25519_dalek::{Signature, Signer as _, SigningKey, Verifier as _, VerifyingKey};
use rand_core::CryptoRngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::canonical::{self, b64_array};
use crate::error::ErrorCode;

const DID_PREFIX: &str = "did:ex:";
const CHALLENGE_DOMAIN: &[u8] = b"sehr-challenge\0";

pub type PublicKey = [u8; 32];
pub type SignatureBytes = [u8; 64];

#[derive(Debug, Error)]
pub enum IdentityError {
    #[error("credential claims are empty")]
    EmptyClaims,
    #[error("invalid did `{0}`")]
    InvalidDid(String),
    #[error("invalid public key")]
    InvalidKey,
}

impl IdentityError {
    pub fn code(&self) -> ErrorCode {
        match self {
            IdentityError::EmptyClaims => ErrorCode::EmptyClaims,
            IdentityError::InvalidDid(_) | IdentityError::InvalidKey => ErrorCode::Malformed,
        }
    }
}

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Did(String);

impl Did {
    pub fn from_public_key(public_key: &PublicKey) -> Did {
        let digest = Sha256::digest(public_key);
        Did(format!("{DID_PREFIX}{}", bs58::encode(&digest[..20]).into_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The base58 part after `did:ex:`.
    pub fn method_specific_id(&self) -> &str {
        &self.0[DID_PREFIX.len()..]
    }

    pub fn is_controlled_by(&self, public_key: &PublicKey) -> bool {
        Did::from_public_key(public_key) == *self
    }
}

impl fmt::Display for Did {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Did {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Did({})", self.0)
    }
}

impl FromStr for Did {
    type Err = IdentityError;

    fn from_str(s: &str) -> Result<Did, IdentityError> {
        let id = s
            .strip_prefix(DID_PREFIX)
            .ok_or_else(|| IdentityError::InvalidDid(s.to_string()))?;
        match bs58::decode(id).into_vec() {
            Ok(bytes) if bytes.len() == 20 && bs58::encode(&bytes).into_string() == id => Ok(Did(s.to_string())),
            _ => Err(IdentityError::InvalidDid(s.to_string())),
        }
    }
}

impl Serialize for Did {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for Did {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Ed25519 signing key. Serialized (secret included) only into wallet files.
#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
}

impl KeyPair {
    pub fn generate<R: CryptoRngCore + ?Sized>(rng: &mut R) -> KeyPair {
        KeyPair { signing: SigningKey::generate(rng) }
    }

    pub fn from_seed(seed: [u8; 32]) -> KeyPair {
        KeyPair { signing: SigningKey::from_bytes(&seed) }
    }

    pub fn public_key(&self) -> PublicKey {
        self.signing.verifying_key().to_bytes()
    }

    pub fn sign(&self, msg: &[u8]) -> SignatureBytes {
        self.signing.sign(msg).to_bytes()
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyPair(public={})", hex::encode(self.public_key()))
    }
}

#[derive(Serialize, Deserialize)]
struct KeyPairWire {
    #[serde(with = "b64_array")]
    secret_key: [u8; 32],
    #[serde(with = "b64_array")]
    public_key: [u8; 32],
}

impl Serialize for KeyPair {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        KeyPairWire { secret_key: self.signing.to_bytes(), public_key: self.public_key() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for KeyPair {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let wire = KeyPairWire::deserialize(d)?;
        let kp = KeyPair::from_seed(wire.secret_key);
        if kp.public_key() != wire.public_key {
            return Err(serde::de::Error::custom("public key does not match secret key"));
        }
        Ok(kp)
    }
}

pub fn verify_signature(public_key: &PublicKey, msg: &[u8], signature: &SignatureBytes) -> bool {
    let Ok(vk) = VerifyingKey::from_bytes(public_key) else {
        return false;
    };
    vk.verify(msg, &Signature::from_bytes(signature)).is_ok()
}

/// Anything that signs under a DID.
pub trait Signer {
    fn did(&self) -> &Did;
    fn public_key(&self) -> PublicKey;
    fn sign(&self, msg: &[u8]) -> SignatureBytes;
}

/// Maps a DID to its current verification key.
pub trait KeyResolver {
    fn public_key_of(&self, did: &Did) -> Option<PublicKey>;
}

/// Read access to the on-chain state needed for credential checks.
pub trait LedgerView: KeyResolver {
    fn is_credential_anchored(&self, credential_hash: &[u8; 32]) -> bool;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DidDocument {
    pub did: Did,
    #[serde(with = "b64_array")]
    pub public_key: PublicKey,
    pub service_endpoint: String,
}

impl DidDocument {
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(canonical::to_canonical_bytes(self)).into()
    }
}

/// An anywise identity: keys, DID and DID document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Identity {
    pub keys: KeyPair,
    pub did: Did,
    pub document: DidDocument,
}

impl Signer for Identity {
    fn did(&self) -> &Did {
        &self.did
    }

    fn public_key(&self) -> PublicKey {
        self.keys.public_key()
    }

    fn sign(&self, msg: &[u8]) -> SignatureBytes {
        self.keys.sign(msg)
    }
}

/// Creates an identity; deterministic when `seed` is given.
pub fn create_identity<R: CryptoRngCore + ?Sized>(
    seed: Option<[u8; 32]>,
    service_endpoint: &str,
    rng: &mut R,
) -> Identity {
    let keys = match seed {
        Some(seed) => KeyPair::from_seed(seed),
        None => KeyPair::generate(rng),
    };
    let did = Did::from_public_key(&keys.public_key());
    let document = DidDocument {
        did: did.clone(),
        public_key: keys.public_key(),
        service_endpoint: service_endpoint.to_string(),
    };
    Identity { keys, did, document }
}

/// A relationship-specific DID known only to us and `peer_did`'s holder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairwiseDid {
    pub did: Did,
    pub keys: KeyPair,
    pub peer_did: Did,
}

impl Signer for PairwiseDid {
    fn did(&self) -> &Did {
        &self.did
    }

    fn public_key(&self) -> PublicKey {
        self.keys.public_key()
    }

    fn sign(&self, msg: &[u8]) -> SignatureBytes {
        self.keys.sign(msg)
    }
}

/// Fresh keypair and DID for one relationship.
pub fn create_pairwise<R: CryptoRngCore + ?Sized>(rng: &mut R, peer: &Did) -> PairwiseDid {
    let keys = KeyPair::generate(rng);
    PairwiseDid {
        did: Did::from_public_key(&keys.public_key()),
        keys,
        peer_did: peer.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credential {
    pub id: String,
    pub issuer_did: Did,
    pub subject_did: Did,
    pub claims: BTreeMap<String, String>,
    pub issued_at: u64,
    #[serde(with = "b64_array")]
    pub signature: SignatureBytes,
}

#[derive(Serialize)]
struct UnsignedCredential<'a> {
    id: &'a str,
    issuer_did: &'a Did,
    subject_did: &'a Did,
    claims: &'a BTreeMap<String, String>,
    issued_at: u64,
}

impl Credential {
    fn signing_bytes(&self) -> Vec<u8> {
        canonical::to_canonical_bytes(&UnsignedCredential {
            id: &self.id,
            issuer_did: &self.issuer_did,
            subject_did: &self.subject_did,
            claims: &self.claims,
            issued_at: self.issued_at,
        })
    }

    /// SHA-256 of the canonical serialization, signature included.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(canonical::to_canonical_bytes(self)).into()
    }

    pub fn claim(&self, name: &str) -> Option<&str> {
        self.claims.get(name).map(String::as_str)
    }
}

pub fn issue_credential<S, R>(
    issuer: &S,
    subject: &Did,
    claims: BTreeMap<String, String>,
    issued_at: u64,
    rng: &mut R,
) -> Result<Credential, IdentityError>
where
    S: Signer + ?Sized,
    R: CryptoRngCore + ?Sized,
{
    if claims.is_empty() {
        return Err(IdentityError::EmptyClaims);
    }
    let mut id_bytes = [0u8; 16];
    rng.fill_bytes(&mut id_bytes);
    let mut credential = Credential {
        id: format!("urn:sehr:credential:{}", hex::encode(id_bytes)),
        issuer_did: issuer.did().clone(),
        subject_did: subject.clone(),
        claims,
        issued_at,
        signature: [0u8; 64],
    };
    credential.signature = issuer.sign(&credential.signing_bytes());
    Ok(credential)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CredentialFault {
    UnknownIssuer,
    BadSignature,
    UnanchoredCredential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CredentialCheck {
    pub valid: bool,
    pub reason: Option<CredentialFault>,
}

impl CredentialCheck {
    fn fail(reason: CredentialFault) -> CredentialCheck {
        CredentialCheck { valid: false, reason: Some(reason) }
    }
}

/// Signature against the ledger-resolved issuer key AND an on-chain anchor.
pub fn verify_credential<L: LedgerView + ?Sized>(c: &Credential, ledger: &L) -> CredentialCheck {
    let Some(issuer_key) = ledger.public_key_of(&c.issuer_did) else {
        return CredentialCheck::fail(CredentialFault::UnknownIssuer);
    };
    if !verify_signature(&issuer_key, &c.signing_bytes(), &c.signature) {
        return CredentialCheck::fail(CredentialFault::BadSignature);
    }
    if !ledger.is_credential_anchored(&c.hash()) {
        return CredentialCheck::fail(CredentialFault::UnanchoredCredential);
    }
    CredentialCheck { valid: true, reason: None }
}

fn challenge_message(nonce: &[u8; 32]) -> Vec<u8> {
    let mut msg = CHALLENGE_DOMAIN.to_vec();
    msg.extend_from_slice(nonce);
    msg
}

/// Proof of control: a signature over a peer-chosen nonce.
pub fn sign_challenge<S: Signer + ?Sized>(keys: &S, nonce: &[u8; 32]) -> SignatureBytes {
    keys.sign(&challenge_message(nonce))
}

pub fn verify_challenge<K: KeyResolver + ?Sized>(
    did: &Did,
    nonce: &[u8; 32],
    signature: &SignatureBytes,
    resolver: &K,
) -> bool {
    resolver
        .public_key_of(did)
        .is_some_and(|pk| verify_challenge_with_key(&pk, nonce, signature))
}

pub fn verify_challenge_with_key(public_key: &PublicKey, nonce: &[u8; 32], signature: &SignatureBytes) -> bool {
    verify_signature(public_key, &challenge_message(nonce), signature)
}
