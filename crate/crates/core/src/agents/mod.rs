//! Actor protocols: patient wallet, hospital agent, doctor wallet and
//! emergency server.
//!
//! Each actor is a plain value that consumes and produces signed
//! [`AgentMessage`]s. The functions in [`flows`] wire actors together
//! in-process and record every frame in a [`Transcript`]; the same messages
//! travel over a stream socket through [`message::write_frame`] and
//! [`message::read_frame`].
//!
//! The ledger, the object store and the attribute authority are shared
//! services, bundled in [`Services`].

use std::io;
use std::sync::Arc;

use rand_core::CryptoRngCore;
use thiserror::Error;

use crate::abe::{AbeAuthority, AbeError, AbeUserKey, AttributeSet};
use crate::cas::{CasError, Cid, ObjectStore};
use crate::envelope::{EnvelopeError, KeyEnvelope};
use crate::error::ErrorCode;
use crate::identity::{
    issue_credential, sign_challenge, verify_challenge_with_key, verify_credential, Credential,
    CredentialFault, Did, Identity, IdentityError, PairwiseDid, Signer,
};
use crate::ledger::{KeyAnchorEntry, Ledger, LedgerError, Receipt, TxKind};

pub mod deployment;
mod doctor;
mod emergency;
pub mod flows;
pub mod handshake;
mod hospital;
pub mod message;
mod patient;
mod registry;

pub use deployment::Deployment;
pub use doctor::DoctorWallet;
pub use emergency::{justification_hash, EmergencyGrantBody, EmergencyGrantRecord, EmergencyRequestBody, EmergencyServer};
pub use handshake::{AdmissionTerms, HandshakeState, Initiator, Responder, Session};
pub use hospital::{
    ConsentDecisionBody, ConsentOutcome, ConsentRelayBody, ConsentRequestBody, HospitalAgent, PendingRequest,
    RecordStoredBody, RewrapTokenBody,
};
pub use message::{AgentMessage, MessageType, Transcript};
pub use patient::{ConsentLogEntry, Decision, PatientWallet};
pub use registry::Registry;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("credential rejected: {0:?}")]
    CredentialInvalid(CredentialFault),
    #[error("key-control proof by {0} failed")]
    ChallengeFailed(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("no authenticated channel with {0}")]
    ChannelNotAuthenticated(String),
    #[error("attribute {0} does not occur in the current policy")]
    AttributeNotInPolicy(String),
    #[error("record is empty")]
    EmptyRecord,
    #[error("unknown consent request {0}")]
    UnknownRequest(String),
    #[error("anchored envelope does not match the ledger: {0}")]
    AnchorMismatch(String),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error(transparent)]
    Abe(#[from] AbeError),
    #[error(transparent)]
    Cas(#[from] CasError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

impl AgentError {
    pub fn code(&self) -> ErrorCode {
        match self {
            AgentError::CredentialInvalid(_) => ErrorCode::CredentialInvalid,
            AgentError::ChallengeFailed(_) => ErrorCode::ChallengeFailed,
            AgentError::ProtocolViolation(_) => ErrorCode::ProtocolViolation,
            AgentError::ChannelNotAuthenticated(_) => ErrorCode::ChannelNotAuthenticated,
            AgentError::AttributeNotInPolicy(_) => ErrorCode::AttributeNotInPolicy,
            AgentError::EmptyRecord => ErrorCode::EmptyRecord,
            AgentError::UnknownRequest(_) => ErrorCode::UnknownRequest,
            AgentError::AnchorMismatch(_) => ErrorCode::IntegrityViolation,
            AgentError::Envelope(e) => e.code(),
            AgentError::Abe(e) => e.code(),
            AgentError::Cas(e) => e.code(),
            AgentError::Ledger(e) => e.code(),
            AgentError::Identity(e) => e.code(),
            AgentError::Io(_) => ErrorCode::Io,
        }
    }

    /// True for the optimistic-concurrency failure that a refetch resolves.
    pub fn is_version_gap(&self) -> bool {
        matches!(
            self,
            AgentError::Abe(AbeError::VersionGap { .. }) | AgentError::Ledger(LedgerError::VersionGap { .. })
        )
    }
}

/// Shared infrastructure every actor talks to.
#[derive(Clone)]
pub struct Services {
    pub ledger: Arc<Ledger>,
    pub cas: Arc<dyn ObjectStore>,
    pub authority: Arc<AbeAuthority>,
}

impl Services {
    pub fn new(ledger: Ledger, cas: impl ObjectStore + 'static, authority: AbeAuthority) -> Services {
        Services { ledger: Arc::new(ledger), cas: Arc::new(cas), authority: Arc::new(authority) }
    }

    /// Latest anchored envelope for `cid`, checked against its anchor.
    pub fn latest_envelope(&self, cid: &Cid) -> Result<(KeyAnchorEntry, KeyEnvelope), AgentError> {
        let anchor = self.ledger.latest_key_anchor(cid)?;
        let env = self.envelope_for(&anchor)?;
        Ok((anchor, env))
    }

    pub fn envelope_for(&self, anchor: &KeyAnchorEntry) -> Result<KeyEnvelope, AgentError> {
        let bytes = self.cas.get(&anchor.envelope_hash)?;
        let env = KeyEnvelope::from_bytes(&bytes)?;
        if env.cid != anchor.cid || env.version != anchor.version {
            return Err(AgentError::AnchorMismatch(format!(
                "{} v{} holds {} v{}",
                anchor.cid, anchor.version, env.cid, env.version
            )));
        }
        Ok(env)
    }

    /// Stores the envelope and anchors it under `signer`.
    pub fn anchor_envelope<S: Signer + ?Sized>(
        &self,
        env: &KeyEnvelope,
        authorized_by: &Did,
        signer: &S,
    ) -> Result<Receipt, AgentError> {
        let envelope_hash = self.cas.put(&env.to_bytes())?;
        Ok(self.ledger.submit_signed(
            TxKind::KeyAnchor {
                cid: env.cid,
                envelope_hash,
                version: env.version,
                authorized_by_did: authorized_by.clone(),
            },
            signer,
        )?)
    }
}

/// Anchors a DID registration signed by the identity itself.
pub fn register_identity(ledger: &Ledger, identity: &Identity) -> Result<Receipt, AgentError> {
    Ok(ledger.submit_signed(
        TxKind::DidRegistration {
            did: identity.did.clone(),
            public_key: identity.keys.public_key(),
            did_document_hash: identity.document.hash(),
        },
        identity,
    )?)
}

/// Issues a credential and anchors its hash, signed by the issuer.
pub fn issue_anchored<R: CryptoRngCore + ?Sized>(
    issuer: &Identity,
    ledger: &Ledger,
    subject: &Did,
    claims: &[(&str, &str)],
    rng: &mut R,
) -> Result<Credential, AgentError> {
    let claims = claims.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    let credential = issue_credential(issuer, subject, claims, ledger.now(), rng)?;
    ledger.submit_signed(
        TxKind::CredentialAnchor { credential_hash: credential.hash(), issuer_did: issuer.did.clone() },
        issuer,
    )?;
    Ok(credential)
}

/// The attribute that names a patient inside policies. It is built from the
/// patient's pairwise DID with the hospital, never the anywise one.
pub fn patient_attribute(pairwise: &Did) -> String {
    format!("patient:{}", pairwise.method_specific_id())
}

/// Authority-side issuance of a patient key: the admission credential must
/// be valid, anchored and bound to the key that answers a fresh challenge.
pub fn issue_patient_key<R: CryptoRngCore + ?Sized>(
    services: &Services,
    admission: &Credential,
    holder: &PairwiseDid,
    rng: &mut R,
) -> Result<AbeUserKey, AgentError> {
    if let Some(reason) = verify_credential(admission, services.ledger.as_ref()).reason {
        return Err(AgentError::CredentialInvalid(reason));
    }
    if admission.claim("type") != Some("admission") || admission.subject_did != holder.did {
        return Err(AgentError::CredentialInvalid(CredentialFault::BadSignature));
    }
    let mut nonce = [0u8; 32];
    rng.fill_bytes(&mut nonce);
    let response = sign_challenge(holder, &nonce);
    if !verify_challenge_with_key(&holder.public_key(), &nonce, &response) {
        return Err(AgentError::ChallengeFailed(holder.did.to_string()));
    }
    let attrs = AttributeSet::new([patient_attribute(&holder.did)])?;
    Ok(services.authority.issue_key(&attrs)?)
}

/// Splits `kind:value` attributes into credential claims; several values of
/// one kind are joined with commas.
pub(crate) fn attributes_to_claims(attrs: &AttributeSet) -> Result<Vec<(String, String)>, AgentError> {
    let mut claims: std::collections::BTreeMap<String, Vec<String>> = Default::default();
    for name in attrs.iter() {
        let (kind, value) = name
            .split_once(':')
            .ok_or_else(|| AbeError::InvalidAttributeName(format!("{name} (expected kind:value)")))?;
        if kind == "type" {
            return Err(AbeError::InvalidAttributeName(name.clone()).into());
        }
        claims.entry(kind.to_string()).or_default().push(value.to_string());
    }
    Ok(claims.into_iter().map(|(k, v)| (k, v.join(","))).collect())
}

/// True when every attribute is backed by a claim of the credential.
pub(crate) fn credential_backs(credential: &Credential, attrs: &AttributeSet) -> bool {
    attrs.iter().all(|name| {
        name.split_once(':').is_some_and(|(kind, value)| {
            credential.claim(kind).is_some_and(|v| v.split(',').any(|x| x == value))
        })
    })
}
