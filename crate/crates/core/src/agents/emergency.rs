//! The emergency server: overrides consent and logs every override.

use std::collections::BTreeMap;

use rand_core::CryptoRngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::handshake::{Responder, ResponderOutcome, Session};
use super::{credential_backs, AgentError, AgentMessage, MessageType, Services};
use crate::abe::{apply_rewrap, make_rewrap_token, AbeUserKey, AttributeSet, Policy};
use crate::cas::Cid;
use crate::identity::{verify_credential, Credential, CredentialFault, Did, Identity};
use crate::ledger::TxKind;

/// Attempts made when a concurrent consent change bumps the version.
const MAX_ATTEMPTS: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmergencyRequestBody {
    pub cid: Cid,
    pub justification: String,
    pub attributes: AttributeSet,
    pub credential: Credential,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmergencyGrantBody {
    pub cid: Cid,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmergencyGrantRecord {
    pub cid: Cid,
    pub requester_did: Did,
    pub version: u64,
    pub access_height: u64,
    pub anchor_height: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmergencyServer {
    pub name: String,
    pub identity: Identity,
    pub credential: Credential,
    pub abe_key: AbeUserKey,
    /// Keyed by the doctor's pairwise DID.
    pub sessions: BTreeMap<String, Session>,
    pub grants: Vec<EmergencyGrantRecord>,
}

pub fn justification_hash(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

impl EmergencyServer {
    pub fn new(name: &str, identity: Identity, credential: Credential, abe_key: AbeUserKey) -> EmergencyServer {
        EmergencyServer {
            name: name.to_string(),
            identity,
            credential,
            abe_key,
            sessions: BTreeMap::new(),
            grants: Vec::new(),
        }
    }

    pub fn did(&self) -> &Did {
        &self.identity.did
    }

    pub fn responder(&self) -> Responder {
        Responder::new(&self.identity, &self.credential, None)
    }

    pub fn complete_handshake(&mut self, outcome: ResponderOutcome) {
        let session = outcome.session;
        self.sessions.insert(session.peer_pairwise.to_string(), session);
    }

    /// Widens the record's policy with the requester's attributes, logging
    /// the override before the new envelope is anchored.
    pub fn on_emergency_request<R: CryptoRngCore + ?Sized>(
        &mut self,
        msg: &AgentMessage,
        services: &Services,
        rng: &mut R,
    ) -> Result<AgentMessage, AgentError> {
        let session = self
            .sessions
            .get_mut(msg.from.as_str())
            .ok_or_else(|| AgentError::ChannelNotAuthenticated(msg.from.to_string()))?;
        session.accept(msg, MessageType::EmergencyRequest)?;
        let body: EmergencyRequestBody = msg.body_as()?;
        if let Some(reason) = verify_credential(&body.credential, services.ledger.as_ref()).reason {
            return Err(AgentError::CredentialInvalid(reason));
        }
        if body.credential.subject_did != session.peer_anywise || !credential_backs(&body.credential, &body.attributes) {
            return Err(AgentError::CredentialInvalid(CredentialFault::BadSignature));
        }
        if body.attributes.is_empty() {
            return Err(AgentError::ProtocolViolation("emergency request names no attributes".into()));
        }
        let requester = session.peer_anywise.clone();
        if services.ledger.record_owner(&body.cid).is_none() {
            return Err(crate::ledger::LedgerError::UnknownCid(body.cid).into());
        }
        let grantee = Policy::all_of(&body.attributes)?;

        let access = services.ledger.submit_signed(
            TxKind::EmergencyAccess {
                cid: body.cid,
                requester_did: requester.clone(),
                server_did: self.identity.did.clone(),
                justification_hash: justification_hash(&body.justification),
            },
            &self.identity,
        )?;
        let mut attempt = 0;
        let (next, anchor) = loop {
            attempt += 1;
            let (_, current) = services.latest_envelope(&body.cid)?;
            let policy = Policy::or(current.consent_policy().clone(), grantee.clone());
            let token = make_rewrap_token(
                &current,
                &self.abe_key,
                &policy,
                false,
                &self.identity,
                services.authority.as_ref(),
                rng,
            )?;
            let next = apply_rewrap(&current, &token, services.ledger.as_ref())?;
            match services.anchor_envelope(&next, &self.identity.did, &self.identity) {
                Ok(receipt) => break (next, receipt),
                Err(e) if e.is_version_gap() && attempt < MAX_ATTEMPTS => continue,
                Err(e) => return Err(e),
            }
        };
        self.grants.push(EmergencyGrantRecord {
            cid: body.cid,
            requester_did: requester,
            version: next.version,
            access_height: access.height,
            anchor_height: anchor.height,
        });
        let session = self.sessions.get(msg.from.as_str()).expect("looked up above");
        Ok(session.seal(
            MessageType::EmergencyGrant,
            &EmergencyGrantBody { cid: body.cid, version: next.version },
            rng,
        ))
    }
}
