//! The hospital agent: admits patients, stores records and proxies rewraps.
//!
//! The hospital never holds a key that opens an envelope. It derives a data
//! key and a KEK once, while sealing a new record, and drops both before
//! returning.

use std::collections::BTreeMap;

use rand_core::CryptoRngCore;
use serde::{Deserialize, Serialize};

use super::handshake::{AdmissionTerms, Responder, ResponderOutcome, Session};
use super::{
    attributes_to_claims, credential_backs, issue_anchored, patient_attribute, AgentError, AgentMessage,
    MessageType, Services,
};
use crate::abe::{apply_rewrap, AbeUserKey, AttributeSet, Policy, RewrapToken};
use crate::cas::Cid;
use crate::envelope::{encrypt_record, seal_envelope, KeyEnvelope};
use crate::identity::{verify_credential, Credential, CredentialFault, Did, Identity, KeyResolver, PublicKey};
use crate::ledger::{Receipt, TxKind};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordStoredBody {
    pub cid: Cid,
    pub version: u64,
}

/// Doctor to hospital.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsentRequestBody {
    pub cid: Cid,
    pub requested_attributes: AttributeSet,
    pub purpose: String,
    pub credential: Credential,
}

/// Hospital to patient: the request as relayed, with its id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentRelayBody {
    pub request_id: String,
    pub cid: Cid,
    pub requester_did: Did,
    pub requested_attributes: AttributeSet,
    pub purpose: String,
    pub credential: Credential,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsentDecisionBody {
    pub request_id: String,
    pub decision: String,
    pub attributes: AttributeSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewrapTokenBody {
    pub request_id: Option<String>,
    pub token: RewrapToken,
}

/// A consent request waiting for the patient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PendingRequest {
    pub relay: ConsentRelayBody,
    pub patient_pairwise: Did,
    pub decision: Option<String>,
}

/// Result of a consent round as seen by the hospital.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentOutcome {
    pub request_id: String,
    pub decision: String,
    pub attributes: AttributeSet,
    pub version: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HospitalAgent {
    pub name: String,
    pub identity: Identity,
    pub credential: Credential,
    /// Keyed by the patient's pairwise DID.
    pub patients: BTreeMap<String, Session>,
    /// Keyed by the doctor's pairwise DID.
    pub doctors: BTreeMap<String, Session>,
    pub pending: BTreeMap<String, PendingRequest>,
    pub next_request: u64,
}

/// Resolves the patient's pairwise DID from the session alone.
struct SessionKeys<'a>(&'a Session);

impl KeyResolver for SessionKeys<'_> {
    fn public_key_of(&self, did: &Did) -> Option<PublicKey> {
        (*did == self.0.peer_pairwise).then_some(self.0.peer_pairwise_key)
    }
}

impl HospitalAgent {
    pub fn new(name: &str, identity: Identity, credential: Credential) -> HospitalAgent {
        HospitalAgent {
            name: name.to_string(),
            identity,
            credential,
            patients: BTreeMap::new(),
            doctors: BTreeMap::new(),
            pending: BTreeMap::new(),
            next_request: 1,
        }
    }

    pub fn did(&self) -> &Did {
        &self.identity.did
    }

    pub fn admission_responder(&self) -> Responder {
        Responder::new(
            &self.identity,
            &self.credential,
            Some(AdmissionTerms { hospital: self.name.clone(), role: "patient".into() }),
        )
    }

    pub fn doctor_responder(&self) -> Responder {
        Responder::new(&self.identity, &self.credential, None)
    }

    /// Keeps the patient session and registers the patient's attribute so
    /// records can be sealed to it.
    pub fn complete_admission(&mut self, outcome: ResponderOutcome, services: &Services) -> Result<(), AgentError> {
        let session = outcome.session;
        services
            .authority
            .register_attributes(&AttributeSet::new([patient_attribute(&session.peer_pairwise)])?);
        self.patients.insert(session.peer_pairwise.to_string(), session);
        Ok(())
    }

    pub fn complete_doctor(&mut self, outcome: ResponderOutcome) {
        let session = outcome.session;
        self.doctors.insert(session.peer_pairwise.to_string(), session);
    }

    /// Issues the doctor's license and requests a matching attribute key.
    pub fn onboard_doctor<R: CryptoRngCore + ?Sized>(
        &self,
        services: &Services,
        doctor: &Did,
        attrs: &AttributeSet,
        rng: &mut R,
    ) -> Result<(Credential, AbeUserKey), AgentError> {
        let claims = attributes_to_claims(attrs)?;
        let mut pairs: Vec<(&str, &str)> = vec![("type", "license")];
        pairs.extend(claims.iter().map(|(k, v)| (k.as_str(), v.as_str())));
        let license = issue_anchored(&self.identity, &services.ledger, doctor, &pairs, rng)?;
        let key = services.authority.issue_key(attrs)?;
        Ok((license, key))
    }

    /// Issues the emergency server's credential.
    pub fn certify_emergency_server<R: CryptoRngCore + ?Sized>(
        &self,
        services: &Services,
        server: &Did,
        rng: &mut R,
    ) -> Result<Credential, AgentError> {
        issue_anchored(
            &self.identity,
            &services.ledger,
            server,
            &[("type", "emergency_server"), ("hospital", &self.name)],
            rng,
        )
    }

    fn patient_session(&self, patient_pairwise: &Did) -> Result<&Session, AgentError> {
        self.patients
            .get(patient_pairwise.as_str())
            .ok_or_else(|| AgentError::ChannelNotAuthenticated(patient_pairwise.to_string()))
    }

    /// Pairwise DID of the admitted patient whose anywise DID is `owner`.
    pub fn patient_for_owner(&self, owner: &Did) -> Option<&Session> {
        self.patients.values().find(|s| s.peer_anywise == *owner)
    }

    /// Encrypts, stores and anchors a record sealed to the patient alone.
    pub fn store_record<R: CryptoRngCore + ?Sized>(
        &self,
        services: &Services,
        patient_pairwise: &Did,
        plaintext: &[u8],
        rng: &mut R,
    ) -> Result<(Cid, KeyEnvelope, AgentMessage), AgentError> {
        let session = self.patient_session(patient_pairwise)?;
        if session.state != super::HandshakeState::Admitted {
            return Err(AgentError::ProtocolViolation("patient is not admitted".into()));
        }
        if plaintext.is_empty() {
            return Err(AgentError::EmptyRecord);
        }
        let (ct, data_key) = encrypt_record(plaintext);
        let cid = services.cas.put(&ct.to_bytes())?;
        services.ledger.submit_signed(
            TxKind::RecordAnchor { cid, patient_did: session.peer_anywise.clone() },
            &self.identity,
        )?;
        let policy = Policy::attr(patient_attribute(&session.peer_pairwise))?;
        let env = seal_envelope(&data_key, &policy, services.authority.as_ref(), cid, 1, rng)?;
        services.anchor_envelope(&env, &self.identity.did, &self.identity)?;
        let notice = session.seal(MessageType::RecordStored, &RecordStoredBody { cid, version: 1 }, rng);
        Ok((cid, env, notice))
    }

    /// Accepts a doctor's request and relays it to the record's owner.
    pub fn on_consent_request<R: CryptoRngCore + ?Sized>(
        &mut self,
        msg: &AgentMessage,
        services: &Services,
        rng: &mut R,
    ) -> Result<(String, AgentMessage), AgentError> {
        let doctor = self
            .doctors
            .get_mut(msg.from.as_str())
            .ok_or_else(|| AgentError::ChannelNotAuthenticated(msg.from.to_string()))?;
        doctor.accept(msg, MessageType::ConsentRequest)?;
        let body: ConsentRequestBody = msg.body_as()?;
        if body.requested_attributes.is_empty() {
            return Err(AgentError::ProtocolViolation("consent request names no attributes".into()));
        }
        if let Some(reason) = verify_credential(&body.credential, services.ledger.as_ref()).reason {
            return Err(AgentError::CredentialInvalid(reason));
        }
        if body.credential.subject_did != doctor.peer_anywise
            || !credential_backs(&body.credential, &body.requested_attributes)
        {
            return Err(AgentError::CredentialInvalid(CredentialFault::BadSignature));
        }
        let owner = services
            .ledger
            .record_owner(&body.cid)
            .ok_or(crate::ledger::LedgerError::UnknownCid(body.cid))?;
        let patient = self
            .patient_for_owner(&owner)
            .ok_or_else(|| AgentError::ChannelNotAuthenticated(format!("owner of {}", body.cid)))?;
        let request_id = format!("req-{}", self.next_request);
        let relay = ConsentRelayBody {
            request_id: request_id.clone(),
            cid: body.cid,
            requester_did: msg.from.clone(),
            requested_attributes: body.requested_attributes,
            purpose: body.purpose,
            credential: body.credential,
        };
        let out = patient.seal(MessageType::ConsentRequest, &relay, rng);
        let patient_pairwise = patient.peer_pairwise.clone();
        self.next_request += 1;
        self.pending
            .insert(request_id.clone(), PendingRequest { relay, patient_pairwise, decision: None });
        Ok((request_id, out))
    }

    /// Records the patient's decision; a denial closes the request.
    pub fn on_consent_decision(&mut self, msg: &AgentMessage) -> Result<ConsentOutcome, AgentError> {
        let body: ConsentDecisionBody = msg.body_as()?;
        let pending = self
            .pending
            .get(&body.request_id)
            .ok_or_else(|| AgentError::UnknownRequest(body.request_id.clone()))?;
        let session = self
            .patients
            .get_mut(pending.patient_pairwise.as_str())
            .ok_or_else(|| AgentError::ChannelNotAuthenticated(msg.from.to_string()))?;
        session.accept(msg, MessageType::ConsentDecision)?;
        let outcome = ConsentOutcome {
            request_id: body.request_id.clone(),
            decision: body.decision.clone(),
            attributes: body.attributes,
            version: None,
        };
        match body.decision.as_str() {
            "deny" => {
                self.pending.remove(&body.request_id);
            }
            "grant" => {
                self.pending.get_mut(&body.request_id).expect("checked").decision = Some("grant".into());
            }
            other => return Err(AgentError::ProtocolViolation(format!("unknown decision {other}"))),
        }
        Ok(outcome)
    }

    /// Blind splice: checks the patient's token, stores and anchors the new
    /// envelope. Fails with a version gap when the token is stale.
    pub fn on_rewrap_token(&mut self, msg: &AgentMessage, services: &Services) -> Result<(KeyEnvelope, Receipt), AgentError> {
        let session = self
            .patients
            .get_mut(msg.from.as_str())
            .ok_or_else(|| AgentError::ChannelNotAuthenticated(msg.from.to_string()))?;
        session.accept(msg, MessageType::RewrapToken)?;
        let body: RewrapTokenBody = msg.body_as()?;
        if body.token.authorized_by != session.peer_pairwise {
            return Err(AgentError::ProtocolViolation("token not signed by this patient".into()));
        }
        if services.ledger.record_owner(&body.token.cid).as_ref() != Some(&session.peer_anywise) {
            return Err(AgentError::ProtocolViolation("token for a record the patient does not own".into()));
        }
        let patient_anywise = session.peer_anywise.clone();
        let (_, current) = services.latest_envelope(&body.token.cid)?;
        let next = apply_rewrap(&current, &body.token, &SessionKeys(session))?;
        let receipt = services.anchor_envelope(&next, &patient_anywise, &self.identity)?;
        if let Some(id) = &body.request_id {
            self.pending.remove(id);
        }
        Ok((next, receipt))
    }
}
