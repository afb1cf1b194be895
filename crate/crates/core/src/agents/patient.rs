//! The patient's wallet: admission, consent decisions and revocation.

use std::collections::{BTreeMap, BTreeSet};

use rand_core::CryptoRngCore;
use serde::{Deserialize, Serialize};

use super::handshake::{Initiator, InitiatorOutcome, Session};
use super::hospital::{ConsentDecisionBody, ConsentRelayBody, RecordStoredBody, RewrapTokenBody};
use super::{issue_patient_key, patient_attribute, AgentError, AgentMessage, MessageType, Services};
use crate::abe::{make_rewrap_token, AbeUserKey, AttributeSet, Policy};
use crate::cas::Cid;
use crate::envelope::{decrypt_record, open_envelope, RecordCiphertext};
use crate::identity::{verify_credential, Credential, CredentialFault, Did, Identity};

/// A patient's answer to a relayed consent request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    /// Grant the requested attributes, or only `narrowed` when given.
    Grant { narrowed: Option<AttributeSet> },
    Deny,
}

/// Wallet-local record of a consent decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentLogEntry {
    pub request_id: String,
    pub cid: Cid,
    pub requester_did: Did,
    pub decision: String,
    pub attributes: AttributeSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatientWallet {
    pub name: String,
    pub identity: Identity,
    pub credential: Credential,
    pub session: Option<Session>,
    pub admission: Option<Credential>,
    pub abe_key: Option<AbeUserKey>,
    pub records: Vec<Cid>,
    pub pending: BTreeMap<String, ConsentRelayBody>,
    pub consent_log: Vec<ConsentLogEntry>,
}

impl PatientWallet {
    pub fn new(name: &str, identity: Identity, credential: Credential) -> PatientWallet {
        PatientWallet {
            name: name.to_string(),
            identity,
            credential,
            session: None,
            admission: None,
            abe_key: None,
            records: Vec::new(),
            pending: BTreeMap::new(),
            consent_log: Vec::new(),
        }
    }

    pub fn did(&self) -> &Did {
        &self.identity.did
    }

    pub fn begin_admission(&self, hospital: &Did) -> Initiator {
        Initiator::new(&self.identity, &self.credential, hospital, true)
    }

    pub fn complete_admission(&mut self, outcome: InitiatorOutcome) {
        self.session = Some(outcome.session);
        self.admission = outcome.admission;
    }

    /// Presents the admission credential to the authority for a patient key.
    pub fn obtain_abe_key<R: CryptoRngCore + ?Sized>(&mut self, services: &Services, rng: &mut R) -> Result<(), AgentError> {
        let session = self.session()?;
        let admission = self
            .admission
            .as_ref()
            .ok_or_else(|| AgentError::ProtocolViolation("patient holds no admission credential".into()))?;
        self.abe_key = Some(issue_patient_key(services, admission, &session.my_pairwise, rng)?);
        Ok(())
    }

    /// The attribute naming this patient in policies.
    pub fn attribute(&self) -> Result<String, AgentError> {
        Ok(patient_attribute(&self.session()?.my_pairwise.did))
    }

    pub fn session(&self) -> Result<&Session, AgentError> {
        self.session
            .as_ref()
            .ok_or_else(|| AgentError::ChannelNotAuthenticated("patient has no hospital session".into()))
    }

    fn session_mut(&mut self) -> Result<&mut Session, AgentError> {
        self.session
            .as_mut()
            .ok_or_else(|| AgentError::ChannelNotAuthenticated("patient has no hospital session".into()))
    }

    fn key(&self) -> Result<&AbeUserKey, AgentError> {
        self.abe_key
            .as_ref()
            .ok_or_else(|| AgentError::ProtocolViolation("patient holds no attribute key".into()))
    }

    /// Handles `record_stored` and `consent_request` from the hospital.
    pub fn receive(&mut self, msg: &AgentMessage, services: &Services) -> Result<(), AgentError> {
        match msg.kind {
            MessageType::RecordStored => {
                self.session_mut()?.accept(msg, MessageType::RecordStored)?;
                let body: RecordStoredBody = msg.body_as()?;
                if !self.records.contains(&body.cid) {
                    self.records.push(body.cid);
                }
                Ok(())
            }
            MessageType::ConsentRequest => {
                self.session_mut()?.accept(msg, MessageType::ConsentRequest)?;
                let body: ConsentRelayBody = msg.body_as()?;
                if let Some(reason) = verify_credential(&body.credential, services.ledger.as_ref()).reason {
                    return Err(AgentError::CredentialInvalid(reason));
                }
                if !super::credential_backs(&body.credential, &body.requested_attributes) {
                    return Err(AgentError::CredentialInvalid(CredentialFault::BadSignature));
                }
                self.pending.insert(body.request_id.clone(), body);
                Ok(())
            }
            other => Err(AgentError::ProtocolViolation(format!("patient cannot handle {}", other.as_str()))),
        }
    }

    /// Answers a pending request. A grant yields the decision followed by a
    /// rewrap token; a denial stays in the wallet apart from the decision.
    pub fn decide<R: CryptoRngCore + ?Sized>(
        &mut self,
        request_id: &str,
        decision: Decision,
        services: &Services,
        rng: &mut R,
    ) -> Result<Vec<AgentMessage>, AgentError> {
        let request = self
            .pending
            .get(request_id)
            .cloned()
            .ok_or_else(|| AgentError::UnknownRequest(request_id.to_string()))?;
        let (label, granted) = match &decision {
            Decision::Deny => ("deny", AttributeSet::empty()),
            Decision::Grant { narrowed: None } => ("grant", request.requested_attributes.clone()),
            Decision::Grant { narrowed: Some(n) } => {
                if n.is_empty() || !n.is_subset(&request.requested_attributes) {
                    return Err(AgentError::ProtocolViolation(
                        "narrowed attributes must be a non-empty subset of the request".into(),
                    ));
                }
                ("grant", n.clone())
            }
        };
        let mut out = vec![self.session()?.seal(
            MessageType::ConsentDecision,
            &ConsentDecisionBody {
                request_id: request_id.to_string(),
                decision: label.to_string(),
                attributes: granted.clone(),
            },
            rng,
        )];
        if label == "grant" {
            out.push(self.grant_token(&request.cid, &granted, Some(request_id), services, rng)?);
        }
        self.pending.remove(request_id);
        self.consent_log.push(ConsentLogEntry {
            request_id: request_id.to_string(),
            cid: request.cid,
            requester_did: request.requester_did,
            decision: label.to_string(),
            attributes: granted,
        });
        Ok(out)
    }

    /// Token widening the current policy with `AND(attrs)`; the KEK is kept.
    pub fn grant_token<R: CryptoRngCore + ?Sized>(
        &self,
        cid: &Cid,
        attrs: &AttributeSet,
        request_id: Option<&str>,
        services: &Services,
        rng: &mut R,
    ) -> Result<AgentMessage, AgentError> {
        let (_, env) = services.latest_envelope(cid)?;
        let policy = Policy::or(env.consent_policy().clone(), Policy::all_of(attrs)?);
        self.token_message(&env, &policy, false, request_id, services, rng)
    }

    /// Token pruning `attrs` from the current policy under a fresh KEK.
    pub fn revoke_token<R: CryptoRngCore + ?Sized>(
        &self,
        cid: &Cid,
        attrs: &BTreeSet<String>,
        services: &Services,
        rng: &mut R,
    ) -> Result<AgentMessage, AgentError> {
        let (_, env) = services.latest_envelope(cid)?;
        let current = env.consent_policy();
        if let Some(missing) = attrs.iter().find(|a| !current.mentions(a)) {
            return Err(AgentError::AttributeNotInPolicy(missing.clone()));
        }
        let policy = current.without(attrs).ok_or_else(|| {
            AgentError::ProtocolViolation("revocation would leave the record with an empty policy".into())
        })?;
        self.token_message(&env, &policy, true, None, services, rng)
    }

    fn token_message<R: CryptoRngCore + ?Sized>(
        &self,
        env: &crate::envelope::KeyEnvelope,
        policy: &Policy,
        rotate: bool,
        request_id: Option<&str>,
        services: &Services,
        rng: &mut R,
    ) -> Result<AgentMessage, AgentError> {
        let session = self.session()?;
        let token = make_rewrap_token(
            env,
            self.key()?,
            policy,
            rotate,
            &session.my_pairwise,
            services.authority.as_ref(),
            rng,
        )?;
        Ok(session.seal(
            MessageType::RewrapToken,
            &RewrapTokenBody { request_id: request_id.map(str::to_string), token },
            rng,
        ))
    }

    /// Reads one of the patient's own records.
    pub fn read(&self, services: &Services, cid: &Cid) -> Result<Vec<u8>, AgentError> {
        let (_, env) = services.latest_envelope(cid)?;
        let data_key = open_envelope(&env, self.key()?)?;
        let ct = RecordCiphertext::from_bytes(&services.cas.get(cid)?)?;
        Ok(decrypt_record(&ct, &data_key)?)
    }
}
