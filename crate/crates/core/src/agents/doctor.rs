//! The doctor's wallet: access requests, record reads and emergency requests.

use std::collections::BTreeMap;

use rand_core::CryptoRngCore;
use serde::{Deserialize, Serialize};

use super::emergency::{EmergencyGrantBody, EmergencyRequestBody};
use super::handshake::{Initiator, InitiatorOutcome, Session};
use super::hospital::ConsentRequestBody;
use super::{AgentError, AgentMessage, MessageType, Services};
use crate::abe::{AbeUserKey, AttributeSet};
use crate::canonical;
use crate::cas::Cid;
use crate::envelope::{decrypt_record, open_envelope, KeyEnvelope, RecordCiphertext};
use crate::identity::{Credential, Did, Identity};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DoctorWallet {
    pub name: String,
    pub identity: Identity,
    pub license: Credential,
    pub abe_key: AbeUserKey,
    pub hospital: Option<Session>,
    pub emergency: Option<Session>,
    /// Envelope bytes seen so far, by CID text and version, base64.
    pub cache: BTreeMap<String, BTreeMap<u64, String>>,
}

impl DoctorWallet {
    pub fn new(name: &str, identity: Identity, license: Credential, abe_key: AbeUserKey) -> DoctorWallet {
        DoctorWallet {
            name: name.to_string(),
            identity,
            license,
            abe_key,
            hospital: None,
            emergency: None,
            cache: BTreeMap::new(),
        }
    }

    pub fn did(&self) -> &Did {
        &self.identity.did
    }

    pub fn attributes(&self) -> &AttributeSet {
        self.abe_key.attributes()
    }

    pub fn begin_handshake(&self, responder: &Did) -> Initiator {
        Initiator::new(&self.identity, &self.license, responder, false)
    }

    pub fn complete_hospital(&mut self, outcome: InitiatorOutcome) {
        self.hospital = Some(outcome.session);
    }

    pub fn complete_emergency(&mut self, outcome: InitiatorOutcome) {
        self.emergency = Some(outcome.session);
    }

    /// Builds a consent request; defaults to every attribute the doctor holds.
    pub fn request_access<R: CryptoRngCore + ?Sized>(
        &self,
        cid: &Cid,
        attrs: Option<&AttributeSet>,
        purpose: &str,
        rng: &mut R,
    ) -> Result<AgentMessage, AgentError> {
        let session = self
            .hospital
            .as_ref()
            .ok_or_else(|| AgentError::ChannelNotAuthenticated("doctor has no hospital session".into()))?;
        let requested = attrs.unwrap_or(self.attributes()).clone();
        if requested.is_empty() {
            return Err(AgentError::ProtocolViolation("consent request names no attributes".into()));
        }
        let body = ConsentRequestBody {
            cid: *cid,
            requested_attributes: requested,
            purpose: purpose.to_string(),
            credential: self.license.clone(),
        };
        Ok(session.seal(MessageType::ConsentRequest, &body, rng))
    }

    fn remember(&mut self, env: &KeyEnvelope) {
        self.cache
            .entry(env.cid.to_string())
            .or_default()
            .insert(env.version, canonical::b64_encode(&env.to_bytes()));
    }

    /// Opens the latest anchored envelope and decrypts the record.
    pub fn access_record(&mut self, services: &Services, cid: &Cid) -> Result<Vec<u8>, AgentError> {
        let (_, env) = services.latest_envelope(cid)?;
        self.remember(&env);
        self.decrypt_with(services, &env)
    }

    /// Opens a previously seen envelope version from the local cache.
    pub fn access_cached(&self, services: &Services, cid: &Cid, version: u64) -> Result<Vec<u8>, AgentError> {
        let env = self.cached_envelope(cid, version)?;
        self.decrypt_with(services, &env)
    }

    pub fn cached_envelope(&self, cid: &Cid, version: u64) -> Result<KeyEnvelope, AgentError> {
        let text = self
            .cache
            .get(&cid.to_string())
            .and_then(|m| m.get(&version))
            .ok_or_else(|| AgentError::ProtocolViolation(format!("no cached envelope {cid} v{version}")))?;
        let bytes = canonical::b64_decode(text)
            .map_err(|e| AgentError::ProtocolViolation(format!("cached envelope: {e}")))?;
        Ok(KeyEnvelope::from_bytes(&bytes)?)
    }

    /// Caches the envelope at every anchored version without opening it.
    pub fn fetch_history(&mut self, services: &Services, cid: &Cid) -> Result<(), AgentError> {
        for anchor in services.ledger.consent_history(cid)? {
            let env = services.envelope_for(&anchor)?;
            self.remember(&env);
        }
        Ok(())
    }

    fn decrypt_with(&self, services: &Services, env: &KeyEnvelope) -> Result<Vec<u8>, AgentError> {
        let data_key = open_envelope(env, &self.abe_key)?;
        let ct = RecordCiphertext::from_bytes(&services.cas.get(&env.cid)?)?;
        Ok(decrypt_record(&ct, &data_key)?)
    }

    pub fn emergency_request<R: CryptoRngCore + ?Sized>(
        &self,
        cid: &Cid,
        justification: &str,
        rng: &mut R,
    ) -> Result<AgentMessage, AgentError> {
        let session = self
            .emergency
            .as_ref()
            .ok_or_else(|| AgentError::ChannelNotAuthenticated("doctor has no emergency-server session".into()))?;
        let body = EmergencyRequestBody {
            cid: *cid,
            justification: justification.to_string(),
            attributes: self.attributes().clone(),
            credential: self.license.clone(),
        };
        Ok(session.seal(MessageType::EmergencyRequest, &body, rng))
    }

    pub fn on_emergency_grant(&mut self, msg: &AgentMessage) -> Result<(Cid, u64), AgentError> {
        let session = self
            .emergency
            .as_mut()
            .ok_or_else(|| AgentError::ChannelNotAuthenticated(msg.from.to_string()))?;
        session.accept(msg, MessageType::EmergencyGrant)?;
        let body: EmergencyGrantBody = msg.body_as()?;
        Ok((body.cid, body.version))
    }
}
