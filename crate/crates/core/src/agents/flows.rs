//! In-process drivers that run each protocol between two actors.
//!
//! Every message crosses a [`Transcript`] as a length-prefixed frame before
//! the receiving actor sees it.

use std::collections::BTreeSet;

use rand_core::CryptoRngCore;

use super::handshake::run_handshake;
use super::{
    AgentError, ConsentOutcome, ConsentRelayBody, Decision, DoctorWallet, EmergencyServer, HospitalAgent,
    PatientWallet, Services, Transcript,
};
use crate::abe::AttributeSet;
use crate::cas::Cid;
use crate::envelope::KeyEnvelope;

/// Attempts made when a concurrent rewrap bumps the version first.
pub const MAX_REWRAP_ATTEMPTS: usize = 3;

/// Handshake with admission, then the patient's attribute key.
pub fn admit<R: CryptoRngCore + ?Sized>(
    patient: &mut PatientWallet,
    hospital: &mut HospitalAgent,
    services: &Services,
    transcript: &mut Transcript,
    rng: &mut R,
) -> Result<(), AgentError> {
    let initiator = patient.begin_admission(hospital.did());
    let responder = hospital.admission_responder();
    let (mine, theirs) = run_handshake(initiator, responder, &services.ledger, transcript, rng)?;
    hospital.complete_admission(theirs, services)?;
    patient.complete_admission(mine);
    patient.obtain_abe_key(services, rng)
}

pub fn connect_doctor<R: CryptoRngCore + ?Sized>(
    doctor: &mut DoctorWallet,
    hospital: &mut HospitalAgent,
    services: &Services,
    transcript: &mut Transcript,
    rng: &mut R,
) -> Result<(), AgentError> {
    let initiator = doctor.begin_handshake(hospital.did());
    let (mine, theirs) = run_handshake(initiator, hospital.doctor_responder(), &services.ledger, transcript, rng)?;
    hospital.complete_doctor(theirs);
    doctor.complete_hospital(mine);
    Ok(())
}

pub fn connect_emergency<R: CryptoRngCore + ?Sized>(
    doctor: &mut DoctorWallet,
    server: &mut EmergencyServer,
    services: &Services,
    transcript: &mut Transcript,
    rng: &mut R,
) -> Result<(), AgentError> {
    let initiator = doctor.begin_handshake(server.did());
    let (mine, theirs) = run_handshake(initiator, server.responder(), &services.ledger, transcript, rng)?;
    server.complete_handshake(theirs);
    doctor.complete_emergency(mine);
    Ok(())
}

/// Hospital stores a record for the patient, who is told its CID.
pub fn store_record<R: CryptoRngCore + ?Sized>(
    hospital: &HospitalAgent,
    patient: &mut PatientWallet,
    services: &Services,
    transcript: &mut Transcript,
    plaintext: &[u8],
    rng: &mut R,
) -> Result<(Cid, KeyEnvelope), AgentError> {
    let peer = patient.session()?.my_pairwise.did.clone();
    let (cid, env, notice) = hospital.store_record(services, &peer, plaintext, rng)?;
    patient.receive(&transcript.deliver(notice), services)?;
    Ok((cid, env))
}

/// Doctor asks; the hospital relays to the owner, whose wallet queues it.
pub fn request_access<R: CryptoRngCore + ?Sized>(
    doctor: &DoctorWallet,
    hospital: &mut HospitalAgent,
    patient: &mut PatientWallet,
    services: &Services,
    transcript: &mut Transcript,
    cid: &Cid,
    attrs: Option<&AttributeSet>,
    purpose: &str,
    rng: &mut R,
) -> Result<String, AgentError> {
    let ask = doctor.request_access(cid, attrs, purpose, rng)?;
    let (request_id, relay) = hospital.on_consent_request(&transcript.deliver(ask), services, rng)?;
    patient.receive(&transcript.deliver(relay), services)?;
    Ok(request_id)
}

/// Patient answers a queued request; a grant is spliced by the hospital,
/// refetching and rebuilding the token on a version gap.
pub fn answer_consent<R: CryptoRngCore + ?Sized>(
    patient: &mut PatientWallet,
    hospital: &mut HospitalAgent,
    services: &Services,
    transcript: &mut Transcript,
    request_id: &str,
    decision: Decision,
    rng: &mut R,
) -> Result<ConsentOutcome, AgentError> {
    let cid = patient
        .pending
        .get(request_id)
        .map(|r| r.cid)
        .ok_or_else(|| AgentError::UnknownRequest(request_id.to_string()))?;
    let mut msgs = transcript.deliver_all(patient.decide(request_id, decision, services, rng)?).into_iter();
    let mut outcome = hospital.on_consent_decision(&msgs.next().expect("decision message"))?;
    let Some(mut token) = msgs.next() else {
        return Ok(outcome);
    };
    let mut attempt = 1;
    loop {
        match hospital.on_rewrap_token(&token, services) {
            Ok((env, _)) => {
                outcome.version = Some(env.version);
                return Ok(outcome);
            }
            Err(e) if e.is_version_gap() && attempt < MAX_REWRAP_ATTEMPTS => {
                attempt += 1;
                let rebuilt = patient.grant_token(&cid, &outcome.attributes, Some(request_id), services, rng)?;
                token = transcript.deliver(rebuilt);
            }
            Err(e) => return Err(e),
        }
    }
}

/// Relays an already-built doctor request and lets `decide` answer it.
pub fn relay_consent_request<R, F>(
    hospital: &mut HospitalAgent,
    patient: &mut PatientWallet,
    services: &Services,
    transcript: &mut Transcript,
    request: super::AgentMessage,
    decide: F,
    rng: &mut R,
) -> Result<ConsentOutcome, AgentError>
where
    R: CryptoRngCore + ?Sized,
    F: FnOnce(&ConsentRelayBody) -> Decision,
{
    let (request_id, relay) = hospital.on_consent_request(&transcript.deliver(request), services, rng)?;
    patient.receive(&transcript.deliver(relay), services)?;
    let decision = decide(patient.pending.get(&request_id).expect("just queued"));
    answer_consent(patient, hospital, services, transcript, &request_id, decision, rng)
}

/// Patient-initiated grant without a doctor request.
pub fn grant_access<R: CryptoRngCore + ?Sized>(
    patient: &mut PatientWallet,
    hospital: &mut HospitalAgent,
    services: &Services,
    transcript: &mut Transcript,
    cid: &Cid,
    attrs: &AttributeSet,
    rng: &mut R,
) -> Result<KeyEnvelope, AgentError> {
    let mut attempt = 0;
    loop {
        attempt += 1;
        let token = transcript.deliver(patient.grant_token(cid, attrs, None, services, rng)?);
        match hospital.on_rewrap_token(&token, services) {
            Ok((env, _)) => return Ok(env),
            Err(e) if e.is_version_gap() && attempt < MAX_REWRAP_ATTEMPTS => continue,
            Err(e) => return Err(e),
        }
    }
}

/// Removes `attrs` from the record's policy under a fresh KEK.
pub fn revoke_access<R: CryptoRngCore + ?Sized>(
    patient: &mut PatientWallet,
    hospital: &mut HospitalAgent,
    services: &Services,
    transcript: &mut Transcript,
    cid: &Cid,
    attrs: &BTreeSet<String>,
    rng: &mut R,
) -> Result<KeyEnvelope, AgentError> {
    let mut attempt = 0;
    loop {
        attempt += 1;
        let token = transcript.deliver(patient.revoke_token(cid, attrs, services, rng)?);
        match hospital.on_rewrap_token(&token, services) {
            Ok((env, _)) => return Ok(env),
            Err(e) if e.is_version_gap() && attempt < MAX_REWRAP_ATTEMPTS => continue,
            Err(e) => return Err(e),
        }
    }
}

/// Doctor asks the emergency server to override; returns the new version.
pub fn emergency_access<R: CryptoRngCore + ?Sized>(
    doctor: &mut DoctorWallet,
    server: &mut EmergencyServer,
    services: &Services,
    transcript: &mut Transcript,
    cid: &Cid,
    justification: &str,
    rng: &mut R,
) -> Result<u64, AgentError> {
    let ask = transcript.deliver(doctor.emergency_request(cid, justification, rng)?);
    let grant = server.on_emergency_request(&ask, services, rng)?;
    let (_, version) = doctor.on_emergency_grant(&transcript.deliver(grant))?;
    Ok(version)
}
