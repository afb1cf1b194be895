//! Mutual authentication and pairwise-DID establishment.
//!
//! Message order, initiator `I` and responder `R`:
//!
//! ```text
//! I -> R  invitation               anywise DID + credential
//! R -> I  credential_presentation  credential + challenge nonce nR
//! I -> R  challenge                sig(nR) + challenge nonce nI
//! R -> I  challenge_response       sig(nI)
//! I -> R  pairwise_offer           fresh pairwise key, bound by the anywise key to nR
//! R -> I  pairwise_offer           fresh pairwise key, bound by the anywise key to nI
//! R -> I  admission_credential     only when the responder admits (hospital <- patient)
//! ```
//!
//! Nothing is returned to the caller until the exchange completes, so an
//! aborted handshake leaves no pairwise keys or credentials behind.

use std::collections::BTreeSet;
use std::fmt;

use rand_core::CryptoRngCore;
use serde::{Deserialize, Serialize};

use super::message::{AgentMessage, MessageType, Transcript};
use super::AgentError;
use crate::canonical::{b64_array, hex_array};
use crate::identity::{
    create_pairwise, issue_credential, sign_challenge, verify_challenge_with_key, verify_credential,
    verify_signature, Credential, CredentialFault, Did, Identity, LedgerView, PairwiseDid, PublicKey,
    SignatureBytes, Signer,
};
use crate::ledger::{Ledger, TxKind};

const BIND_DOMAIN: &[u8] = b"sehr-pairwise-bind\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandshakeState {
    Start,
    Invited,
    Verified,
    PairwiseEstablished,
    Admitted,
}

impl fmt::Display for HandshakeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            HandshakeState::Start => "start",
            HandshakeState::Invited => "invited",
            HandshakeState::Verified => "verified",
            HandshakeState::PairwiseEstablished => "pairwise_established",
            HandshakeState::Admitted => "admitted",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvitationBody {
    pub credential: Credential,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PresentationBody {
    pub credential: Credential,
    #[serde(with = "hex_array")]
    pub challenge: [u8; 32],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChallengeBody {
    #[serde(with = "b64_array")]
    pub response: SignatureBytes,
    #[serde(with = "hex_array")]
    pub challenge: [u8; 32],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChallengeResponseBody {
    #[serde(with = "b64_array")]
    pub response: SignatureBytes,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairwiseOfferBody {
    #[serde(with = "b64_array")]
    pub public_key: PublicKey,
    #[serde(with = "b64_array")]
    pub binding: SignatureBytes,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdmissionBody {
    pub credential: Credential,
}

fn binding_message(pairwise: &Did, peer_nonce: &[u8; 32]) -> Vec<u8> {
    let mut msg = BIND_DOMAIN.to_vec();
    msg.extend_from_slice(pairwise.as_str().as_bytes());
    msg.push(0);
    msg.extend_from_slice(peer_nonce);
    msg
}

fn fresh_nonce<R: CryptoRngCore + ?Sized>(rng: &mut R) -> [u8; 32] {
    let mut n = [0u8; 32];
    rng.fill_bytes(&mut n);
    n
}

fn check_presented(credential: &Credential, presenter: &Did, ledger: &(impl LedgerView + ?Sized)) -> Result<(), AgentError> {
    let check = verify_credential(credential, ledger);
    if let Some(reason) = check.reason {
        return Err(AgentError::CredentialInvalid(reason));
    }
    if credential.subject_did != *presenter {
        return Err(AgentError::CredentialInvalid(CredentialFault::BadSignature));
    }
    Ok(())
}

fn anywise_key(did: &Did, ledger: &(impl LedgerView + ?Sized)) -> Result<PublicKey, AgentError> {
    ledger
        .public_key_of(did)
        .ok_or(AgentError::CredentialInvalid(CredentialFault::UnknownIssuer))
}

fn require_signed(msg: &AgentMessage, key: &PublicKey) -> Result<(), AgentError> {
    if msg.verify_with(key) {
        Ok(())
    } else {
        Err(AgentError::ProtocolViolation(format!("{} carries a bad signature", msg.kind.as_str())))
    }
}

fn out_of_phase(kind: MessageType, state: HandshakeState) -> AgentError {
    AgentError::ProtocolViolation(format!("{} not expected in state {state}", kind.as_str()))
}

/// An established pairwise channel, as held by one side.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Session {
    pub state: HandshakeState,
    pub my_pairwise: PairwiseDid,
    pub peer_pairwise: Did,
    #[serde(with = "b64_array")]
    pub peer_pairwise_key: PublicKey,
    pub peer_anywise: Did,
    pub peer_credential: Credential,
    pub seen_nonces: BTreeSet<String>,
}

impl Session {
    /// Signs a message on this channel.
    pub fn seal<B, R>(&self, kind: MessageType, body: &B, rng: &mut R) -> AgentMessage
    where
        B: Serialize + ?Sized,
        R: CryptoRngCore + ?Sized,
    {
        AgentMessage::new(&self.my_pairwise, &self.peer_pairwise, kind, body, rng)
    }

    /// Authenticates an incoming message on this channel and checks freshness.
    pub fn accept(&mut self, msg: &AgentMessage, expected: MessageType) -> Result<(), AgentError> {
        if msg.from != self.peer_pairwise || msg.to != self.my_pairwise.did {
            return Err(AgentError::ChannelNotAuthenticated(msg.from.to_string()));
        }
        if !msg.verify_with(&self.peer_pairwise_key) {
            return Err(AgentError::ChannelNotAuthenticated(msg.from.to_string()));
        }
        if msg.kind != expected {
            return Err(AgentError::ProtocolViolation(format!(
                "expected {}, got {}",
                expected.as_str(),
                msg.kind.as_str()
            )));
        }
        if !self.seen_nonces.insert(hex::encode(msg.nonce)) {
            return Err(AgentError::ProtocolViolation("replayed message nonce".into()));
        }
        Ok(())
    }

    pub fn verifies_as_peer(&self, did: &Did, msg: &[u8], sig: &SignatureBytes) -> bool {
        *did == self.peer_pairwise && verify_signature(&self.peer_pairwise_key, msg, sig)
    }
}

/// Claims stamped into an admission credential.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdmissionTerms {
    pub hospital: String,
    pub role: String,
}

/// What the initiator keeps after a successful handshake.
#[derive(Debug, Clone)]
pub struct InitiatorOutcome {
    pub session: Session,
    pub admission: Option<Credential>,
}

pub struct Initiator {
    identity: Identity,
    credential: Credential,
    responder: Did,
    expect_admission: bool,
    state: HandshakeState,
    failed: bool,
    my_challenge: [u8; 32],
    peer_challenge: [u8; 32],
    seen: BTreeSet<[u8; 32]>,
    peer_credential: Option<Credential>,
    pairwise: Option<PairwiseDid>,
    peer_pairwise: Option<(Did, PublicKey)>,
    admission: Option<Credential>,
}

impl Initiator {
    pub fn new(identity: &Identity, credential: &Credential, responder: &Did, expect_admission: bool) -> Initiator {
        Initiator {
            identity: identity.clone(),
            credential: credential.clone(),
            responder: responder.clone(),
            expect_admission,
            state: HandshakeState::Start,
            failed: false,
            my_challenge: [0u8; 32],
            peer_challenge: [0u8; 32],
            seen: BTreeSet::new(),
            peer_credential: None,
            pairwise: None,
            peer_pairwise: None,
            admission: None,
        }
    }

    pub fn state(&self) -> HandshakeState {
        self.state
    }

    pub fn start<R: CryptoRngCore + ?Sized>(&mut self, rng: &mut R) -> Result<AgentMessage, AgentError> {
        if self.state != HandshakeState::Start {
            return Err(out_of_phase(MessageType::Invitation, self.state));
        }
        self.state = HandshakeState::Invited;
        Ok(AgentMessage::new(
            &self.identity,
            &self.responder,
            MessageType::Invitation,
            &InvitationBody { credential: self.credential.clone() },
            rng,
        ))
    }

    pub fn is_complete(&self) -> bool {
        !self.failed
            && match self.expect_admission {
                true => self.state == HandshakeState::Admitted,
                false => self.state == HandshakeState::PairwiseEstablished,
            }
    }

    pub fn handle<L, R>(&mut self, msg: &AgentMessage, ledger: &L, rng: &mut R) -> Result<Vec<AgentMessage>, AgentError>
    where
        L: LedgerView + ?Sized,
        R: CryptoRngCore + ?Sized,
    {
        if self.failed {
            return Err(AgentError::ProtocolViolation("handshake already aborted".into()));
        }
        let out = self.step(msg, ledger, rng);
        if out.is_err() {
            self.failed = true;
        }
        out
    }

    fn step<L, R>(&mut self, msg: &AgentMessage, ledger: &L, rng: &mut R) -> Result<Vec<AgentMessage>, AgentError>
    where
        L: LedgerView + ?Sized,
        R: CryptoRngCore + ?Sized,
    {
        if !self.seen.insert(msg.nonce) {
            return Err(AgentError::ProtocolViolation("replayed message nonce".into()));
        }
        match (self.state, msg.kind) {
            (HandshakeState::Invited, MessageType::CredentialPresentation) => {
                self.expect_from_responder(msg)?;
                require_signed(msg, &anywise_key(&msg.from, ledger)?)?;
                let body: PresentationBody = msg.body_as()?;
                check_presented(&body.credential, &msg.from, ledger)?;
                self.peer_credential = Some(body.credential);
                self.peer_challenge = body.challenge;
                self.my_challenge = fresh_nonce(rng);
                self.state = HandshakeState::Verified;
                let reply = ChallengeBody {
                    response: sign_challenge(&self.identity, &body.challenge),
                    challenge: self.my_challenge,
                };
                Ok(vec![AgentMessage::new(&self.identity, &self.responder, MessageType::Challenge, &reply, rng)])
            }
            (HandshakeState::Verified, MessageType::ChallengeResponse) if self.pairwise.is_none() => {
                self.expect_from_responder(msg)?;
                let responder_key = anywise_key(&msg.from, ledger)?;
                require_signed(msg, &responder_key)?;
                let body: ChallengeResponseBody = msg.body_as()?;
                if !verify_challenge_with_key(&responder_key, &self.my_challenge, &body.response) {
                    return Err(AgentError::ChallengeFailed(msg.from.to_string()));
                }
                let pairwise = create_pairwise(rng, &self.responder);
                let offer = PairwiseOfferBody {
                    public_key: pairwise.keys.public_key(),
                    binding: self.identity.sign(&binding_message(&pairwise.did, &self.peer_challenge)),
                };
                let out = AgentMessage::new(&pairwise, &self.responder, MessageType::PairwiseOffer, &offer, rng);
                self.pairwise = Some(pairwise);
                Ok(vec![out])
            }
            (HandshakeState::Verified, MessageType::PairwiseOffer) if self.pairwise.is_some() => {
                let pairwise = self.pairwise.as_mut().expect("guarded");
                if msg.to != pairwise.did {
                    return Err(AgentError::ProtocolViolation("pairwise offer not addressed to our pairwise DID".into()));
                }
                let body: PairwiseOfferBody = msg.body_as()?;
                if !msg.from.is_controlled_by(&body.public_key) {
                    return Err(AgentError::ProtocolViolation("pairwise DID does not match offered key".into()));
                }
                require_signed(msg, &body.public_key)?;
                let responder_key = anywise_key(&self.responder, ledger)?;
                if !verify_signature(&responder_key, &binding_message(&msg.from, &self.my_challenge), &body.binding) {
                    return Err(AgentError::ChallengeFailed(self.responder.to_string()));
                }
                pairwise.peer_did = msg.from.clone();
                self.peer_pairwise = Some((msg.from.clone(), body.public_key));
                self.state = HandshakeState::PairwiseEstablished;
                Ok(Vec::new())
            }
            (HandshakeState::PairwiseEstablished, MessageType::AdmissionCredential) if self.expect_admission => {
                let (peer, peer_key) = self.peer_pairwise.clone().expect("set with state");
                let mine = &self.pairwise.as_ref().expect("set with state").did;
                if msg.from != peer || msg.to != *mine {
                    return Err(AgentError::ProtocolViolation("admission credential on the wrong channel".into()));
                }
                require_signed(msg, &peer_key)?;
                let body: AdmissionBody = msg.body_as()?;
                check_presented(&body.credential, mine, ledger)?;
                if body.credential.issuer_did != self.responder || body.credential.claim("type") != Some("admission") {
                    return Err(AgentError::CredentialInvalid(CredentialFault::BadSignature));
                }
                self.admission = Some(body.credential);
                self.state = HandshakeState::Admitted;
                Ok(Vec::new())
            }
            (state, kind) => Err(out_of_phase(kind, state)),
        }
    }

    fn expect_from_responder(&self, msg: &AgentMessage) -> Result<(), AgentError> {
        if msg.from != self.responder || msg.to != self.identity.did {
            return Err(AgentError::ProtocolViolation(format!(
                "{} from an unexpected party",
                msg.kind.as_str()
            )));
        }
        Ok(())
    }

    pub fn finish(self) -> Result<InitiatorOutcome, AgentError> {
        if !self.is_complete() {
            return Err(AgentError::ProtocolViolation(format!("handshake incomplete in state {}", self.state)));
        }
        let (peer_pairwise, peer_pairwise_key) = self.peer_pairwise.expect("complete");
        Ok(InitiatorOutcome {
            session: Session {
                state: self.state,
                my_pairwise: self.pairwise.expect("complete"),
                peer_pairwise,
                peer_pairwise_key,
                peer_anywise: self.responder,
                peer_credential: self.peer_credential.expect("complete"),
                seen_nonces: BTreeSet::new(),
            },
            admission: self.admission,
        })
    }
}

/// What the responder keeps after a successful handshake.
#[derive(Debug, Clone)]
pub struct ResponderOutcome {
    pub session: Session,
    pub issued_admission: Option<Credential>,
}

pub struct Responder {
    identity: Identity,
    credential: Credential,
    admission: Option<AdmissionTerms>,
    state: HandshakeState,
    failed: bool,
    proved: bool,
    my_challenge: [u8; 32],
    peer_challenge: [u8; 32],
    seen: BTreeSet<[u8; 32]>,
    peer: Option<(Did, PublicKey, Credential)>,
    pairwise: Option<PairwiseDid>,
    peer_pairwise: Option<(Did, PublicKey)>,
    issued: Option<Credential>,
}

impl Responder {
    pub fn new(identity: &Identity, credential: &Credential, admission: Option<AdmissionTerms>) -> Responder {
        Responder {
            identity: identity.clone(),
            credential: credential.clone(),
            admission,
            state: HandshakeState::Start,
            failed: false,
            proved: false,
            my_challenge: [0u8; 32],
            peer_challenge: [0u8; 32],
            seen: BTreeSet::new(),
            peer: None,
            pairwise: None,
            peer_pairwise: None,
            issued: None,
        }
    }

    pub fn state(&self) -> HandshakeState {
        self.state
    }

    pub fn is_complete(&self) -> bool {
        !self.failed
            && match self.admission {
                Some(_) => self.state == HandshakeState::Admitted,
                None => self.state == HandshakeState::PairwiseEstablished,
            }
    }

    /// The initiator's anywise DID once the invitation has been verified.
    pub fn peer_anywise(&self) -> Option<&Did> {
        self.peer.as_ref().map(|p| &p.0)
    }

    pub fn handle<R: CryptoRngCore + ?Sized>(
        &mut self,
        msg: &AgentMessage,
        ledger: &Ledger,
        rng: &mut R,
    ) -> Result<Vec<AgentMessage>, AgentError> {
        if self.failed {
            return Err(AgentError::ProtocolViolation("handshake already aborted".into()));
        }
        let out = self.step(msg, ledger, rng);
        if out.is_err() {
            self.failed = true;
        }
        out
    }

    fn step<R: CryptoRngCore + ?Sized>(
        &mut self,
        msg: &AgentMessage,
        ledger: &Ledger,
        rng: &mut R,
    ) -> Result<Vec<AgentMessage>, AgentError> {
        if !self.seen.insert(msg.nonce) {
            return Err(AgentError::ProtocolViolation("replayed message nonce".into()));
        }
        match (self.state, msg.kind) {
            (HandshakeState::Start, MessageType::Invitation) => {
                if msg.to != self.identity.did {
                    return Err(AgentError::ProtocolViolation("invitation addressed elsewhere".into()));
                }
                self.state = HandshakeState::Invited;
                let key = anywise_key(&msg.from, ledger)?;
                require_signed(msg, &key)?;
                let body: InvitationBody = msg.body_as()?;
                check_presented(&body.credential, &msg.from, ledger)?;
                self.peer = Some((msg.from.clone(), key, body.credential));
                self.my_challenge = fresh_nonce(rng);
                self.state = HandshakeState::Verified;
                let reply = PresentationBody { credential: self.credential.clone(), challenge: self.my_challenge };
                Ok(vec![AgentMessage::new(
                    &self.identity,
                    &msg.from,
                    MessageType::CredentialPresentation,
                    &reply,
                    rng,
                )])
            }
            (HandshakeState::Verified, MessageType::Challenge) if !self.proved => {
                let (peer, key, _) = self.peer.clone().expect("set with state");
                if msg.from != peer || msg.to != self.identity.did {
                    return Err(AgentError::ProtocolViolation("challenge from an unexpected party".into()));
                }
                require_signed(msg, &key)?;
                let body: ChallengeBody = msg.body_as()?;
                if !verify_challenge_with_key(&key, &self.my_challenge, &body.response) {
                    return Err(AgentError::ChallengeFailed(peer.to_string()));
                }
                self.peer_challenge = body.challenge;
                self.proved = true;
                let reply = ChallengeResponseBody { response: sign_challenge(&self.identity, &body.challenge) };
                Ok(vec![AgentMessage::new(&self.identity, &peer, MessageType::ChallengeResponse, &reply, rng)])
            }
            (HandshakeState::Verified, MessageType::PairwiseOffer) if self.proved => {
                let (_, peer_key, _) = self.peer.clone().expect("set with state");
                if msg.to != self.identity.did {
                    return Err(AgentError::ProtocolViolation("pairwise offer addressed elsewhere".into()));
                }
                let body: PairwiseOfferBody = msg.body_as()?;
                if !msg.from.is_controlled_by(&body.public_key) {
                    return Err(AgentError::ProtocolViolation("pairwise DID does not match offered key".into()));
                }
                require_signed(msg, &body.public_key)?;
                if !verify_signature(&peer_key, &binding_message(&msg.from, &self.my_challenge), &body.binding) {
                    return Err(AgentError::ChallengeFailed(msg.from.to_string()));
                }
                let pairwise = create_pairwise(rng, &msg.from);
                let offer = PairwiseOfferBody {
                    public_key: pairwise.keys.public_key(),
                    binding: self.identity.sign(&binding_message(&pairwise.did, &self.peer_challenge)),
                };
                let mut out = vec![AgentMessage::new(&pairwise, &msg.from, MessageType::PairwiseOffer, &offer, rng)];
                self.state = HandshakeState::PairwiseEstablished;
                if let Some(terms) = &self.admission {
                    let mut visit = [0u8; 8];
                    rng.fill_bytes(&mut visit);
                    let claims = [
                        ("type", "admission".to_string()),
                        ("hospital", terms.hospital.clone()),
                        ("visit", format!("visit-{}", hex::encode(visit))),
                        ("role", terms.role.clone()),
                    ]
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), v))
                    .collect();
                    let credential = issue_credential(&self.identity, &msg.from, claims, ledger.now(), rng)?;
                    ledger.submit_signed(
                        TxKind::CredentialAnchor {
                            credential_hash: credential.hash(),
                            issuer_did: self.identity.did.clone(),
                        },
                        &self.identity,
                    )?;
                    out.push(AgentMessage::new(
                        &pairwise,
                        &msg.from,
                        MessageType::AdmissionCredential,
                        &AdmissionBody { credential: credential.clone() },
                        rng,
                    ));
                    self.issued = Some(credential);
                    self.state = HandshakeState::Admitted;
                }
                self.peer_pairwise = Some((msg.from.clone(), body.public_key));
                self.pairwise = Some(pairwise);
                Ok(out)
            }
            (state, kind) => Err(out_of_phase(kind, state)),
        }
    }

    pub fn finish(self) -> Result<ResponderOutcome, AgentError> {
        if !self.is_complete() {
            return Err(AgentError::ProtocolViolation(format!("handshake incomplete in state {}", self.state)));
        }
        let (peer_anywise, _, peer_credential) = self.peer.expect("complete");
        let (peer_pairwise, peer_pairwise_key) = self.peer_pairwise.expect("complete");
        Ok(ResponderOutcome {
            session: Session {
                state: self.state,
                my_pairwise: self.pairwise.expect("complete"),
                peer_pairwise,
                peer_pairwise_key,
                peer_anywise,
                peer_credential,
                seen_nonces: BTreeSet::new(),
            },
            issued_admission: self.issued,
        })
    }
}

/// Runs a complete handshake in-process, recording every frame.
pub fn run_handshake<R: CryptoRngCore + ?Sized>(
    mut initiator: Initiator,
    mut responder: Responder,
    ledger: &Ledger,
    transcript: &mut Transcript,
    rng: &mut R,
) -> Result<(InitiatorOutcome, ResponderOutcome), AgentError> {
    let mut to_responder = vec![initiator.start(rng)?];
    while !to_responder.is_empty() {
        let mut to_initiator = Vec::new();
        for msg in transcript.deliver_all(to_responder) {
            to_initiator.extend(responder.handle(&msg, ledger, rng)?);
        }
        to_responder = Vec::new();
        for msg in transcript.deliver_all(to_initiator) {
            to_responder.extend(initiator.handle(&msg, ledger, rng)?);
        }
    }
    Ok((initiator.finish()?, responder.finish()?))
}
