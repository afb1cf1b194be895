//! Signed agent messages and their length-prefixed wire form.

use std::io::{self, Read, Write};

use rand_core::CryptoRngCore;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::AgentError;
use crate::canonical::{self, b64_array, hex_array};
use crate::identity::{verify_signature, Did, PublicKey, SignatureBytes, Signer};

/// Frames larger than this are refused by [`read_frame`].
pub const MAX_FRAME_LEN: u32 = 16 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageType {
    Invitation,
    CredentialPresentation,
    Challenge,
    ChallengeResponse,
    PairwiseOffer,
    AdmissionCredential,
    RecordStored,
    ConsentRequest,
    ConsentDecision,
    RewrapToken,
    EmergencyRequest,
    EmergencyGrant,
}

impl MessageType {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageType::Invitation => "invitation",
            MessageType::CredentialPresentation => "credential_presentation",
            MessageType::Challenge => "challenge",
            MessageType::ChallengeResponse => "challenge_response",
            MessageType::PairwiseOffer => "pairwise_offer",
            MessageType::AdmissionCredential => "admission_credential",
            MessageType::RecordStored => "record_stored",
            MessageType::ConsentRequest => "consent_request",
            MessageType::ConsentDecision => "consent_decision",
            MessageType::RewrapToken => "rewrap_token",
            MessageType::EmergencyRequest => "emergency_request",
            MessageType::EmergencyGrant => "emergency_grant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentMessage {
    pub from: Did,
    pub to: Did,
    #[serde(rename = "type")]
    pub kind: MessageType,
    pub body: Value,
    #[serde(with = "hex_array")]
    pub nonce: [u8; 32],
    #[serde(with = "b64_array")]
    pub signature: SignatureBytes,
}

#[derive(Serialize)]
struct SignedPart<'a> {
    from: &'a Did,
    to: &'a Did,
    #[serde(rename = "type")]
    kind: MessageType,
    body: &'a Value,
    #[serde(with = "hex_array")]
    nonce: &'a [u8; 32],
}

impl AgentMessage {
    /// Builds and signs a message from `signer` with a fresh nonce.
    pub fn new<S, B, R>(signer: &S, to: &Did, kind: MessageType, body: &B, rng: &mut R) -> AgentMessage
    where
        S: Signer + ?Sized,
        B: Serialize + ?Sized,
        R: CryptoRngCore + ?Sized,
    {
        let mut nonce = [0u8; 32];
        rng.fill_bytes(&mut nonce);
        let mut msg = AgentMessage {
            from: signer.did().clone(),
            to: to.clone(),
            kind,
            body: serde_json::to_value(body).expect("message body serializes"),
            nonce,
            signature: [0u8; 64],
        };
        msg.signature = signer.sign(&msg.signing_bytes());
        msg
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        canonical::to_canonical_bytes(&SignedPart {
            from: &self.from,
            to: &self.to,
            kind: self.kind,
            body: &self.body,
            nonce: &self.nonce,
        })
    }

    pub fn verify_with(&self, public_key: &PublicKey) -> bool {
        verify_signature(public_key, &self.signing_bytes(), &self.signature)
    }

    /// Decodes the body, treating a shape mismatch as a protocol violation.
    pub fn body_as<T: DeserializeOwned>(&self) -> Result<T, AgentError> {
        serde_json::from_value(self.body.clone())
            .map_err(|e| AgentError::ProtocolViolation(format!("malformed {} body: {e}", self.kind.as_str())))
    }

    pub fn to_canonical_bytes(&self) -> Vec<u8> {
        canonical::to_canonical_bytes(self)
    }

    /// 4-byte big-endian length followed by the canonical JSON.
    pub fn to_frame(&self) -> Vec<u8> {
        let payload = self.to_canonical_bytes();
        let mut frame = Vec::with_capacity(payload.len() + 4);
        frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        frame.extend_from_slice(&payload);
        frame
    }

    pub fn from_frame(frame: &[u8]) -> Result<AgentMessage, AgentError> {
        let (len, payload) = frame
            .split_first_chunk::<4>()
            .ok_or_else(|| AgentError::ProtocolViolation("frame shorter than its length prefix".into()))?;
        if u32::from_be_bytes(*len) as usize != payload.len() {
            return Err(AgentError::ProtocolViolation("frame length prefix mismatch".into()));
        }
        serde_json::from_slice(payload).map_err(|e| AgentError::ProtocolViolation(format!("undecodable frame: {e}")))
    }
}

pub fn write_frame<W: Write + ?Sized>(w: &mut W, msg: &AgentMessage) -> io::Result<()> {
    w.write_all(&msg.to_frame())?;
    w.flush()
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read + ?Sized>(r: &mut R) -> Result<Option<AgentMessage>, AgentError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(AgentError::Io(e)),
    }
    let n = u32::from_be_bytes(len);
    if n > MAX_FRAME_LEN {
        return Err(AgentError::ProtocolViolation(format!("frame of {n} bytes exceeds limit")));
    }
    let mut payload = vec![0u8; n as usize];
    r.read_exact(&mut payload)?;
    serde_json::from_slice(&payload)
        .map(Some)
        .map_err(|e| AgentError::ProtocolViolation(format!("undecodable frame: {e}")))
}

/// Every frame exchanged in a run, in delivery order.
#[derive(Debug, Clone, Default)]
pub struct Transcript {
    frames: Vec<Vec<u8>>,
}

impl Transcript {
    pub fn new() -> Transcript {
        Transcript::default()
    }

    /// Records the frame and hands back the message as the receiver decodes it.
    pub fn deliver(&mut self, msg: AgentMessage) -> AgentMessage {
        let frame = msg.to_frame();
        let decoded = AgentMessage::from_frame(&frame).expect("own frames decode");
        self.frames.push(frame);
        decoded
    }

    pub fn deliver_all(&mut self, msgs: Vec<AgentMessage>) -> Vec<AgentMessage> {
        msgs.into_iter().map(|m| self.deliver(m)).collect()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn messages(&self) -> Vec<AgentMessage> {
        self.frames
            .iter()
            .map(|f| AgentMessage::from_frame(f).expect("recorded frames decode"))
            .collect()
    }

    /// Concatenated frames, exactly as they would cross a stream socket.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.frames.concat()
    }

    /// One canonical JSON message per line.
    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for frame in &self.frames {
            out.extend_from_slice(&frame[4..]);
            out.push(b'\n');
        }
        out
    }
}
