//! Transactions, blocks and the replay rules that define a valid chain.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::LedgerError;
use crate::canonical::{self, b64_array, hex_array};
use crate::cas::Cid;
use crate::identity::{verify_signature, Did, PublicKey, SignatureBytes, Signer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TxKind {
    DidRegistration {
        did: Did,
        #[serde(with = "b64_array")]
        public_key: PublicKey,
        #[serde(with = "hex_array")]
        did_document_hash: [u8; 32],
    },
    CredentialAnchor {
        #[serde(with = "hex_array")]
        credential_hash: [u8; 32],
        issuer_did: Did,
    },
    RecordAnchor {
        cid: Cid,
        patient_did: Did,
    },
    KeyAnchor {
        cid: Cid,
        envelope_hash: Cid,
        version: u64,
        authorized_by_did: Did,
    },
    EmergencyAccess {
        cid: Cid,
        requester_did: Did,
        server_did: Did,
        #[serde(with = "hex_array")]
        justification_hash: [u8; 32],
    },
}

impl TxKind {
    pub fn name(&self) -> &'static str {
        match self {
            TxKind::DidRegistration { .. } => "did_registration",
            TxKind::CredentialAnchor { .. } => "credential_anchor",
            TxKind::RecordAnchor { .. } => "record_anchor",
            TxKind::KeyAnchor { .. } => "key_anchor",
            TxKind::EmergencyAccess { .. } => "emergency_access",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub kind: TxKind,
    pub timestamp: u64,
    pub signer_did: Did,
    #[serde(with = "b64_array")]
    pub signature: SignatureBytes,
}

#[derive(Serialize)]
struct UnsignedTx<'a> {
    kind: &'a TxKind,
    timestamp: u64,
    signer_did: &'a Did,
}

impl Transaction {
    pub fn sign<S: Signer + ?Sized>(kind: TxKind, timestamp: u64, signer: &S) -> Transaction {
        let mut tx = Transaction {
            kind,
            timestamp,
            signer_did: signer.did().clone(),
            signature: [0u8; 64],
        };
        tx.signature = signer.sign(&tx.signing_bytes());
        tx
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        canonical::to_canonical_bytes(&UnsignedTx {
            kind: &self.kind,
            timestamp: self.timestamp,
            signer_did: &self.signer_did,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub height: u64,
    #[serde(with = "hex_array")]
    pub prev_hash: [u8; 32],
    pub transactions: Vec<Transaction>,
    #[serde(with = "hex_array")]
    pub block_hash: [u8; 32],
}

#[derive(Serialize)]
struct HashedPart<'a> {
    height: u64,
    #[serde(with = "hex_array")]
    prev_hash: &'a [u8; 32],
    transactions: &'a [Transaction],
}

pub fn compute_block_hash(height: u64, prev_hash: &[u8; 32], transactions: &[Transaction]) -> [u8; 32] {
    Sha256::digest(canonical::to_canonical_bytes(&HashedPart { height, prev_hash, transactions })).into()
}

impl Block {
    pub fn seal(height: u64, prev_hash: [u8; 32], transactions: Vec<Transaction>) -> Block {
        let block_hash = compute_block_hash(height, &prev_hash, &transactions);
        Block { height, prev_hash, transactions, block_hash }
    }

    /// Fixed first block: height 0, zero predecessor, no transactions.
    pub fn genesis() -> Block {
        Block::seal(0, [0u8; 32], Vec::new())
    }

    pub fn hash_is_consistent(&self) -> bool {
        compute_block_hash(self.height, &self.prev_hash, &self.transactions) == self.block_hash
    }

    pub fn to_line(&self) -> Vec<u8> {
        canonical::to_canonical_bytes(self)
    }
}

/// Derived indexes over the chain, rebuilt by replay.
#[derive(Debug, Default, Clone)]
pub(crate) struct ChainState {
    pub dids: HashMap<Did, (PublicKey, [u8; 32])>,
    pub credentials: HashSet<[u8; 32]>,
    pub records: HashMap<Cid, Did>,
    pub key_versions: HashMap<Cid, u64>,
}

impl ChainState {
    pub fn check(&self, tx: &Transaction) -> Result<(), LedgerError> {
        let signer_key = match &tx.kind {
            TxKind::DidRegistration { did, public_key, .. } => {
                if self.dids.contains_key(did) {
                    return Err(LedgerError::DuplicateDid(did.clone()));
                }
                if tx.signer_did != *did || !did.is_controlled_by(public_key) {
                    return Err(LedgerError::BadSignature(tx.signer_did.clone()));
                }
                *public_key
            }
            _ => {
                self.dids
                    .get(&tx.signer_did)
                    .ok_or_else(|| LedgerError::UnknownSignerDid(tx.signer_did.clone()))?
                    .0
            }
        };
        if !verify_signature(&signer_key, &tx.signing_bytes(), &tx.signature) {
            return Err(LedgerError::BadSignature(tx.signer_did.clone()));
        }
        match &tx.kind {
            TxKind::DidRegistration { .. } => {}
            TxKind::CredentialAnchor { issuer_did, .. } => {
                if *issuer_did != tx.signer_did {
                    return Err(LedgerError::SignerMismatch(tx.signer_did.clone()));
                }
            }
            TxKind::RecordAnchor { cid, patient_did } => {
                if self.records.contains_key(cid) {
                    return Err(LedgerError::DuplicateRecordAnchor(*cid));
                }
                if !self.dids.contains_key(patient_did) {
                    return Err(LedgerError::UnknownDid(patient_did.clone()));
                }
            }
            TxKind::KeyAnchor { cid, version, .. } => {
                if !self.records.contains_key(cid) {
                    return Err(LedgerError::UnknownCid(*cid));
                }
                let expected = self.key_versions.get(cid).copied().unwrap_or(0) + 1;
                if *version != expected {
                    return Err(LedgerError::VersionGap { cid: *cid, expected, found: *version });
                }
            }
            TxKind::EmergencyAccess { cid, server_did, requester_did, .. } => {
                if !self.records.contains_key(cid) {
                    return Err(LedgerError::UnknownCid(*cid));
                }
                if *server_did != tx.signer_did {
                    return Err(LedgerError::SignerMismatch(tx.signer_did.clone()));
                }
                if !self.dids.contains_key(requester_did) {
                    return Err(LedgerError::UnknownDid(requester_did.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, tx: &Transaction) {
        match &tx.kind {
            TxKind::DidRegistration { did, public_key, did_document_hash } => {
                self.dids.insert(did.clone(), (*public_key, *did_document_hash));
            }
            TxKind::CredentialAnchor { credential_hash, .. } => {
                self.credentials.insert(*credential_hash);
            }
            TxKind::RecordAnchor { cid, patient_did } => {
                self.records.insert(*cid, patient_did.clone());
            }
            TxKind::KeyAnchor { cid, version, .. } => {
                self.key_versions.insert(*cid, *version);
            }
            TxKind::EmergencyAccess { .. } => {}
        }
    }
}

/// Outcome of replaying a chain from genesis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainReport {
    pub valid: bool,
    pub blocks: u64,
    pub first_bad_height: Option<u64>,
    pub reason: Option<String>,
}

impl ChainReport {
    fn bad(blocks: u64, height: u64, reason: impl Into<String>) -> ChainReport {
        ChainReport {
            valid: false,
            blocks,
            first_bad_height: Some(height),
            reason: Some(reason.into()),
        }
    }
}

/// Replays already-parsed blocks.
pub(crate) fn replay_blocks(blocks: &[Block]) -> (ChainReport, ChainState) {
    let mut state = ChainState::default();
    let genesis = Block::genesis();
    for (i, block) in blocks.iter().enumerate() {
        let h = i as u64;
        if let Err(reason) = check_block(block, h, blocks.get(i.wrapping_sub(1)), &genesis, &mut state) {
            return (ChainReport::bad(blocks.len() as u64, h, reason), state);
        }
    }
    if blocks.is_empty() {
        return (ChainReport::bad(0, 0, "missing genesis block"), state);
    }
    (
        ChainReport { valid: true, blocks: blocks.len() as u64, first_bad_height: None, reason: None },
        state,
    )
}

fn check_block(
    block: &Block,
    height: u64,
    prev: Option<&Block>,
    genesis: &Block,
    state: &mut ChainState,
) -> Result<(), String> {
    if block.height != height {
        return Err(format!("height field {} at position {height}", block.height));
    }
    if height == 0 {
        if block != genesis {
            return Err("genesis block differs from the fixed genesis".into());
        }
        return Ok(());
    }
    let prev = prev.expect("non-genesis block has a predecessor");
    if block.prev_hash != prev.block_hash {
        return Err("prev_hash does not link to the predecessor".into());
    }
    if !block.hash_is_consistent() {
        return Err("block_hash does not match contents".into());
    }
    for tx in &block.transactions {
        state.check(tx).map_err(|e| format!("transaction rejected on replay: {e}"))?;
        state.apply(tx);
    }
    Ok(())
}

/// Parses and replays a newline-delimited chain file. Each line must be the
/// exact canonical encoding of its block.
pub fn verify_jsonl(bytes: &[u8]) -> ChainReport {
    let (report, _) = parse_and_replay(bytes);
    report
}

pub(crate) fn parse_and_replay(bytes: &[u8]) -> (ChainReport, Vec<Block>) {
    let mut segments: Vec<&[u8]> = bytes.split(|b| *b == b'\n').collect();
    let terminated = segments.last().is_some_and(|s| s.is_empty());
    if terminated {
        segments.pop();
    }
    let total = segments.len() as u64;
    let mut blocks = Vec::with_capacity(segments.len());
    for (i, line) in segments.iter().enumerate() {
        let h = i as u64;
        let block: Block = match serde_json::from_slice(line) {
            Ok(b) => b,
            Err(e) => return (ChainReport::bad(total, h, format!("unparseable block: {e}")), blocks),
        };
        if block.to_line() != *line {
            return (ChainReport::bad(total, h, "line is not the canonical block encoding"), blocks);
        }
        blocks.push(block);
    }
    let (report, _) = replay_blocks(&blocks);
    if report.valid && !terminated {
        let last = total.saturating_sub(1);
        return (ChainReport::bad(total, last, "chain file is not newline-terminated"), blocks);
    }
    (report, blocks)
}
