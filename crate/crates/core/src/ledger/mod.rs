//! Simulated append-only ledger.
//!
//! One transaction per block, sealed synchronously on submission; there is
//! no consensus. Blocks are linked by SHA-256 over their canonical JSON, and
//! a file-backed ledger persists one canonical block per line. All
//! submissions pass a single write gate; readers only ever see sealed blocks.

mod chain;
mod clock;

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cas::Cid;
use crate::error::ErrorCode;
use crate::identity::{Did, KeyResolver, LedgerView, PublicKey, Signer};

pub use chain::{compute_block_hash, verify_jsonl, Block, ChainReport, Transaction, TxKind};
pub use clock::{Clock, StepClock, SystemClock};

use chain::{parse_and_replay, replay_blocks, ChainState};

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("signature by {0} does not verify")]
    BadSignature(Did),
    #[error("signer {0} does not match the transaction's actor field")]
    SignerMismatch(Did),
    #[error("{0} is already registered")]
    DuplicateDid(Did),
    #[error("key anchor for {cid}: expected version {expected}, got {found}")]
    VersionGap { cid: Cid, expected: u64, found: u64 },
    #[error("record {0} is already anchored")]
    DuplicateRecordAnchor(Cid),
    #[error("signer {0} is not registered")]
    UnknownSignerDid(Did),
    #[error("{0} is not registered")]
    UnknownDid(Did),
    #[error("record {0} is not anchored")]
    UnknownCid(Cid),
    #[error("chain invalid at height {height}: {reason}")]
    Corrupt { height: u64, reason: String },
    #[error("ledger file already exists at {0}")]
    AlreadyExists(PathBuf),
    #[error("ledger i/o: {0}")]
    Io(#[from] io::Error),
}

impl LedgerError {
    pub fn code(&self) -> ErrorCode {
        match self {
            LedgerError::BadSignature(_) | LedgerError::SignerMismatch(_) => ErrorCode::BadSignature,
            LedgerError::DuplicateDid(_) => ErrorCode::DuplicateDid,
            LedgerError::VersionGap { .. } => ErrorCode::VersionGap,
            LedgerError::DuplicateRecordAnchor(_) => ErrorCode::DuplicateRecordAnchor,
            LedgerError::UnknownSignerDid(_) => ErrorCode::UnknownSignerDid,
            LedgerError::UnknownDid(_) => ErrorCode::UnknownDid,
            LedgerError::UnknownCid(_) => ErrorCode::UnknownCid,
            LedgerError::Corrupt { .. } => ErrorCode::IntegrityViolation,
            LedgerError::AlreadyExists(_) => ErrorCode::DirectoryNotEmpty,
            LedgerError::Io(_) => ErrorCode::Io,
        }
    }
}

/// Where a transaction landed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub height: u64,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedDid {
    pub public_key: PublicKey,
    pub did_document_hash: [u8; 32],
}

/// A `KeyAnchor` transaction flattened with its position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KeyAnchorEntry {
    pub height: u64,
    pub timestamp: u64,
    pub signer_did: Did,
    pub cid: Cid,
    pub envelope_hash: Cid,
    pub version: u64,
    pub authorized_by_did: Did,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EmergencyAccessEntry {
    pub height: u64,
    pub timestamp: u64,
    pub cid: Cid,
    pub requester_did: Did,
    pub server_did: Did,
    #[serde(with = "crate::canonical::hex_array")]
    pub justification_hash: [u8; 32],
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum EmergencyFilter {
    #[default]
    All,
    Cid(Cid),
    Requester(Did),
}

struct Inner {
    blocks: Vec<Block>,
    state: ChainState,
}

pub struct Ledger {
    inner: RwLock<Inner>,
    clock: Box<dyn Clock>,
    path: Option<PathBuf>,
}

impl Ledger {
    pub fn in_memory(clock: Box<dyn Clock>) -> Ledger {
        Ledger {
            inner: RwLock::new(Inner { blocks: vec![Block::genesis()], state: ChainState::default() }),
            clock,
            path: None,
        }
    }

    /// Starts a new chain file containing only the genesis block.
    pub fn create(path: impl Into<PathBuf>, clock: Box<dyn Clock>) -> Result<Ledger, LedgerError> {
        let path = path.into();
        if path.exists() {
            return Err(LedgerError::AlreadyExists(path));
        }
        let mut line = Block::genesis().to_line();
        line.push(b'\n');
        fs::write(&path, line)?;
        let mut ledger = Ledger::in_memory(clock);
        ledger.path = Some(path);
        Ok(ledger)
    }

    /// Loads and fully replays a chain file; refuses an invalid chain.
    pub fn open(path: impl Into<PathBuf>, clock: Box<dyn Clock>) -> Result<Ledger, LedgerError> {
        let path = path.into();
        let bytes = fs::read(&path)?;
        let (report, blocks) = parse_and_replay(&bytes);
        if !report.valid {
            return Err(LedgerError::Corrupt {
                height: report.first_bad_height.unwrap_or(0),
                reason: report.reason.unwrap_or_default(),
            });
        }
        let (_, state) = replay_blocks(&blocks);
        Ok(Ledger { inner: RwLock::new(Inner { blocks, state }), clock, path: Some(path) })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Picks up blocks appended to the backing file by another process.
    pub fn sync(&self) -> Result<(), LedgerError> {
        let Some(path) = &self.path else { return Ok(()) };
        let bytes = fs::read(path)?;
        let (report, blocks) = parse_and_replay(&bytes);
        if !report.valid {
            return Err(LedgerError::Corrupt {
                height: report.first_bad_height.unwrap_or(0),
                reason: report.reason.unwrap_or_default(),
            });
        }
        let mut inner = self.inner.write().unwrap();
        if blocks.len() > inner.blocks.len() {
            if blocks[..inner.blocks.len()] != inner.blocks[..] {
                return Err(LedgerError::Corrupt {
                    height: 0,
                    reason: "backing file diverged from the loaded chain".into(),
                });
            }
            let (_, state) = replay_blocks(&blocks);
            *inner = Inner { blocks, state };
        }
        Ok(())
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    /// Validates `tx` against the chain rules and seals it into a new block.
    pub fn submit(&self, tx: Transaction) -> Result<Receipt, LedgerError> {
        let mut inner = self.inner.write().unwrap();
        inner.state.check(&tx)?;
        let prev = inner.blocks.last().expect("genesis always present");
        let block = Block::seal(prev.height + 1, prev.block_hash, vec![tx]);
        if let Some(path) = &self.path {
            let mut line = block.to_line();
            line.push(b'\n');
            let mut file = OpenOptions::new().append(true).open(path)?;
            file.write_all(&line)?;
            file.flush()?;
        }
        let receipt = Receipt { height: block.height, index: 0 };
        inner.state.apply(&block.transactions[0]);
        inner.blocks.push(block);
        Ok(receipt)
    }

    /// Timestamps `kind` from the ledger clock, signs it and submits it.
    pub fn submit_signed<S: Signer + ?Sized>(&self, kind: TxKind, signer: &S) -> Result<Receipt, LedgerError> {
        let tx = Transaction::sign(kind, self.clock.now(), signer);
        self.submit(tx)
    }

    pub fn height(&self) -> u64 {
        self.inner.read().unwrap().blocks.len() as u64 - 1
    }

    pub fn blocks(&self) -> Vec<Block> {
        self.inner.read().unwrap().blocks.clone()
    }

    /// All transactions in chain order, with their block height.
    pub fn transactions(&self) -> Vec<(u64, Transaction)> {
        self.inner
            .read()
            .unwrap()
            .blocks
            .iter()
            .flat_map(|b| b.transactions.iter().map(move |t| (b.height, t.clone())))
            .collect()
    }

    /// The persisted byte form: one canonical block per line.
    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for block in &self.inner.read().unwrap().blocks {
            out.extend_from_slice(&block.to_line());
            out.push(b'\n');
        }
        out
    }

    pub fn verify_chain(&self) -> ChainReport {
        replay_blocks(&self.inner.read().unwrap().blocks).0
    }

    pub fn verify_file(path: &Path) -> Result<ChainReport, LedgerError> {
        Ok(verify_jsonl(&fs::read(path)?))
    }

    pub fn resolve_did(&self, did: &Did) -> Result<ResolvedDid, LedgerError> {
        self.inner
            .read()
            .unwrap()
            .state
            .dids
            .get(did)
            .map(|(public_key, did_document_hash)| ResolvedDid {
                public_key: *public_key,
                did_document_hash: *did_document_hash,
            })
            .ok_or_else(|| LedgerError::UnknownDid(did.clone()))
    }

    pub fn is_registered(&self, did: &Did) -> bool {
        self.inner.read().unwrap().state.dids.contains_key(did)
    }

    pub fn record_owner(&self, cid: &Cid) -> Option<Did> {
        self.inner.read().unwrap().state.records.get(cid).cloned()
    }

    pub fn anchored_records(&self) -> Vec<Cid> {
        let mut out: Vec<Cid> = self.inner.read().unwrap().state.records.keys().copied().collect();
        out.sort();
        out
    }

    /// Every `KeyAnchor` for `cid`, in version order.
    pub fn consent_history(&self, cid: &Cid) -> Result<Vec<KeyAnchorEntry>, LedgerError> {
        let inner = self.inner.read().unwrap();
        if !inner.state.records.contains_key(cid) {
            return Err(LedgerError::UnknownCid(*cid));
        }
        Ok(key_anchors(&inner.blocks).filter(|e| e.cid == *cid).collect())
    }

    pub fn all_key_anchors(&self) -> Vec<KeyAnchorEntry> {
        key_anchors(&self.inner.read().unwrap().blocks).collect()
    }

    pub fn latest_key_anchor(&self, cid: &Cid) -> Result<KeyAnchorEntry, LedgerError> {
        self.consent_history(cid)?
            .pop()
            .ok_or(LedgerError::UnknownCid(*cid))
    }

    pub fn emergency_accesses(&self, filter: &EmergencyFilter) -> Vec<EmergencyAccessEntry> {
        let inner = self.inner.read().unwrap();
        inner
            .blocks
            .iter()
            .flat_map(|b| b.transactions.iter().map(move |t| (b.height, t)))
            .filter_map(|(height, tx)| match &tx.kind {
                TxKind::EmergencyAccess { cid, requester_did, server_did, justification_hash } => {
                    Some(EmergencyAccessEntry {
                        height,
                        timestamp: tx.timestamp,
                        cid: *cid,
                        requester_did: requester_did.clone(),
                        server_did: server_did.clone(),
                        justification_hash: *justification_hash,
                    })
                }
                _ => None,
            })
            .filter(|e| match filter {
                EmergencyFilter::All => true,
                EmergencyFilter::Cid(c) => e.cid == *c,
                EmergencyFilter::Requester(d) => e.requester_did == *d,
            })
            .collect()
    }
}

fn key_anchors(blocks: &[Block]) -> impl Iterator<Item = KeyAnchorEntry> + '_ {
    blocks
        .iter()
        .flat_map(|b| b.transactions.iter().map(move |t| (b.height, t)))
        .filter_map(|(height, tx)| match &tx.kind {
            TxKind::KeyAnchor { cid, envelope_hash, version, authorized_by_did } => Some(KeyAnchorEntry {
                height,
                timestamp: tx.timestamp,
                signer_did: tx.signer_did.clone(),
                cid: *cid,
                envelope_hash: *envelope_hash,
                version: *version,
                authorized_by_did: authorized_by_did.clone(),
            }),
            _ => None,
        })
}

impl KeyResolver for Ledger {
    fn public_key_of(&self, did: &Did) -> Option<PublicKey> {
        self.resolve_did(did).ok().map(|r| r.public_key)
    }
}

impl LedgerView for Ledger {
    fn is_credential_anchored(&self, credential_hash: &[u8; 32]) -> bool {
        self.inner.read().unwrap().state.credentials.contains(credential_hash)
    }
}
