//! Read-only accountability reports over the ledger and the object store.
//!
//! Every report is a pure function of (ledger, store) and comes in two
//! forms: a JSON value for machines and a fixed-width table for people.

use std::fmt::Write as _;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cas::{CasError, Cid, ObjectStore};
use crate::envelope::KeyEnvelope;
use crate::error::ErrorCode;
use crate::identity::Did;
use crate::ledger::{ChainReport, EmergencyAccessEntry, EmergencyFilter, KeyAnchorEntry, Ledger, LedgerError, TxKind};

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("record {0} is not anchored")]
    UnknownCid(Cid),
    #[error("envelope {envelope} for {cid} v{version} is missing from the store")]
    NotFound { cid: Cid, version: u64, envelope: Cid },
    #[error("envelope {envelope} for {cid} v{version} is unreadable: {reason}")]
    Corrupt { cid: Cid, version: u64, envelope: Cid, reason: String },
}

impl AuditError {
    pub fn code(&self) -> ErrorCode {
        match self {
            AuditError::UnknownCid(_) => ErrorCode::UnknownCid,
            AuditError::NotFound { .. } => ErrorCode::NotFound,
            AuditError::Corrupt { .. } => ErrorCode::IntegrityViolation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConsentRow {
    pub version: u64,
    pub height: u64,
    pub timestamp: u64,
    pub authorized_by: Did,
    pub policy: String,
    pub envelope: Cid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConsentReport {
    pub cid: Cid,
    pub rows: Vec<ConsentRow>,
}

fn load_envelope(cas: &dyn ObjectStore, anchor: &KeyAnchorEntry) -> Result<KeyEnvelope, AuditError> {
    let corrupt = |reason: String| AuditError::Corrupt {
        cid: anchor.cid,
        version: anchor.version,
        envelope: anchor.envelope_hash,
        reason,
    };
    let bytes = cas.get(&anchor.envelope_hash).map_err(|e| match e {
        CasError::NotFound(_) => AuditError::NotFound {
            cid: anchor.cid,
            version: anchor.version,
            envelope: anchor.envelope_hash,
        },
        other => corrupt(other.to_string()),
    })?;
    let env = KeyEnvelope::from_bytes(&bytes).map_err(|e| corrupt(e.to_string()))?;
    if env.cid != anchor.cid || env.version != anchor.version {
        return Err(corrupt(format!("holds {} v{}", env.cid, env.version)));
    }
    Ok(env)
}

/// One row per key anchor of `cid`, oldest first.
pub fn consent_report(ledger: &Ledger, cas: &dyn ObjectStore, cid: &Cid) -> Result<ConsentReport, AuditError> {
    let history = ledger.consent_history(cid).map_err(|e| match e {
        LedgerError::UnknownCid(c) => AuditError::UnknownCid(c),
        _ => AuditError::UnknownCid(*cid),
    })?;
    let rows = history
        .iter()
        .map(|anchor| {
            let env = load_envelope(cas, anchor)?;
            Ok(ConsentRow {
                version: anchor.version,
                height: anchor.height,
                timestamp: anchor.timestamp,
                authorized_by: anchor.authorized_by_did.clone(),
                policy: env.consent_policy().to_string(),
                envelope: anchor.envelope_hash,
            })
        })
        .collect::<Result<Vec<_>, AuditError>>()?;
    Ok(ConsentReport { cid: *cid, rows })
}

impl ConsentReport {
    pub fn to_table(&self) -> String {
        let mut out = format!("consent history for {}\n", self.cid);
        let _ = writeln!(out, "{:>7}  {:>6}  {:>10}  {:<40}  policy", "version", "height", "timestamp", "authorized_by");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>7}  {:>6}  {:>10}  {:<40}  {}",
                r.version, r.height, r.timestamp, r.authorized_by, r.policy
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EmergencyReport {
    pub rows: Vec<EmergencyAccessEntry>,
}

/// Emergency overrides matching `filter`, in chain order.
pub fn emergency_report(ledger: &Ledger, filter: &EmergencyFilter) -> EmergencyReport {
    EmergencyReport { rows: ledger.emergency_accesses(filter) }
}

/// Whether `justification` is the text behind a logged hash.
pub fn justification_matches(row: &EmergencyAccessEntry, justification: &str) -> bool {
    let digest: [u8; 32] = Sha256::digest(justification.as_bytes()).into();
    digest == row.justification_hash
}

impl EmergencyReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>6}  {:>10}  {:<71}  {:<40}  {:<40}  justification_sha256",
            "height", "timestamp", "cid", "requester", "server"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>6}  {:>10}  {:<71}  {:<40}  {:<40}  {}",
                r.height,
                r.timestamp,
                r.cid,
                r.requester_did,
                r.server_did,
                hex::encode(r.justification_hash)
            );
        }
        out
    }
}

/// Pairing of override grants with emergency-access events.
///
/// A key anchor past version 1 that was not authorized by the record's
/// owner is an override grant. Each must follow an unconsumed
/// emergency-access event for the same record by the same server.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PairingReport {
    pub events: usize,
    pub override_grants: usize,
    pub paired: usize,
    pub grants_without_log: Vec<KeyAnchorEntry>,
    pub events_without_grant: Vec<EmergencyAccessEntry>,
}

impl PairingReport {
    pub fn is_clean(&self) -> bool {
        self.grants_without_log.is_empty() && self.events_without_grant.is_empty()
    }
}

pub fn emergency_pairing(ledger: &Ledger) -> PairingReport {
    let mut open: Vec<EmergencyAccessEntry> = Vec::new();
    let mut report = PairingReport {
        events: 0,
        override_grants: 0,
        paired: 0,
        grants_without_log: Vec::new(),
        events_without_grant: Vec::new(),
    };
    let events = ledger.emergency_accesses(&EmergencyFilter::All);
    let mut events = events.into_iter().peekable();
    for anchor in ledger.all_key_anchors() {
        while let Some(e) = events.next_if(|e| e.height < anchor.height) {
            report.events += 1;
            open.push(e);
        }
        let owner = ledger.record_owner(&anchor.cid);
        if anchor.version < 2 || owner.as_ref() == Some(&anchor.authorized_by_did) {
            continue;
        }
        report.override_grants += 1;
        match open
            .iter()
            .position(|e| e.cid == anchor.cid && e.server_did == anchor.authorized_by_did)
        {
            Some(i) => {
                open.remove(i);
                report.paired += 1;
            }
            None => report.grants_without_log.push(anchor),
        }
    }
    for e in events {
        report.events += 1;
        open.push(e);
    }
    report.events_without_grant = open;
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    Chain,
    MissingRecord,
    MissingEnvelope,
    CorruptObject,
    EnvelopeMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub height: Option<u64>,
    pub cid: Option<Cid>,
    pub version: Option<u64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IntegrityReport {
    pub chain: ChainReport,
    pub findings: Vec<Finding>,
}

impl IntegrityReport {
    pub fn is_clean(&self) -> bool {
        self.chain.valid && self.findings.is_empty()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        match &self.chain.first_bad_height {
            None => {
                let _ = writeln!(out, "chain: valid, {} blocks", self.chain.blocks);
            }
            Some(h) => {
                let reason = self.chain.reason.as_deref().unwrap_or("");
                let _ = writeln!(out, "chain: INVALID at height {h}: {reason}");
            }
        }
        if self.findings.is_empty() {
            out.push_str("store: consistent with anchors\n");
        }
        for f in &self.findings {
            let height = f.height.map(|h| h.to_string()).unwrap_or_else(|| "-".into());
            let cid = f.cid.map(|c| c.to_string()).unwrap_or_else(|| "-".into());
            let _ = writeln!(out, "{:<17}  height {:>5}  {}  {}", format!("{:?}", f.kind), height, cid, f.detail);
        }
        out
    }
}

/// Chain verification (from the persisted file when there is one) plus a
/// check that every anchored record and envelope is present and intact.
pub fn integrity_report(ledger: &Ledger, cas: &dyn ObjectStore) -> IntegrityReport {
    let chain = match ledger.path() {
        Some(path) => Ledger::verify_file(path).unwrap_or_else(|e| ChainReport {
            valid: false,
            blocks: 0,
            first_bad_height: Some(0),
            reason: Some(e.to_string()),
        }),
        None => ledger.verify_chain(),
    };
    let mut findings = Vec::new();
    if let (false, Some(h)) = (chain.valid, chain.first_bad_height) {
        findings.push(Finding {
            kind: FindingKind::Chain,
            height: Some(h),
            cid: None,
            version: None,
            detail: chain.reason.clone().unwrap_or_default(),
        });
    }
    for (height, tx) in ledger.transactions() {
        match &tx.kind {
            TxKind::RecordAnchor { cid, .. } => match cas.get(cid) {
                Ok(_) => {}
                Err(CasError::NotFound(_)) => findings.push(Finding {
                    kind: FindingKind::MissingRecord,
                    height: Some(height),
                    cid: Some(*cid),
                    version: None,
                    detail: "record ciphertext missing".into(),
                }),
                Err(e) => findings.push(Finding {
                    kind: FindingKind::CorruptObject,
                    height: Some(height),
                    cid: Some(*cid),
                    version: None,
                    detail: e.to_string(),
                }),
            },
            TxKind::KeyAnchor { cid, envelope_hash, version, authorized_by_did } => {
                let anchor = KeyAnchorEntry {
                    height,
                    timestamp: tx.timestamp,
                    signer_did: tx.signer_did.clone(),
                    cid: *cid,
                    envelope_hash: *envelope_hash,
                    version: *version,
                    authorized_by_did: authorized_by_did.clone(),
                };
                if let Err(e) = load_envelope(cas, &anchor) {
                    let kind = match &e {
                        AuditError::NotFound { .. } => FindingKind::MissingEnvelope,
                        AuditError::Corrupt { reason, .. } if reason.starts_with("holds") => {
                            FindingKind::EnvelopeMismatch
                        }
                        _ => FindingKind::CorruptObject,
                    };
                    findings.push(Finding {
                        kind,
                        height: Some(height),
                        cid: Some(*cid),
                        version: Some(*version),
                        detail: e.to_string(),
                    });
                }
            }
            _ => {}
        }
    }
    IntegrityReport { chain, findings }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abe::AttributeSet;
    use crate::agents::deployment::new_authority;
    use crate::agents::{flows, Deployment, Transcript};
    use crate::cas::FsStore;
    use crate::ledger::StepClock;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    struct World {
        _dir: tempfile::TempDir,
        store_root: std::path::PathBuf,
        d: Deployment,
        cid: Cid,
        doctor: Did,
    }

    fn world(with_emergency: bool) -> World {
        let dir = tempfile::tempdir().unwrap();
        let store_root = dir.path().join("cas");
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let ledger = Ledger::create(dir.path().join("ledger.jsonl"), Box::new(StepClock::new(1_000, 1))).unwrap();
        let store = FsStore::open(&store_root).unwrap();
        let mut d = Deployment::provision(ledger, store, new_authority([3u8; 32]), "st-mary", &mut rng).unwrap();
        let mut t = Transcript::new();
        let mut alice = d.register_patient("alice", &mut rng).unwrap();
        flows::admit(&mut alice, &mut d.hospital, &d.services, &mut t, &mut rng).unwrap();
        let (cid, _) = flows::store_record(&d.hospital, &mut alice, &d.services, &mut t, b"bp 120/80", &mut rng).unwrap();
        let attrs = AttributeSet::new(["dept:er"]).unwrap();
        let mut bob = d.register_doctor("bob", &attrs, &mut rng).unwrap();
        if with_emergency {
            flows::connect_emergency(&mut bob, &mut d.emergency, &d.services, &mut t, &mut rng).unwrap();
            flows::emergency_access(&mut bob, &mut d.emergency, &d.services, &mut t, &cid, "unconscious", &mut rng)
                .unwrap();
        }
        d.services.ledger.sync().unwrap();
        World { _dir: dir, store_root, doctor: bob.did().clone(), d, cid }
    }

    #[test]
    fn consent_report_lists_every_version() {
        let w = world(true);
        let report = consent_report(&w.d.services.ledger, w.d.services.cas.as_ref(), &w.cid).unwrap();
        assert_eq!(report.rows.iter().map(|r| r.version).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(report.rows[0].authorized_by, *w.d.hospital.did());
        assert_eq!(report.rows[1].authorized_by, *w.d.emergency.did());
        assert!(report.rows[1].policy.contains("dept:er"));
        assert!(report.to_table().contains("dept:er"));
        let json = serde_json::to_value(&report).unwrap();
        assert_eq!(json["rows"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn consent_report_of_unknown_cid() {
        let w = world(false);
        let err = consent_report(&w.d.services.ledger, w.d.services.cas.as_ref(), &Cid::of(b"nope")).unwrap_err();
        assert_eq!(err.code(), ErrorCode::UnknownCid);
    }

    #[test]
    fn emergency_rows_carry_requester_and_justification() {
        let w = world(true);
        let report = emergency_report(&w.d.services.ledger, &EmergencyFilter::Cid(w.cid));
        assert_eq!(report.rows.len(), 1);
        let row = &report.rows[0];
        assert_eq!(row.requester_did, w.doctor);
        assert_eq!(row.server_did, *w.d.emergency.did());
        assert!(justification_matches(row, "unconscious"));
        assert!(!justification_matches(row, "curious"));
        assert!(emergency_report(&w.d.services.ledger, &EmergencyFilter::Requester(w.d.hospital.did().clone()))
            .rows
            .is_empty());
    }

    #[test]
    fn pairing_is_clean_for_honest_overrides() {
        let w = world(true);
        let p = emergency_pairing(&w.d.services.ledger);
        assert_eq!((p.events, p.override_grants, p.paired), (1, 1, 1));
        assert!(p.is_clean());
    }

    #[test]
    fn override_without_access_event_is_flagged() {
        let w = world(false);
        let services = &w.d.services;
        let (_, current) = services.latest_envelope(&w.cid).unwrap();
        let mut next = current.clone();
        next.version = 2;
        services.anchor_envelope(&next, w.d.emergency.did(), &w.d.emergency.identity).unwrap();
        let p = emergency_pairing(&services.ledger);
        assert_eq!(p.override_grants, 1);
        assert_eq!(p.grants_without_log.len(), 1);
        assert_eq!(p.grants_without_log[0].version, 2);
    }

    #[test]
    fn integrity_is_clean_then_detects_tampering() {
        let w = world(true);
        let (ledger, cas) = (&w.d.services.ledger, w.d.services.cas.as_ref());
        assert!(integrity_report(ledger, cas).is_clean());

        let store = FsStore::open(&w.store_root).unwrap();
        let v2 = ledger.latest_key_anchor(&w.cid).unwrap();
        std::fs::remove_file(store.object_path(&v2.envelope_hash)).unwrap();
        std::fs::write(store.object_path(&w.cid), b"garbage").unwrap();
        let report = integrity_report(ledger, cas);
        let kinds: Vec<_> = report.findings.iter().map(|f| f.kind).collect();
        assert_eq!(kinds, vec![FindingKind::CorruptObject, FindingKind::MissingEnvelope]);
        assert!(report.chain.valid);
        assert!(report.to_table().contains("MissingEnvelope"));
    }

    #[test]
    fn integrity_reports_chain_tampering_height() {
        let w = world(false);
        let path = w.d.services.ledger.path().unwrap().to_path_buf();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        lines[3] = lines[3].replacen("\"timestamp\":", "\"timestamp\":9", 1);
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        let report = integrity_report(&w.d.services.ledger, w.d.services.cas.as_ref());
        assert!(!report.is_clean());
        assert_eq!(report.chain.first_bad_height, Some(3));
        assert_eq!(report.findings[0].kind, FindingKind::Chain);
    }
}
