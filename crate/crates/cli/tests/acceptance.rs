//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sehr_cli::scenario::run_scenario_file;
use sehr_cli::Home;
use sovereign_ehr::abe::{abe_decrypt, abe_encrypt, keygen, parse_policy, satisfies};
use sovereign_ehr::agents::handshake::{ChallengeBody, PresentationBody};
use sovereign_ehr::agents::{flows, AgentError, AgentMessage, Decision, MessageType, Responder, Transcript};
use sovereign_ehr::audit::{consent_report, emergency_pairing, emergency_report, integrity_report, FindingKind};
use sovereign_ehr::envelope::encrypt_record;
use sovereign_ehr::identity::{issue_credential, sign_challenge, CredentialFault};
use sovereign_ehr::ledger::{verify_jsonl, EmergencyFilter, TxKind};
use sovereign_ehr::{key_tap, AbeAuthority, AttributeSet, Cid, ErrorCode, Ledger, MemoryStore, ObjectStore};
use support::oracle::{eval_text, subset, OMEGA, SUITE};
use support::scan::leaked;
use support::world::{World, RECORD};

type Verdict = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

const SCENARIOS: [&str; 2] = ["consent_lifecycle.json", "emergency_unconscious.json"];

/// Runs a shipped scenario into a fresh directory under `root`.
fn run_shipped(root: &Path, name: &str, tag: &str) -> Result<PathBuf, String> {
    let home = root.join(format!("{tag}-{name}"));
    run_scenario_file(&scenario(name), &home, None).map_err(|e| format!("{name}: {e}"))?;
    Ok(home)
}

fn within(limit: Duration, started: Instant) -> Result<Duration, String> {
    let took = started.elapsed();
    check!(took < limit, "took {took:?}, limit {limit:?}");
    Ok(took)
}

fn abe_oracle_equivalence() -> Verdict {
    let started = Instant::now();
    let universe = AttributeSet::new(OMEGA).unwrap();
    let authority = AbeAuthority::setup([1u8; 32], &universe).unwrap();
    let msk_keys: Vec<_> = (0..16u16)
        .map(|s| {
            let attrs = AttributeSet::new(subset(s)).unwrap();
            authority.issue_key(&attrs).ok()
        })
        .collect();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let (mut cases, mut mismatches) = (0, Vec::new());
    for (text, mask) in SUITE {
        let policy = parse_policy(text).unwrap();
        let ct = abe_encrypt(&[0xab; 16], &policy, &authority, &mut rng).unwrap();
        for s in 0..16u16 {
            cases += 1;
            let present: BTreeSet<String> = subset(s).into_iter().map(String::from).collect();
            let oracle = eval_text(text, &present);
            let opened = msk_keys[s as usize].as_ref().and_then(|k| abe_decrypt(&ct, k).ok());
            let attrs = AttributeSet::new(subset(s)).unwrap();
            if opened.is_some() != oracle || satisfies(&policy, &attrs) != oracle || (mask >> s & 1 == 1) != oracle {
                mismatches.push(format!("{text} / {:?}", subset(s)));
            }
            if let Some(p) = opened {
                check!(p == [0xab; 16], "wrong payload for {text}");
            }
        }
    }
    check!(cases == 192, "{cases} cases");
    check!(mismatches.is_empty(), "mismatches: {mismatches:?}");
    let took = within(Duration::from_secs(10), started)?;
    Ok(format!("192 cases, 0 mismatches, {took:.2?}"))
}

fn worked_example() -> Verdict {
    let universe = AttributeSet::new(OMEGA).unwrap();
    let (msk, _) = sovereign_ehr::abe::setup([2u8; 32], &universe).unwrap();
    let authority = AbeAuthority::setup([2u8; 32], &universe).unwrap();
    let policy = parse_policy("(a AND b) OR d").unwrap();
    let ct = abe_encrypt(&[9; 16], &policy, &authority, &mut ChaCha20Rng::seed_from_u64(2)).unwrap();
    let opens = |names: &[&str]| {
        AttributeSet::new(names.iter().copied())
            .ok()
            .and_then(|a| keygen(&msk, &a).ok())
            .is_some_and(|k| abe_decrypt(&ct, &k).is_ok())
    };
    check!(opens(&["d"]), "{{d}} should decrypt");
    check!(opens(&["a", "b"]), "{{a,b}} should decrypt");
    for fail in [&["a"][..], &["b"], &["c"], &[]] {
        check!(!opens(fail), "{fail:?} should not decrypt");
    }
    Ok("{d} and {a,b} open; {a}, {b}, {c}, {} refused".into())
}

fn consent_end_to_end(root: &Path) -> Verdict {
    let started = Instant::now();
    let mut w = World::new(31);
    let cid = w.store(RECORD);
    let req = w.cardio_requests(&cid);
    let outcome = w.answer(&req, Decision::Grant { narrowed: None });
    check!(outcome.version == Some(2), "grant produced {:?}", outcome.version);
    let read = w.cardio.access_record(&w.d.services, &cid).map_err(|e| e.to_string())?;
    check!(read == RECORD, "plaintext differs");
    w.revoke(&cid, &["dept:cardiology"]).map_err(|e| e.to_string())?;
    let after = w.cardio.access_record(&w.d.services, &cid);
    check!(
        matches!(&after, Err(e) if e.code() == ErrorCode::PolicyNotSatisfied),
        "read after revoke: {after:?}"
    );
    let report = consent_report(&w.d.services.ledger, w.d.services.cas.as_ref(), &cid).map_err(|e| e.to_string())?;
    let versions: Vec<u64> = report.rows.iter().map(|r| r.version).collect();
    check!(versions == vec![1, 2, 3], "versions {versions:?}");
    run_shipped(root, SCENARIOS[0], "c3")?;
    let took = within(Duration::from_secs(5), started)?;
    Ok(format!("in-process flow and shipped scenario, versions 1..3, {took:.2?}"))
}

fn residual_access() -> Verdict {
    let mut w = World::new(41);
    let cid = w.store(RECORD);
    let req = w.cardio_requests(&cid);
    w.answer(&req, Decision::Grant { narrowed: None });
    w.cardio.access_record(&w.d.services, &cid).map_err(|e| e.to_string())?;
    w.revoke(&cid, &["dept:cardiology"]).map_err(|e| e.to_string())?;
    w.cardio.fetch_history(&w.d.services, &cid).map_err(|e| e.to_string())?;
    let v2 = w.cardio.access_cached(&w.d.services, &cid, 2);
    check!(v2.as_deref().ok() == Some(RECORD), "cached v2: {v2:?}");
    let v3 = w.cardio.access_cached(&w.d.services, &cid, 3);
    check!(matches!(&v3, Err(e) if e.code() == ErrorCode::PolicyNotSatisfied), "v3: {v3:?}");
    Ok("cached v2 opens, v3 refused".into())
}

fn emergency_accountability(root: &Path) -> Verdict {
    let home = run_shipped(root, SCENARIOS[1], "c5")?;
    let s = Home::new(&home).open().map_err(|e| e.to_string())?;
    let ledger = &s.deployment.services.ledger;
    let accesses = ledger.emergency_accesses(&EmergencyFilter::All);
    check!(accesses.len() == 1, "{} EmergencyAccess txs", accesses.len());
    let access = &accesses[0];
    let pairing = emergency_pairing(ledger);
    check!(pairing.events == 1 && pairing.paired == 1 && pairing.override_grants == 1, "pairing {pairing:?}");
    check!(pairing.grants_without_log.is_empty(), "grants without log: {}", pairing.grants_without_log.len());
    let by_requester = emergency_report(ledger, &EmergencyFilter::Requester(access.requester_did.clone()));
    check!(by_requester.rows == accesses, "report by requester: {:?}", by_requester.rows);
    let anchor = ledger.latest_key_anchor(&access.cid).map_err(|e| e.to_string())?;
    check!(anchor.authorized_by_did == access.server_did && anchor.height > access.height, "anchor {anchor:?}");
    Ok(format!("1 event paired with v{} anchor, grants-without-log = 0", anchor.version))
}

fn proxy_blindness(root: &Path) -> Verdict {
    let mut total = 0;
    for name in SCENARIOS {
        key_tap::start();
        let home = run_shipped(root, name, "c6")?;
        let keys = key_tap::take();
        check!(!keys.is_empty(), "{name}: tap recorded nothing");
        total += keys.len();
        let state: serde_json::Value = serde_json::from_slice(&fs::read(home.join("state.json")).unwrap()).unwrap();
        let mut haystack = serde_json::to_vec(&state["hospital"]).unwrap();
        haystack.extend(fs::read(home.join("transcript.jsonl")).unwrap());
        let s = Home::new(&home).open().map_err(|e| e.to_string())?;
        haystack.extend(serde_json::to_vec(&s.deployment.hospital).unwrap());
        let found = leaked(&keys, &haystack);
        check!(found.is_empty(), "{name}: hospital state or transcript holds {found:?}");
    }
    key_tap::start();
    let mut w = World::new(61);
    let cid = w.store(RECORD);
    let req = w.cardio_requests(&cid);
    w.answer(&req, Decision::Grant { narrowed: None });
    w.revoke(&cid, &["dept:cardiology"]).map_err(|e| e.to_string())?;
    w.emergency(&cid, "unconscious");
    let keys = key_tap::take();
    total += keys.len();
    let mut haystack = serde_json::to_vec(&w.d.hospital).unwrap();
    haystack.extend(w.t.to_bytes());
    let found = leaked(&keys, &haystack);
    check!(found.is_empty(), "in-process run leaks {found:?}");
    Ok(format!("{total} tapped keys, none in hospital state or transcripts"))
}

fn ledger_integrity(root: &Path) -> Verdict {
    let mut homes = Vec::new();
    for name in SCENARIOS {
        let home = run_shipped(root, name, "c7")?;
        let report = Ledger::verify_file(&home.join("ledger.jsonl")).map_err(|e| e.to_string())?;
        check!(report.valid, "{name}: {report:?}");
        homes.push(home);
    }
    let bytes = fs::read(homes[1].join("ledger.jsonl")).unwrap();
    let mut line = 0u64;
    for i in 0..bytes.len() {
        let mut mutated = bytes.clone();
        mutated[i] ^= 0x01;
        let report = verify_jsonl(&mutated);
        check!(!report.valid, "flipping byte {i} went unnoticed");
        check!(report.first_bad_height == Some(line), "byte {i}: failed at {:?}, expected {line}", report.first_bad_height);
        if bytes[i] == b'\n' {
            line += 1;
        }
    }

    let s = Home::new(&homes[1]).open().map_err(|e| e.to_string())?;
    let services = &s.deployment.services;
    let anchors = services.ledger.all_key_anchors();
    let target = anchors.last().unwrap().clone();
    let store = sovereign_ehr::FsStore::open(homes[1].join("cas")).unwrap();
    fs::remove_file(store.object_path(&target.envelope_hash)).unwrap();
    let report = integrity_report(&services.ledger, services.cas.as_ref());
    check!(report.findings.len() == 1, "findings {:?}", report.findings);
    let f = &report.findings[0];
    check!(
        f.kind == FindingKind::MissingEnvelope && f.height == Some(target.height) && f.version == Some(target.version),
        "finding {f:?}"
    );
    Ok(format!("{} single-byte mutations caught at the right height; deleted envelope flagged", bytes.len()))
}

fn convergent_storage() -> Verdict {
    let mut w = World::new(81);
    let cid = w.store(RECORD);
    check!(cid == Cid::of(&encrypt_record(RECORD).0.to_bytes()), "CID is not content-derived");
    let peer = w.patient.session().unwrap().my_pairwise.did.clone();
    let second = w.d.hospital.store_record(&w.d.services, &peer, RECORD, &mut w.rng);
    check!(
        matches!(&second, Err(e) if e.code() == ErrorCode::DuplicateRecordAnchor),
        "second store: {:?}",
        second.map(|r| r.0)
    );
    let store = MemoryStore::new();
    let mut seen = BTreeSet::new();
    for i in 0..1000u32 {
        let plaintext = format!("record {i}: {}", "x".repeat((i % 37) as usize));
        seen.insert(store.put(&encrypt_record(plaintext.as_bytes()).0.to_bytes()).unwrap());
    }
    check!(seen.len() == 1000, "{} distinct CIDs for 1000 records", seen.len());
    Ok("identical bytes share a CID and are refused twice; 1000 records, 0 collisions".into())
}

/// State that a failed handshake must not leave behind.
fn leftovers(w: &World, credentials_before: usize, patients_before: usize, t: &Transcript) -> Option<String> {
    let credentials = w
        .d
        .services
        .ledger
        .transactions()
        .iter()
        .filter(|(_, tx)| matches!(tx.kind, TxKind::CredentialAnchor { .. }))
        .count();
    if credentials != credentials_before {
        return Some("an admission credential was anchored".into());
    }
    if w.d.hospital.patients.len() != patients_before {
        return Some("hospital kept a pairwise session".into());
    }
    if t.messages().iter().any(|m| m.kind == MessageType::PairwiseOffer || m.kind == MessageType::AdmissionCredential) {
        return Some("pairwise offer or admission credential was sent".into());
    }
    None
}

fn handshake_security() -> Verdict {
    let mut w = World::new(91);
    let creds = |w: &World| {
        w.d.services
            .ledger
            .transactions()
            .iter()
            .filter(|(_, tx)| matches!(tx.kind, TxKind::CredentialAnchor { .. }))
            .count()
    };
    let mut outcomes = Vec::new();

    let mut forged = w.d.register_patient("mallory", &mut w.rng).unwrap();
    forged.credential.claims.insert("name".into(), "alice".into());
    let mut unanchored = w.d.register_patient("carol", &mut w.rng).unwrap();
    let claims = [("type".to_string(), "patient".to_string())].into();
    unanchored.credential = issue_credential(&w.d.registry.identity, unanchored.did(), claims, 5, &mut w.rng).unwrap();
    let honest = w.d.register_patient("dave", &mut w.rng).unwrap();
    let intruder = w.d.register_patient("eve", &mut w.rng).unwrap();

    for (label, wallet, want) in [
        ("forged credential", &forged, CredentialFault::BadSignature),
        ("unanchored credential", &unanchored, CredentialFault::UnanchoredCredential),
    ] {
        let (before, patients) = (creds(&w), w.d.hospital.patients.len());
        let mut t = Transcript::new();
        let r = sovereign_ehr::agents::handshake::run_handshake(
            wallet.begin_admission(w.d.hospital.did()),
            w.d.hospital.admission_responder(),
            &w.d.services.ledger,
            &mut t,
            &mut w.rng,
        );
        check!(matches!(&r, Err(AgentError::CredentialInvalid(f)) if *f == want), "{label}: {:?}", r.err());
        if let Some(bad) = leftovers(&w, before, patients, &t) {
            return Err(format!("{label}: {bad}"));
        }
        outcomes.push(label);
    }

    let (before, patients) = (creds(&w), w.d.hospital.patients.len());
    let mut t = Transcript::new();
    let mut init = honest.begin_admission(w.d.hospital.did());
    let mut resp: Responder = w.d.hospital.admission_responder();
    let invite = t.deliver(init.start(&mut w.rng).unwrap());
    let presentation = t.deliver(resp.handle(&invite, &w.d.services.ledger, &mut w.rng).unwrap().remove(0));
    let pres: PresentationBody = presentation.body_as().unwrap();
    let body = ChallengeBody { response: sign_challenge(&intruder.identity, &pres.challenge), challenge: [7u8; 32] };
    let forged_step = t.deliver(AgentMessage::new(&honest.identity, w.d.hospital.did(), MessageType::Challenge, &body, &mut w.rng));
    let r = resp.handle(&forged_step, &w.d.services.ledger, &mut w.rng);
    check!(matches!(r, Err(AgentError::ChallengeFailed(_))), "wrong-key response: {:?}", r.err());
    check!(resp.finish().is_err(), "responder produced a session");
    if let Some(bad) = leftovers(&w, before, patients, &t) {
        return Err(format!("wrong-key response: {bad}"));
    }
    outcomes.push("wrong-key response");

    let (before, patients) = (creds(&w), w.d.hospital.patients.len());
    let mut t = Transcript::new();
    let mut init = honest.begin_admission(w.d.hospital.did());
    t.deliver(init.start(&mut w.rng).unwrap());
    let early = AgentMessage::new(
        &w.d.hospital.identity,
        honest.did(),
        MessageType::AdmissionCredential,
        &serde_json::json!({}),
        &mut w.rng,
    );
    let r = init.handle(&early, w.d.services.ledger.as_ref(), &mut w.rng);
    check!(matches!(r, Err(AgentError::ProtocolViolation(_))), "out-of-order: {:?}", r.err());
    check!(init.finish().is_err(), "initiator produced a session");
    if let Some(bad) = leftovers(&w, before, patients, &t) {
        return Err(format!("out-of-order: {bad}"));
    }
    outcomes.push("out-of-order message");

    let mut t = Transcript::new();
    let mut ok_patient = w.d.register_patient("fay", &mut w.rng).unwrap();
    flows::admit(&mut ok_patient, &mut w.d.hospital, &w.d.services, &mut t, &mut w.rng).map_err(|e| e.to_string())?;
    Ok(format!("{} rejected cleanly; honest admission still succeeds", outcomes.join(", ")))
}

fn determinism(root: &Path) -> Verdict {
    for name in SCENARIOS {
        let a = run_shipped(root, name, "c10a")?;
        let b = run_shipped(root, name, "c10b")?;
        let (la, lb) = (fs::read(a.join("ledger.jsonl")).unwrap(), fs::read(b.join("ledger.jsonl")).unwrap());
        check!(la == lb, "{name}: ledgers differ");
    }
    let w1 = World::new(101);
    let w2 = World::new(101);
    check!(w1.d.services.ledger.to_jsonl() == w2.d.services.ledger.to_jsonl(), "in-process ledgers differ");
    Ok("both shipped scenarios byte-identical across runs".into())
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict>)> = vec![
        ("ABE oracle equivalence", Box::new(abe_oracle_equivalence)),
        ("worked example (a AND b) OR d", Box::new(worked_example)),
        ("end-to-end consent scenario", Box::new(|| consent_end_to_end(root))),
        ("residual access after revocation", Box::new(residual_access)),
        ("emergency accountability", Box::new(|| emergency_accountability(root))),
        ("proxy blindness", Box::new(|| proxy_blindness(root))),
        ("ledger integrity", Box::new(|| ledger_integrity(root))),
        ("convergent storage", Box::new(convergent_storage)),
        ("handshake security", Box::new(handshake_security)),
        ("determinism", Box::new(|| determinism(root))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let verdict = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match verdict {
            Ok(detail) => println!("[PASS] {:>2}. {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {:>2}. {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
