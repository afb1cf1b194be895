mod support;

use sovereign_ehr::agents::{flows, AgentMessage, Decision, MessageType};
use sovereign_ehr::audit::{consent_report, emergency_pairing};
use sovereign_ehr::ledger::{EmergencyFilter, TxKind};
use sovereign_ehr::{key_tap, Cid, ErrorCode};
use support::scan::leaked;
use support::world::{attrs, World, RECORD};

fn code<T: std::fmt::Debug>(r: Result<T, sovereign_ehr::agents::AgentError>) -> ErrorCode {
    r.unwrap_err().code()
}

#[test]
fn granted_doctor_reads_the_exact_record() {
    let mut w = World::new(1);
    let cid = w.store(RECORD);
    assert_eq!(w.patient.records, vec![cid]);
    assert_eq!(code(w.cardio.access_record(&w.d.services, &cid)), ErrorCode::PolicyNotSatisfied);

    let req = w.cardio_requests(&cid);
    assert!(w.patient.pending.contains_key(&req));
    let outcome = w.answer(&req, Decision::Grant { narrowed: None });
    assert_eq!((outcome.decision.as_str(), outcome.version), ("grant", Some(2)));
    assert_eq!(w.cardio.access_record(&w.d.services, &cid).unwrap(), RECORD);
    assert_eq!(w.patient.read(&w.d.services, &cid).unwrap(), RECORD);
    assert!(w.d.hospital.pending.is_empty());
    assert_eq!(code(w.er.access_record(&w.d.services, &cid)), ErrorCode::PolicyNotSatisfied);
}

#[test]
fn denial_leaves_the_chain_untouched() {
    let mut w = World::new(2);
    let cid = w.store(RECORD);
    let req = w.cardio_requests(&cid);
    let height = w.d.services.ledger.height();
    let outcome = w.answer(&req, Decision::Deny);
    assert_eq!((outcome.decision.as_str(), outcome.version), ("deny", None));
    assert_eq!(w.d.services.ledger.height(), height);
    assert_eq!(w.patient.consent_log.last().unwrap().decision, "deny");
    assert!(w.d.hospital.pending.is_empty());
    assert_eq!(code(w.cardio.access_record(&w.d.services, &cid)), ErrorCode::PolicyNotSatisfied);
    let again = flows::answer_consent(
        &mut w.patient,
        &mut w.d.hospital,
        &w.d.services,
        &mut w.t,
        &req,
        Decision::Deny,
        &mut w.rng,
    );
    assert_eq!(code(again), ErrorCode::UnknownRequest);
}

#[test]
fn narrowed_grant_admits_only_the_narrowed_attributes() {
    let mut w = World::new(3);
    let cid = w.store(RECORD);
    let ask = w.er.request_access(&cid, None, "triage", &mut w.rng).unwrap();
    let narrowed = attrs(&["dept:er"]);
    let outcome = flows::relay_consent_request(
        &mut w.d.hospital,
        &mut w.patient,
        &w.d.services,
        &mut w.t,
        ask,
        |relay| {
            assert_eq!(relay.requested_attributes, attrs(&["dept:er", "role:attending"]));
            Decision::Grant { narrowed: Some(narrowed.clone()) }
        },
        &mut w.rng,
    )
    .unwrap();
    assert_eq!(outcome.attributes, narrowed);
    let (_, env) = w.d.services.latest_envelope(&cid).unwrap();
    assert!(env.consent_policy().mentions("dept:er"));
    assert!(!env.consent_policy().mentions("role:attending"));
    assert_eq!(w.er.access_record(&w.d.services, &cid).unwrap(), RECORD);
}

#[test]
fn narrowing_outside_the_request_is_refused() {
    let mut w = World::new(4);
    let cid = w.store(RECORD);
    let req = w.cardio_requests(&cid);
    let r = w.patient.decide(&req, Decision::Grant { narrowed: Some(attrs(&["dept:er"])) }, &w.d.services, &mut w.rng);
    assert_eq!(code(r), ErrorCode::ProtocolViolation);
}

#[test]
fn revocation_rotates_and_leaves_only_residual_access() {
    let mut w = World::new(5);
    let cid = w.store(RECORD);
    let req = w.cardio_requests(&cid);
    w.answer(&req, Decision::Grant { narrowed: None });
    assert_eq!(w.cardio.access_record(&w.d.services, &cid).unwrap(), RECORD);

    assert_eq!(w.revoke(&cid, &["dept:cardiology"]).unwrap(), 3);
    assert_eq!(code(w.cardio.access_record(&w.d.services, &cid)), ErrorCode::PolicyNotSatisfied);
    assert_eq!(w.cardio.access_cached(&w.d.services, &cid, 2).unwrap(), RECORD);
    assert_eq!(w.patient.read(&w.d.services, &cid).unwrap(), RECORD);

    let v2 = w.cardio.cached_envelope(&cid, 2).unwrap();
    let (_, v3) = w.d.services.latest_envelope(&cid).unwrap();
    assert_ne!(v2.wrapped_kek.to_bytes(), v3.wrapped_kek.to_bytes());
    assert_ne!(v2.kek_wrapped_data_key, v3.kek_wrapped_data_key);

    let report = consent_report(&w.d.services.ledger, w.d.services.cas.as_ref(), &cid).unwrap();
    let versions: Vec<u64> = report.rows.iter().map(|r| r.version).collect();
    assert_eq!(versions, vec![1, 2, 3]);
    assert!(report.rows[1].policy.contains("dept:cardiology"));
    assert!(!report.rows[2].policy.contains("dept:cardiology"));
    assert_eq!(report.rows[1].authorized_by, *w.patient.did());
    assert_eq!(report.rows[2].authorized_by, *w.patient.did());
}

#[test]
fn revoking_an_absent_attribute_or_everything_fails() {
    let mut w = World::new(6);
    let cid = w.store(RECORD);
    assert_eq!(code(w.revoke(&cid, &["dept:cardiology"])), ErrorCode::AttributeNotInPolicy);
    let own = w.patient.attribute().unwrap();
    assert_eq!(code(w.revoke(&cid, &[own.as_str()])), ErrorCode::ProtocolViolation);
    assert_eq!(w.d.services.ledger.latest_key_anchor(&cid).unwrap().version, 1);
}

#[test]
fn storing_identical_bytes_twice_is_a_duplicate_anchor() {
    let mut w = World::new(7);
    let cid = w.store(RECORD);
    assert_eq!(cid, Cid::of(&sovereign_ehr::envelope::encrypt_record(RECORD).0.to_bytes()));
    let peer = w.patient.session().unwrap().my_pairwise.did.clone();
    let again = w.d.hospital.store_record(&w.d.services, &peer, RECORD, &mut w.rng).map(|(c, _, _)| c);
    assert_eq!(code(again), ErrorCode::DuplicateRecordAnchor);
    let empty = w.d.hospital.store_record(&w.d.services, &peer, b"", &mut w.rng).map(|(c, _, _)| c);
    assert_eq!(code(empty), ErrorCode::EmptyRecord);
    assert_eq!(w.store(b"another record"), Cid::of(&sovereign_ehr::envelope::encrypt_record(b"another record").0.to_bytes()));
}

#[test]
fn interleaved_grants_stay_linear() {
    let mut w = World::new(8);
    let cid = w.store(RECORD);
    let first = w.cardio_requests(&cid);
    let ask = w.er.request_access(&cid, None, "triage", &mut w.rng).unwrap();
    let (second, relay) = w.d.hospital.on_consent_request(&w.t.deliver(ask), &w.d.services, &mut w.rng).unwrap();
    w.patient.receive(&w.t.deliver(relay), &w.d.services).unwrap();

    let a = w.t.deliver_all(w.patient.decide(&first, Decision::Grant { narrowed: None }, &w.d.services, &mut w.rng).unwrap());
    let b = w.t.deliver_all(w.patient.decide(&second, Decision::Grant { narrowed: None }, &w.d.services, &mut w.rng).unwrap());
    w.d.hospital.on_consent_decision(&a[0]).unwrap();
    w.d.hospital.on_consent_decision(&b[0]).unwrap();
    assert_eq!(w.d.hospital.on_rewrap_token(&a[1], &w.d.services).unwrap().0.version, 2);
    let stale = w.d.hospital.on_rewrap_token(&b[1], &w.d.services);
    assert!(stale.as_ref().unwrap_err().is_version_gap());
    assert_eq!(code(stale), ErrorCode::VersionGap);

    let rebuilt = w.patient.grant_token(&cid, &attrs(&["dept:er", "role:attending"]), Some(&second), &w.d.services, &mut w.rng).unwrap();
    let (env, _) = w.d.hospital.on_rewrap_token(&w.t.deliver(rebuilt), &w.d.services).unwrap();
    assert_eq!(env.version, 3);
    let versions: Vec<u64> = w.d.services.ledger.consent_history(&cid).unwrap().iter().map(|a| a.version).collect();
    assert_eq!(versions, vec![1, 2, 3]);
    assert_eq!(w.cardio.access_record(&w.d.services, &cid).unwrap(), RECORD);
    assert_eq!(w.er.access_record(&w.d.services, &cid).unwrap(), RECORD);
}

#[test]
fn emergency_override_is_logged_before_it_is_anchored() {
    let mut w = World::new(9);
    let cid = w.store(RECORD);
    assert_eq!(code(w.er.access_record(&w.d.services, &cid)), ErrorCode::PolicyNotSatisfied);
    let version = w.emergency(&cid, "patient unconscious, suspected overdose");
    assert_eq!(version, 2);
    assert_eq!(w.er.access_record(&w.d.services, &cid).unwrap(), RECORD);

    let rows = w.d.services.ledger.emergency_accesses(&EmergencyFilter::Requester(w.er.did().clone()));
    assert_eq!(rows.len(), 1);
    let anchor = w.d.services.ledger.latest_key_anchor(&cid).unwrap();
    assert!(rows[0].height < anchor.height);
    assert_eq!(anchor.authorized_by_did, *w.d.emergency.did());
    let pairing = emergency_pairing(&w.d.services.ledger);
    assert_eq!((pairing.events, pairing.paired), (1, 1));
    assert!(pairing.is_clean());
    assert_eq!(w.d.emergency.grants.len(), 1);
}

#[test]
fn emergency_without_a_session_is_refused() {
    let mut w = World::new(10);
    let cid = w.store(RECORD);
    let r = flows::emergency_access(&mut w.cardio, &mut w.d.emergency, &w.d.services, &mut w.t, &cid, "why", &mut w.rng);
    assert_eq!(code(r), ErrorCode::ChannelNotAuthenticated);
    assert!(w.d.services.ledger.emergency_accesses(&EmergencyFilter::All).is_empty());
}

#[test]
fn hospital_state_and_transcript_never_hold_a_key() {
    key_tap::start();
    let mut w = World::new(11);
    let cid = w.store(RECORD);
    let req = w.cardio_requests(&cid);
    w.answer(&req, Decision::Grant { narrowed: None });
    w.revoke(&cid, &["dept:cardiology"]).unwrap();
    w.emergency(&cid, "unconscious");
    w.store(b"lab panel: troponin 0.02");
    let keys = key_tap::take();
    // Two stores (data key and KEK each) plus one rotation.
    assert_eq!(keys.len(), 5);

    let mut haystack = serde_json::to_vec(&w.d.hospital).unwrap();
    haystack.extend(w.t.to_bytes());
    haystack.extend(w.t.to_jsonl());
    assert_eq!(leaked(&keys, &haystack), Vec::<String>::new());
    let planted = [haystack.clone(), hex::encode(keys[3]).into_bytes()].concat();
    assert_eq!(leaked(&keys, &planted), vec![hex::encode(keys[3])]);
}

fn patient_hospital_messages(w: &World) -> Vec<AgentMessage> {
    let session = w.patient.session().unwrap();
    let ends = [session.my_pairwise.did.clone(), session.peer_pairwise.clone()];
    w.t.messages().into_iter().filter(|m| ends.contains(&m.from) && ends.contains(&m.to)).collect()
}

#[test]
fn pairwise_identities_stay_off_chain_and_hide_the_patient() {
    let mut w = World::new(12);
    let cid = w.store(RECORD);
    let req = w.cardio_requests(&cid);
    w.answer(&req, Decision::Grant { narrowed: None });
    let session = w.patient.session().unwrap().clone();

    let ledger = w.d.services.ledger.to_jsonl();
    let text = String::from_utf8(ledger).unwrap();
    assert!(!text.contains(session.my_pairwise.did.as_str()));
    assert!(!text.contains(session.peer_pairwise.as_str()));
    assert!(!w.d.services.ledger.is_registered(&session.my_pairwise.did));

    let msgs = patient_hospital_messages(&w);
    assert!(msgs.iter().any(|m| m.kind == MessageType::RewrapToken));
    assert!(msgs.iter().all(|m| m.kind != MessageType::Invitation));
    for m in msgs {
        let bytes = String::from_utf8(m.to_canonical_bytes()).unwrap();
        assert!(!bytes.contains(w.patient.did().as_str()), "{} leaks the anywise DID", m.kind.as_str());
    }
}

#[test]
fn every_tx_is_anchored_by_a_registered_signer() {
    let mut w = World::new(13);
    let cid = w.store(RECORD);
    w.emergency(&cid, "unconscious");
    for (_, tx) in w.d.services.ledger.transactions() {
        assert!(w.d.services.ledger.is_registered(&tx.signer_did));
        if let TxKind::RecordAnchor { patient_did, .. } = &tx.kind {
            assert_eq!(patient_did, w.patient.did());
        }
    }
    assert!(w.d.services.ledger.verify_chain().valid);
}
