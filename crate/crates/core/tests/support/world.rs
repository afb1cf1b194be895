//! A provisioned deployment with one admitted patient and two doctors.

#![allow(dead_code)]

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sovereign_ehr::agents::deployment::new_authority;
use sovereign_ehr::agents::{flows, Decision, Deployment, DoctorWallet, PatientWallet, Transcript};
use sovereign_ehr::{AttributeSet, Cid, Ledger, MemoryStore, StepClock};

pub const RECORD: &[u8] = b"2026-03-02 discharge summary: NSTEMI, stented LAD, aspirin + ticagrelor";

pub struct World {
    pub d: Deployment,
    pub rng: ChaCha20Rng,
    pub t: Transcript,
    pub patient: PatientWallet,
    pub cardio: DoctorWallet,
    pub er: DoctorWallet,
}

pub fn attrs(names: &[&str]) -> AttributeSet {
    AttributeSet::new(names.iter().copied()).unwrap()
}

impl World {
    pub fn new(seed: u64) -> World {
        let ledger = Ledger::in_memory(Box::new(StepClock::new(1_700_000_000, 1)));
        World::with_ledger(seed, ledger)
    }

    pub fn with_ledger(seed: u64, ledger: Ledger) -> World {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut d = Deployment::provision(ledger, MemoryStore::new(), new_authority([seed as u8; 32]), "st-mary", &mut rng)
            .unwrap();
        let mut t = Transcript::new();
        let mut patient = d.register_patient("alice", &mut rng).unwrap();
        flows::admit(&mut patient, &mut d.hospital, &d.services, &mut t, &mut rng).unwrap();
        let mut cardio = d.register_doctor("bob", &attrs(&["dept:cardiology"]), &mut rng).unwrap();
        flows::connect_doctor(&mut cardio, &mut d.hospital, &d.services, &mut t, &mut rng).unwrap();
        let mut er = d.register_doctor("erin", &attrs(&["dept:er", "role:attending"]), &mut rng).unwrap();
        flows::connect_doctor(&mut er, &mut d.hospital, &d.services, &mut t, &mut rng).unwrap();
        flows::connect_emergency(&mut er, &mut d.emergency, &d.services, &mut t, &mut rng).unwrap();
        World { d, rng, t, patient, cardio, er }
    }

    pub fn store(&mut self, plaintext: &[u8]) -> Cid {
        let (cid, _) =
            flows::store_record(&self.d.hospital, &mut self.patient, &self.d.services, &mut self.t, plaintext, &mut self.rng)
                .unwrap();
        cid
    }

    /// Cardiology doctor asks for `cid`; returns the request id.
    pub fn cardio_requests(&mut self, cid: &Cid) -> String {
        flows::request_access(
            &self.cardio,
            &mut self.d.hospital,
            &mut self.patient,
            &self.d.services,
            &mut self.t,
            cid,
            None,
            "follow-up",
            &mut self.rng,
        )
        .unwrap()
    }

    pub fn answer(&mut self, request_id: &str, decision: Decision) -> sovereign_ehr::agents::ConsentOutcome {
        flows::answer_consent(
            &mut self.patient,
            &mut self.d.hospital,
            &self.d.services,
            &mut self.t,
            request_id,
            decision,
            &mut self.rng,
        )
        .unwrap()
    }

    pub fn revoke(&mut self, cid: &Cid, names: &[&str]) -> Result<u64, sovereign_ehr::agents::AgentError> {
        let set = names.iter().map(|s| s.to_string()).collect();
        flows::revoke_access(&mut self.patient, &mut self.d.hospital, &self.d.services, &mut self.t, cid, &set, &mut self.rng)
            .map(|env| env.version)
    }

    pub fn emergency(&mut self, cid: &Cid, why: &str) -> u64 {
        flows::emergency_access(&mut self.er, &mut self.d.emergency, &self.d.services, &mut self.t, cid, why, &mut self.rng)
            .unwrap()
    }
}
