//! Provisioning of a deployment's standing actors.

use rand_core::CryptoRngCore;

use super::{register_identity, AgentError, DoctorWallet, EmergencyServer, HospitalAgent, PatientWallet, Registry, Services};
use crate::abe::{AbeAuthority, AttributeSet, EMERGENCY_ATTRIBUTE};
use crate::cas::ObjectStore;
use crate::identity::create_identity;
use crate::ledger::Ledger;

/// Registry, hospital and emergency server plus the shared services.
pub struct Deployment {
    pub services: Services,
    pub registry: Registry,
    pub hospital: HospitalAgent,
    pub emergency: EmergencyServer,
}

/// An authority whose universe holds only the override attribute.
pub fn new_authority(seed: [u8; 32]) -> AbeAuthority {
    let universe = AttributeSet::new([EMERGENCY_ATTRIBUTE]).expect("valid attribute");
    AbeAuthority::setup(seed, &universe).expect("non-empty universe")
}

impl Deployment {
    /// Registers the registry, the hospital and its emergency server.
    pub fn provision<R: CryptoRngCore + ?Sized>(
        ledger: Ledger,
        cas: impl ObjectStore + 'static,
        authority: AbeAuthority,
        hospital_name: &str,
        rng: &mut R,
    ) -> Result<Deployment, AgentError> {
        let services = Services::new(ledger, cas, authority);
        let ledger = &services.ledger;
        let registry = Registry::create(ledger, rng)?;

        let hospital_id = create_identity(None, &format!("agent://{hospital_name}"), rng);
        register_identity(ledger, &hospital_id)?;
        let hospital_cred = registry.certify_institution(ledger, &hospital_id.did, hospital_name, rng)?;
        let hospital = HospitalAgent::new(hospital_name, hospital_id, hospital_cred);

        let server_id = create_identity(None, &format!("agent://{hospital_name}/emergency"), rng);
        register_identity(ledger, &server_id)?;
        let server_cred = hospital.certify_emergency_server(&services, &server_id.did, rng)?;
        let override_key = services.authority.issue_key(&AttributeSet::new([EMERGENCY_ATTRIBUTE])?)?;
        let emergency = EmergencyServer::new("emergency", server_id, server_cred, override_key);

        Ok(Deployment { services, registry, hospital, emergency })
    }

    /// A new patient: registered DID plus a registry credential.
    pub fn register_patient<R: CryptoRngCore + ?Sized>(&self, name: &str, rng: &mut R) -> Result<PatientWallet, AgentError> {
        let identity = create_identity(None, &format!("wallet://{name}"), rng);
        register_identity(&self.services.ledger, &identity)?;
        let credential = self.registry.certify_patient(&self.services.ledger, &identity.did, name, rng)?;
        Ok(PatientWallet::new(name, identity, credential))
    }

    /// A new doctor licensed by the hospital with `attrs` and a matching key.
    pub fn register_doctor<R: CryptoRngCore + ?Sized>(
        &self,
        name: &str,
        attrs: &AttributeSet,
        rng: &mut R,
    ) -> Result<DoctorWallet, AgentError> {
        let identity = create_identity(None, &format!("wallet://{name}"), rng);
        register_identity(&self.services.ledger, &identity)?;
        let (license, key) = self.hospital.onboard_doctor(&self.services, &identity.did, attrs, rng)?;
        Ok(DoctorWallet::new(name, identity, license, key))
    }
}
