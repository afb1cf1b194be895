//! The identity registry that vouches for patients and institutions.

use rand_core::CryptoRngCore;
use serde::{Deserialize, Serialize};

use super::{issue_anchored, register_identity, AgentError};
use crate::identity::{create_identity, Credential, Did, Identity};
use crate::ledger::Ledger;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Registry {
    pub identity: Identity,
}

impl Registry {
    /// Creates the registry identity and registers it on the ledger.
    pub fn create<R: CryptoRngCore + ?Sized>(ledger: &Ledger, rng: &mut R) -> Result<Registry, AgentError> {
        let identity = create_identity(None, "registry", rng);
        register_identity(ledger, &identity)?;
        Ok(Registry { identity })
    }

    pub fn did(&self) -> &Did {
        &self.identity.did
    }

    pub fn certify_patient<R: CryptoRngCore + ?Sized>(
        &self,
        ledger: &Ledger,
        subject: &Did,
        name: &str,
        rng: &mut R,
    ) -> Result<Credential, AgentError> {
        issue_anchored(&self.identity, ledger, subject, &[("type", "patient"), ("name", name)], rng)
    }

    pub fn certify_institution<R: CryptoRngCore + ?Sized>(
        &self,
        ledger: &Ledger,
        subject: &Did,
        name: &str,
        rng: &mut R,
    ) -> Result<Credential, AgentError> {
        issue_anchored(&self.identity, ledger, subject, &[("type", "institution"), ("name", name)], rng)
    }
}
