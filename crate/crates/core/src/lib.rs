//! Self-sovereign exchange of encrypted health records.
//!
//! Records are encrypted convergently and kept in a content-addressed
//! store. Each record's data key travels inside a [`KeyEnvelope`] whose outer
//! layer is gated by an attribute policy, so consent is expressed as a policy
//! and changed by re-wrapping the envelope. Identities, credential hashes,
//! record anchors, every envelope version and every emergency override are
//! written to a hash-chained [`Ledger`].
//!
//! Module map:
//!
//! * [`envelope`]: record encryption and the two-layer key envelope.
//! * [`abe`]: policy language plus the attribute-gated scheme and blind rewrap.
//! * [`cas`]: content-addressed object store (memory and filesystem).
//! * [`ledger`]: the append-only chain and its query surface.
//! * [`identity`]: DIDs, Ed25519 keys, credentials and key-control proofs.
//! * [`agents`]: patient, hospital, doctor and emergency-server protocols.
//! * [`audit`]: consent, emergency and integrity reports.

mod aead;
pub mod abe;
pub mod agents;
pub mod audit;
pub mod canonical;
pub mod cas;
pub mod envelope;
pub mod error;
pub mod identity;
pub mod key_tap;
pub mod ledger;

pub use abe::{
    AbeAuthority, AbeCiphertext, AbeError, AbeMasterKey, AbePublicParams, AbeUserKey,
    AttributeSet, Policy, RewrapToken, EMERGENCY_ATTRIBUTE,
};
pub use cas::{CasError, Cid, FsStore, MemoryStore, ObjectStore};
pub use envelope::{DataKey, EnvelopeError, KeyEnvelope, RecordCiphertext};
pub use error::ErrorCode;
pub use identity::{Credential, Did, DidDocument, Identity, KeyPair, PairwiseDid};
pub use ledger::{Clock, Ledger, LedgerError, StepClock, SystemClock, Transaction, TxKind};
