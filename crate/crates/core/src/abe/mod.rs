//! Attribute-gated encryption over monotone policies.
//!
//! The scheme shares a 128-bit payload down the policy tree: the root holds
//! the payload, an AND node splits its share `s` into `(r, s ^ r)`, an OR node
//! hands the same share to both children, and each leaf stores its share
//! sealed under that attribute's secret `PRF(msk, name)`. A user key is the set
//! of per-attribute secrets for the attributes it was issued.
//!
//! This is a symmetric, desk-scale stand-in for pairing-based CP-ABE and it is
//! **not collusion resistant**: two users holding `{a}` and `{b}` can pool
//! their secrets and open `a AND b`. The setup/keygen/encrypt/decrypt/rewrap
//! surface is kept so a pairing backend could replace it.

mod policy;
mod rewrap;
mod scheme;

use thiserror::Error;

use crate::envelope::EnvelopeError;
use crate::error::ErrorCode;

pub use policy::{
    is_valid_attribute_name, parse_policy, policy_to_string, satisfies, AttributeSet, ParseError,
    Policy, EMERGENCY_ATTRIBUTE, MAX_POLICY_DEPTH,
};
pub use rewrap::{apply_rewrap, make_rewrap_token, RewrapToken};
pub use scheme::{
    abe_decrypt, abe_encrypt, keygen, setup, AbeAuthority, AbeCiphertext, AbeMasterKey,
    AbePublicParams, AbeUserKey, AttributeKeySource, AttributeSecret, AuthorityState, SCHEME_VERSION,
};

#[derive(Debug, Error)]
pub enum AbeError {
    #[error("policy syntax error {0}")]
    Parse(#[from] ParseError),
    #[error("malformed policy: {0}")]
    MalformedPolicy(String),
    #[error("invalid attribute name `{0}`")]
    InvalidAttributeName(String),
    #[error("attribute `{0}` is not in the authority's universe")]
    UnknownAttribute(String),
    #[error("attribute universe is empty")]
    EmptyUniverse,
    #[error("attribute set is empty")]
    EmptyAttributeSet,
    #[error("attributes do not satisfy the policy")]
    PolicyNotSatisfied,
    #[error("share ciphertext failed authentication")]
    ShareCorrupt,
    #[error("malformed ciphertext: {0}")]
    Malformed(String),
    #[error("token cid {token} does not match envelope cid {envelope}")]
    CidMismatch { envelope: String, token: String },
    #[error("expected envelope version {expected}, token carries {found}")]
    VersionGap { expected: u64, found: u64 },
    #[error("rewrap token signature does not verify against {0}")]
    BadSignature(String),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
}

impl AbeError {
    pub fn code(&self) -> ErrorCode {
        match self {
            AbeError::Parse(_) => ErrorCode::ParseError,
            AbeError::MalformedPolicy(_) | AbeError::InvalidAttributeName(_) => {
                ErrorCode::MalformedPolicy
            }
            AbeError::UnknownAttribute(_) => ErrorCode::UnknownAttribute,
            AbeError::EmptyUniverse => ErrorCode::EmptyUniverse,
            AbeError::EmptyAttributeSet => ErrorCode::EmptyAttributeSet,
            AbeError::PolicyNotSatisfied => ErrorCode::PolicyNotSatisfied,
            AbeError::ShareCorrupt => ErrorCode::ShareCorrupt,
            AbeError::Malformed(_) => ErrorCode::Malformed,
            AbeError::CidMismatch { .. } => ErrorCode::CidMismatch,
            AbeError::VersionGap { .. } => ErrorCode::VersionGap,
            AbeError::BadSignature(_) => ErrorCode::BadSignature,
            AbeError::Envelope(e) => e.code(),
        }
    }
}
