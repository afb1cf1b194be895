//! Holder-generated rewrap tokens and the proxy-side splice.
//!
//! Whoever can open an envelope (the patient, or the emergency server via
//! `emergency:override`) builds the successor envelope locally and signs it.
//! The proxy only checks linkage and the signature before accepting the new
//! envelope: [`apply_rewrap`] takes no key material of any kind.

use rand_core::CryptoRngCore;
use serde::{Deserialize, Serialize};

use super::{AbeError, AbeUserKey, AttributeKeySource, Policy};
use crate::canonical::{self, b64_array};
use crate::cas::Cid;
use crate::envelope::{self, KeyEnvelope, Kek};
use crate::identity::{verify_signature, Did, KeyResolver, SignatureBytes, Signer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewrapToken {
    pub cid: Cid,
    pub new_envelope: KeyEnvelope,
    pub authorized_by: Did,
    #[serde(with = "b64_array")]
    pub signature: SignatureBytes,
}

#[derive(Serialize)]
struct SignedPart<'a> {
    cid: &'a Cid,
    new_envelope: &'a KeyEnvelope,
}

fn signing_bytes(cid: &Cid, new_envelope: &KeyEnvelope) -> Vec<u8> {
    canonical::to_canonical_bytes(&SignedPart { cid, new_envelope })
}

/// Opens `env` with `uk` and produces the signed successor envelope for
/// `new_policy` (emergency branch added automatically). With `rotate` a fresh
/// KEK is drawn and the data key re-wrapped under it.
pub fn make_rewrap_token<S, K, R>(
    env: &KeyEnvelope,
    uk: &AbeUserKey,
    new_policy: &Policy,
    rotate: bool,
    signer: &S,
    keys: &K,
    rng: &mut R,
) -> Result<RewrapToken, AbeError>
where
    S: Signer + ?Sized,
    K: AttributeKeySource + ?Sized,
    R: CryptoRngCore + ?Sized,
{
    new_policy.validate()?;
    let kek = envelope::open_kek(env, uk)?;
    let version = env.version + 1;
    let new_envelope = if rotate {
        let data_key = envelope::unwrap_data_key(env, &kek)?;
        let fresh = Kek::generate(rng);
        let (nonce, sealed) = envelope::wrap_data_key(&fresh, &data_key, &env.cid, rng);
        envelope::wrap_with_kek(&fresh, (&nonce, &sealed), new_policy, keys, env.cid, version, rng)?
    } else {
        envelope::wrap_with_kek(
            &kek,
            (&env.kek_nonce, &env.kek_wrapped_data_key),
            new_policy,
            keys,
            env.cid,
            version,
            rng,
        )?
    };
    let signature = signer.sign(&signing_bytes(&env.cid, &new_envelope));
    Ok(RewrapToken {
        cid: env.cid,
        new_envelope,
        authorized_by: signer.did().clone(),
        signature,
    })
}

/// Proxy splice: validates linkage and signature, returns the new envelope.
pub fn apply_rewrap<K: KeyResolver + ?Sized>(
    old_env: &KeyEnvelope,
    token: &RewrapToken,
    resolver: &K,
) -> Result<KeyEnvelope, AbeError> {
    if token.cid != old_env.cid || token.new_envelope.cid != old_env.cid {
        return Err(AbeError::CidMismatch {
            envelope: old_env.cid.to_string(),
            token: token.cid.to_string(),
        });
    }
    if token.new_envelope.version != old_env.version + 1 {
        return Err(AbeError::VersionGap {
            expected: old_env.version + 1,
            found: token.new_envelope.version,
        });
    }
    let key = resolver
        .public_key_of(&token.authorized_by)
        .ok_or_else(|| AbeError::BadSignature(token.authorized_by.to_string()))?;
    if !verify_signature(&key, &signing_bytes(&token.cid, &token.new_envelope), &token.signature) {
        return Err(AbeError::BadSignature(token.authorized_by.to_string()));
    }
    Ok(token.new_envelope.clone())
}
