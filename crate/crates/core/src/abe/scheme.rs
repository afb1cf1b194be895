use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::RwLock;

use hmac::{Hmac, Mac};
use rand_core::CryptoRngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::policy::{satisfies, AttributeSet, Policy};
use super::AbeError;
use crate::aead::{self, NONCE_LEN};
use crate::canonical::{self, b64, b64_array};

pub const SCHEME_VERSION: u32 = 1;

/// 128-bit per-attribute secret, `PRF(msk.seed, name)`.
pub type AttributeSecret = [u8; 16];

const LEAF_AAD_DOMAIN: &[u8] = b"sehr-abe-leaf\0";
const PRF_DOMAIN: &[u8] = b"sehr-abe-attr\0";

#[derive(Clone, Serialize, Deserialize)]
pub struct AbeMasterKey {
    #[serde(with = "b64_array")]
    seed: [u8; 32],
}

impl AbeMasterKey {
    pub fn attribute_secret(&self, name: &str) -> AttributeSecret {
        let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(&self.seed).expect("hmac takes any key length");
        mac.update(PRF_DOMAIN);
        mac.update(name.as_bytes());
        let out = mac.finalize().into_bytes();
        let mut secret = [0u8; 16];
        secret.copy_from_slice(&out[..16]);
        secret
    }
}

impl fmt::Debug for AbeMasterKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("AbeMasterKey(..)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbePublicParams {
    pub authority_id: String,
    pub scheme_version: u32,
}

/// Derives the master key and public parameters; deterministic in `seed`.
pub fn setup(
    security_seed: [u8; 32],
    attribute_universe: &AttributeSet,
) -> Result<(AbeMasterKey, AbePublicParams), AbeError> {
    if attribute_universe.is_empty() {
        return Err(AbeError::EmptyUniverse);
    }
    let id = Sha256::new()
        .chain_update(b"sehr-abe-authority\0")
        .chain_update(security_seed)
        .finalize();
    let params = AbePublicParams {
        authority_id: hex::encode(&id[..8]),
        scheme_version: SCHEME_VERSION,
    };
    Ok((AbeMasterKey { seed: security_seed }, params))
}

pub fn keygen(msk: &AbeMasterKey, attrs: &AttributeSet) -> Result<AbeUserKey, AbeError> {
    if attrs.is_empty() {
        return Err(AbeError::EmptyAttributeSet);
    }
    let secrets = attrs
        .iter()
        .map(|a| (a.clone(), msk.attribute_secret(a)))
        .collect();
    Ok(AbeUserKey { attributes: attrs.clone(), secrets })
}

/// Secrets for a fixed attribute set, held in a wallet.
#[derive(Clone, PartialEq, Eq)]
pub struct AbeUserKey {
    attributes: AttributeSet,
    secrets: BTreeMap<String, AttributeSecret>,
}

impl AbeUserKey {
    pub fn attributes(&self) -> &AttributeSet {
        &self.attributes
    }

    pub fn secret(&self, name: &str) -> Option<&AttributeSecret> {
        self.secrets.get(name)
    }
}

impl fmt::Debug for AbeUserKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AbeUserKey")
            .field("attributes", &self.attributes)
            .finish_non_exhaustive()
    }
}

#[derive(Serialize, Deserialize)]
struct UserKeyWire {
    attributes: AttributeSet,
    secrets: BTreeMap<String, String>,
}

impl Serialize for AbeUserKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        UserKeyWire {
            attributes: self.attributes.clone(),
            secrets: self
                .secrets
                .iter()
                .map(|(k, v)| (k.clone(), canonical::b64_encode(v)))
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for AbeUserKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let wire = UserKeyWire::deserialize(d)?;
        let names: BTreeSet<&String> = wire.secrets.keys().collect();
        if names != wire.attributes.iter().collect() {
            return Err(D::Error::custom("secrets must cover exactly the listed attributes"));
        }
        let mut secrets = BTreeMap::new();
        for (name, text) in wire.secrets {
            let bytes = canonical::b64_decode(&text).map_err(D::Error::custom)?;
            let secret: AttributeSecret = bytes
                .try_into()
                .map_err(|_| D::Error::custom("attribute secret must be 16 bytes"))?;
            secrets.insert(name, secret);
        }
        Ok(AbeUserKey { attributes: wire.attributes, secrets })
    }
}

/// Source of per-attribute wrap keys for encryption. The authority is the
/// only implementor in a deployment.
pub trait AttributeKeySource {
    fn params(&self) -> &AbePublicParams;
    fn attribute_secret(&self, name: &str) -> Result<AttributeSecret, AbeError>;
}

/// The deployment's single attribute authority: master key plus the
/// registered attribute universe.
pub struct AbeAuthority {
    msk: AbeMasterKey,
    params: AbePublicParams,
    universe: RwLock<BTreeSet<String>>,
}

#[derive(Serialize, Deserialize)]
pub struct AuthorityState {
    pub master_key: AbeMasterKey,
    pub params: AbePublicParams,
    pub universe: AttributeSet,
}

impl AbeAuthority {
    pub fn setup(seed: [u8; 32], universe: &AttributeSet) -> Result<AbeAuthority, AbeError> {
        let (msk, params) = setup(seed, universe)?;
        Ok(AbeAuthority {
            msk,
            params,
            universe: RwLock::new(universe.as_set().clone()),
        })
    }

    pub fn params(&self) -> &AbePublicParams {
        &self.params
    }

    pub fn universe(&self) -> AttributeSet {
        AttributeSet::new(self.universe.read().unwrap().iter().cloned()).expect("validated on insert")
    }

    /// Issues a user key, registering any new attribute in the universe.
    pub fn issue_key(&self, attrs: &AttributeSet) -> Result<AbeUserKey, AbeError> {
        let key = keygen(&self.msk, attrs)?;
        self.universe
            .write()
            .unwrap()
            .extend(attrs.iter().cloned());
        Ok(key)
    }

    /// Adds attributes to the universe without issuing a key for them.
    pub fn register_attributes(&self, attrs: &AttributeSet) {
        self.universe.write().unwrap().extend(attrs.iter().cloned());
    }

    pub fn to_state(&self) -> AuthorityState {
        AuthorityState {
            master_key: self.msk.clone(),
            params: self.params.clone(),
            universe: self.universe(),
        }
    }

    pub fn from_state(state: AuthorityState) -> AbeAuthority {
        AbeAuthority {
            msk: state.master_key,
            params: state.params,
            universe: RwLock::new(state.universe.as_set().clone()),
        }
    }
}

impl AttributeKeySource for AbeAuthority {
    fn params(&self) -> &AbePublicParams {
        &self.params
    }

    fn attribute_secret(&self, name: &str) -> Result<AttributeSecret, AbeError> {
        if !self.universe.read().unwrap().contains(name) {
            return Err(AbeError::UnknownAttribute(name.to_string()));
        }
        Ok(self.msk.attribute_secret(name))
    }
}

#[derive(Clone, PartialEq, Eq)]
enum ShareNode {
    Attr { name: String, nonce: [u8; NONCE_LEN], sealed: Vec<u8> },
    And(Box<ShareNode>, Box<ShareNode>),
    Or(Box<ShareNode>, Box<ShareNode>),
}

/// Policy in clear plus one sealed share per leaf.
#[derive(Clone, PartialEq, Eq)]
pub struct AbeCiphertext {
    policy: Policy,
    tree: ShareNode,
    payload_nonce: [u8; NONCE_LEN],
}

impl fmt::Debug for AbeCiphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AbeCiphertext")
            .field("policy", &self.policy.to_string())
            .finish_non_exhaustive()
    }
}

fn leaf_aad(payload_nonce: &[u8; NONCE_LEN], path: &[u8], name: &str) -> Vec<u8> {
    let mut aad = Vec::with_capacity(LEAF_AAD_DOMAIN.len() + NONCE_LEN + path.len() + name.len() + 1);
    aad.extend_from_slice(LEAF_AAD_DOMAIN);
    aad.extend_from_slice(payload_nonce);
    aad.extend_from_slice(path);
    aad.push(0);
    aad.extend_from_slice(name.as_bytes());
    aad
}

fn xor16(a: &[u8; 16], b: &[u8; 16]) -> [u8; 16] {
    let mut out = [0u8; 16];
    for i in 0..16 {
        out[i] = a[i] ^ b[i];
    }
    out
}

/// Encrypts a 128-bit payload under `policy`.
pub fn abe_encrypt<K, R>(
    payload: &[u8; 16],
    policy: &Policy,
    keys: &K,
    rng: &mut R,
) -> Result<AbeCiphertext, AbeError>
where
    K: AttributeKeySource + ?Sized,
    R: CryptoRngCore + ?Sized,
{
    policy.validate()?;
    let mut secrets = BTreeMap::new();
    for name in policy.attributes() {
        let secret = keys.attribute_secret(&name)?;
        secrets.insert(name, secret);
    }
    let mut payload_nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut payload_nonce);
    let mut path = Vec::new();
    let tree = share_down(policy, payload, &secrets, &payload_nonce, &mut path, rng);
    Ok(AbeCiphertext { policy: policy.clone(), tree, payload_nonce })
}

fn share_down<R: CryptoRngCore + ?Sized>(
    node: &Policy,
    share: &[u8; 16],
    secrets: &BTreeMap<String, AttributeSecret>,
    payload_nonce: &[u8; NONCE_LEN],
    path: &mut Vec<u8>,
    rng: &mut R,
) -> ShareNode {
    match node {
        Policy::Attr(name) => {
            let mut nonce = [0u8; NONCE_LEN];
            rng.fill_bytes(&mut nonce);
            let sealed = aead::seal(&secrets[name], &nonce, &leaf_aad(payload_nonce, path, name), share);
            ShareNode::Attr { name: name.clone(), nonce, sealed }
        }
        Policy::And(l, r) => {
            let mut mask = [0u8; 16];
            rng.fill_bytes(&mut mask);
            let other = xor16(share, &mask);
            path.push(b'L');
            let left = share_down(l, &mask, secrets, payload_nonce, path, rng);
            path.pop();
            path.push(b'R');
            let right = share_down(r, &other, secrets, payload_nonce, path, rng);
            path.pop();
            ShareNode::And(Box::new(left), Box::new(right))
        }
        Policy::Or(l, r) => {
            path.push(b'L');
            let left = share_down(l, share, secrets, payload_nonce, path, rng);
            path.pop();
            path.push(b'R');
            let right = share_down(r, share, secrets, payload_nonce, path, rng);
            path.pop();
            ShareNode::Or(Box::new(left), Box::new(right))
        }
    }
}

/// Recovers the payload if `uk`'s attributes satisfy the embedded policy.
pub fn abe_decrypt(ct: &AbeCiphertext, uk: &AbeUserKey) -> Result<[u8; 16], AbeError> {
    if !satisfies(&ct.policy, &uk.attributes) {
        return Err(AbeError::PolicyNotSatisfied);
    }
    let mut path = Vec::new();
    reconstruct(&ct.tree, uk, &ct.payload_nonce, &mut path)
}

fn node_satisfied(node: &ShareNode, attrs: &AttributeSet) -> bool {
    match node {
        ShareNode::Attr { name, .. } => attrs.contains(name),
        ShareNode::And(l, r) => node_satisfied(l, attrs) && node_satisfied(r, attrs),
        ShareNode::Or(l, r) => node_satisfied(l, attrs) || node_satisfied(r, attrs),
    }
}

fn reconstruct(
    node: &ShareNode,
    uk: &AbeUserKey,
    payload_nonce: &[u8; NONCE_LEN],
    path: &mut Vec<u8>,
) -> Result<[u8; 16], AbeError> {
    match node {
        ShareNode::Attr { name, nonce, sealed } => {
            let secret = uk.secrets.get(name).ok_or(AbeError::PolicyNotSatisfied)?;
            let plain = aead::open(secret, nonce, &leaf_aad(payload_nonce, path, name), sealed)
                .ok_or(AbeError::ShareCorrupt)?;
            plain.try_into().map_err(|_| AbeError::ShareCorrupt)
        }
        ShareNode::And(l, r) => {
            path.push(b'L');
            let a = reconstruct(l, uk, payload_nonce, path)?;
            path.pop();
            path.push(b'R');
            let b = reconstruct(r, uk, payload_nonce, path)?;
            path.pop();
            Ok(xor16(&a, &b))
        }
        ShareNode::Or(l, r) => {
            let (child, step) = if node_satisfied(l, &uk.attributes) {
                (l, b'L')
            } else if node_satisfied(r, &uk.attributes) {
                (r, b'R')
            } else {
                return Err(AbeError::PolicyNotSatisfied);
            };
            path.push(step);
            let out = reconstruct(child, uk, payload_nonce, path);
            path.pop();
            out
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum NodeWire {
    Attr {
        attr: String,
        #[serde(with = "b64_array")]
        nonce: [u8; NONCE_LEN],
        #[serde(with = "b64")]
        ct: Vec<u8>,
    },
    And {
        left: Box<NodeWire>,
        right: Box<NodeWire>,
    },
    Or {
        left: Box<NodeWire>,
        right: Box<NodeWire>,
    },
}

#[derive(Serialize, Deserialize)]
struct CiphertextWire {
    #[serde(with = "b64_array")]
    payload_nonce: [u8; NONCE_LEN],
    policy: Policy,
    tree: NodeWire,
}

impl From<&ShareNode> for NodeWire {
    fn from(node: &ShareNode) -> Self {
        match node {
            ShareNode::Attr { name, nonce, sealed } => NodeWire::Attr {
                attr: name.clone(),
                nonce: *nonce,
                ct: sealed.clone(),
            },
            ShareNode::And(l, r) => NodeWire::And {
                left: Box::new(l.as_ref().into()),
                right: Box::new(r.as_ref().into()),
            },
            ShareNode::Or(l, r) => NodeWire::Or {
                left: Box::new(l.as_ref().into()),
                right: Box::new(r.as_ref().into()),
            },
        }
    }
}

fn mirror(policy: &Policy, wire: NodeWire) -> Result<ShareNode, AbeError> {
    let mismatch = || AbeError::Malformed("share tree does not mirror the policy".into());
    match (policy, wire) {
        (Policy::Attr(p), NodeWire::Attr { attr, nonce, ct }) if *p == attr => {
            if ct.len() != 16 + aead::TAG_LEN {
                return Err(AbeError::Malformed("leaf ciphertext must be 32 bytes".into()));
            }
            Ok(ShareNode::Attr { name: attr, nonce, sealed: ct })
        }
        (Policy::And(pl, pr), NodeWire::And { left, right }) => {
            Ok(ShareNode::And(Box::new(mirror(pl, *left)?), Box::new(mirror(pr, *right)?)))
        }
        (Policy::Or(pl, pr), NodeWire::Or { left, right }) => {
            Ok(ShareNode::Or(Box::new(mirror(pl, *left)?), Box::new(mirror(pr, *right)?)))
        }
        _ => Err(mismatch()),
    }
}

impl AbeCiphertext {
    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    /// Canonical JSON: `{payload_nonce, policy, tree}` with tagged nodes.
    pub fn to_bytes(&self) -> Vec<u8> {
        canonical::to_canonical_bytes(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<AbeCiphertext, AbeError> {
        let wire: CiphertextWire =
            serde_json::from_slice(bytes).map_err(|e| AbeError::Malformed(e.to_string()))?;
        let tree = mirror(&wire.policy, wire.tree)?;
        Ok(AbeCiphertext { policy: wire.policy, tree, payload_nonce: wire.payload_nonce })
    }
}

impl Serialize for AbeCiphertext {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        CiphertextWire {
            payload_nonce: self.payload_nonce,
            policy: self.policy.clone(),
            tree: (&self.tree).into(),
        }
        .serialize(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abe::parse_policy;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn authority() -> AbeAuthority {
        AbeAuthority::setup([7u8; 32], &AttributeSet::new(["a", "b", "c", "d"]).unwrap()).unwrap()
    }

    fn key(auth: &AbeAuthority, names: &[&str]) -> AbeUserKey {
        auth.issue_key(&AttributeSet::new(names.iter().copied()).unwrap()).unwrap()
    }

    #[test]
    fn setup_is_deterministic_and_seed_sensitive() {
        let universe = AttributeSet::new(["a", "b", "c", "d"]).unwrap();
        let (m1, p1) = setup([1u8; 32], &universe).unwrap();
        let (m2, p2) = setup([1u8; 32], &universe).unwrap();
        let (m3, _) = setup([2u8; 32], &universe).unwrap();
        assert_eq!(p1, p2);
        for a in universe.iter() {
            assert_eq!(m1.attribute_secret(a), m2.attribute_secret(a));
            assert_ne!(m1.attribute_secret(a), m3.attribute_secret(a));
        }
        assert!(matches!(setup([1u8; 32], &AttributeSet::empty()), Err(AbeError::EmptyUniverse)));
    }

    #[test]
    fn keygen_holds_only_requested_secrets() {
        let universe = AttributeSet::new(["a", "b"]).unwrap();
        let (msk, _) = setup([3u8; 32], &universe).unwrap();
        let k = keygen(&msk, &AttributeSet::new(["a"]).unwrap()).unwrap();
        assert_eq!(k.secret("a"), Some(&msk.attribute_secret("a")));
        assert!(k.secret("b").is_none());
        let k2 = keygen(&msk, &AttributeSet::new(["a"]).unwrap()).unwrap();
        assert_eq!(k.secret("a"), k2.secret("a"));
        assert!(matches!(keygen(&msk, &AttributeSet::empty()), Err(AbeError::EmptyAttributeSet)));
    }

    #[test]
    fn round_trip_and_failure() {
        let auth = authority();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let payload = [0x42u8; 16];
        let p = parse_policy("a AND b").unwrap();
        let ct = abe_encrypt(&payload, &p, &auth, &mut rng).unwrap();
        assert_eq!(abe_decrypt(&ct, &key(&auth, &["a", "b"])).unwrap(), payload);
        assert!(matches!(abe_decrypt(&ct, &key(&auth, &["a"])), Err(AbeError::PolicyNotSatisfied)));
    }

    #[test]
    fn encryption_is_randomized() {
        let auth = authority();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let p = parse_policy("(a AND b) OR d").unwrap();
        let c1 = abe_encrypt(&[9u8; 16], &p, &auth, &mut rng).unwrap();
        let c2 = abe_encrypt(&[9u8; 16], &p, &auth, &mut rng).unwrap();
        assert_ne!(c1.to_bytes(), c2.to_bytes());
    }

    #[test]
    fn unknown_attribute_rejected() {
        let auth = authority();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let p = parse_policy("a OR zz").unwrap();
        assert!(matches!(
            abe_encrypt(&[0u8; 16], &p, &auth, &mut rng),
            Err(AbeError::UnknownAttribute(n)) if n == "zz"
        ));
    }

    #[test]
    fn serialization_round_trip_and_tamper_detection() {
        let auth = authority();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let p = parse_policy("(a AND b) OR d").unwrap();
        let ct = abe_encrypt(&[5u8; 16], &p, &auth, &mut rng).unwrap();
        let bytes = ct.to_bytes();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains(r#""type":"and""#) && text.contains(r#""type":"or""#));
        let back = AbeCiphertext::from_bytes(&bytes).unwrap();
        assert_eq!(back, ct);

        // swap the policy text so it no longer mirrors the tree
        let swapped = text.replace(r#""policy":"((a AND b) OR d)""#, r#""policy":"((a OR b) OR d)""#);
        assert!(matches!(AbeCiphertext::from_bytes(swapped.as_bytes()), Err(AbeError::Malformed(_))));

        // corrupt the sealed share for `d`
        let mut value: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        let ct_field = value["tree"]["right"]["ct"].as_str().unwrap().to_string();
        let mut raw = crate::canonical::b64_decode(&ct_field).unwrap();
        raw[0] ^= 1;
        value["tree"]["right"]["ct"] = serde_json::Value::String(crate::canonical::b64_encode(&raw));
        let corrupted = AbeCiphertext::from_bytes(&serde_json::to_vec(&value).unwrap()).unwrap();
        assert!(matches!(abe_decrypt(&corrupted, &key(&auth, &["d"])), Err(AbeError::ShareCorrupt)));
        // the intact branch still opens
        assert_eq!(abe_decrypt(&corrupted, &key(&auth, &["a", "b"])).unwrap(), [5u8; 16]);
    }

    #[test]
    fn user_key_serialization_checks_coverage() {
        let auth = authority();
        let k = key(&auth, &["a", "b"]);
        let json = serde_json::to_string(&k).unwrap();
        let back: AbeUserKey = serde_json::from_str(&json).unwrap();
        assert_eq!(back, k);
        let bad = json.replace(r#""attributes":["a","b"]"#, r#""attributes":["a"]"#);
        assert!(serde_json::from_str::<AbeUserKey>(&bad).is_err());
    }
}
