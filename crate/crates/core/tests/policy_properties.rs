mod support;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sovereign_ehr::abe::{abe_decrypt, abe_encrypt, keygen, parse_policy, policy_to_string, satisfies, setup};
use sovereign_ehr::envelope::{open_envelope, seal_envelope};
use sovereign_ehr::{AbeAuthority, AttributeSet, Cid, DataKey, Policy, EMERGENCY_ATTRIBUTE};
use support::oracle::{eval_text, subset, truth_mask, OMEGA, SUITE};

const POOL: [&str; 6] = ["a", "b", "c", "dept:er", "role:nurse", "x9"];

fn tree() -> impl Strategy<Value = Policy> {
    let leaf = proptest::sample::select(&POOL[..]).prop_map(|n| Policy::Attr(n.to_string()));
    leaf.prop_recursive(7, 64, 2, |inner| {
        (inner.clone(), inner, any::<bool>()).prop_map(|(l, r, and)| if and { Policy::and(l, r) } else { Policy::or(l, r) })
    })
}

/// Formulas written with minimal parentheses, relying on AND binding tighter.
fn loose_formula() -> impl Strategy<Value = String> {
    let leaf = proptest::sample::select(&["a", "b", "c", "d", "e"][..]).prop_map(str::to_string);
    leaf.prop_recursive(5, 24, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(l, r)| format!("{l} AND {r}")),
            (inner.clone(), inner.clone()).prop_map(|(l, r)| format!("{l} OR {r}")),
            inner.prop_map(|x| format!("({x})")),
        ]
    })
}

fn all_assignments(names: &[&str]) -> Vec<BTreeSet<String>> {
    (0..1u32 << names.len())
        .map(|m| names.iter().enumerate().filter(|(i, _)| m >> i & 1 == 1).map(|(_, n)| n.to_string()).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn printed_policy_parses_back_to_the_same_tree(p in tree()) {
        prop_assert!(p.depth() <= 8);
        prop_assert_eq!(parse_policy(&policy_to_string(&p)).unwrap(), p);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn parser_agrees_with_shunting_yard_oracle(text in loose_formula()) {
        let policy = parse_policy(&text).unwrap();
        for present in all_assignments(&["a", "b", "c", "d", "e"]) {
            let attrs = AttributeSet::new(present.iter().cloned()).unwrap();
            prop_assert_eq!(satisfies(&policy, &attrs), eval_text(&text, &present), "{} with {:?}", text, present);
        }
    }
}

#[test]
fn oracle_reproduces_frozen_suite_masks() {
    for (text, mask) in SUITE {
        assert_eq!(truth_mask(text), mask, "{text}");
    }
}

#[test]
fn abe_decrypt_matches_suite_truth_tables() {
    let universe = AttributeSet::new(OMEGA).unwrap();
    let (msk, _) = setup([5u8; 32], &universe).unwrap();
    let authority = AbeAuthority::setup([5u8; 32], &universe).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    for (text, mask) in SUITE {
        let policy = parse_policy(text).unwrap();
        let ct = abe_encrypt(&[7u8; 16], &policy, &authority, &mut rng).unwrap();
        for s in 0..16u16 {
            let expected = mask >> s & 1 == 1;
            let attrs = AttributeSet::new(subset(s)).unwrap();
            assert_eq!(satisfies(&policy, &attrs), expected, "{text} {s:04b}");
            let opened = keygen(&msk, &attrs).ok().and_then(|k| abe_decrypt(&ct, &k).ok());
            assert_eq!(opened.is_some(), expected, "{text} {s:04b}");
            if let Some(payload) = opened {
                assert_eq!(payload, [7u8; 16]);
            }
        }
    }
}

#[test]
fn envelope_opens_iff_policy_or_override_holds() {
    let mut universe = AttributeSet::new(OMEGA).unwrap();
    universe.insert(EMERGENCY_ATTRIBUTE).unwrap();
    let authority = AbeAuthority::setup([6u8; 32], &universe).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let data_key = DataKey::from_bytes([0x42; 16]);
    let cid = Cid::of(b"record");
    for (text, mask) in SUITE {
        let env = seal_envelope(&data_key, &parse_policy(text).unwrap(), &authority, cid, 1, &mut rng).unwrap();
        for s in 0..16u16 {
            for with_override in [false, true] {
                let mut names = subset(s);
                if with_override {
                    names.push(EMERGENCY_ATTRIBUTE);
                }
                let expected = with_override || mask >> s & 1 == 1;
                let opened = authority
                    .issue_key(&AttributeSet::new(names).unwrap())
                    .ok()
                    .and_then(|k| open_envelope(&env, &k).ok());
                assert_eq!(opened.is_some(), expected, "{text} {s:04b} override={with_override}");
                if let Some(k) = opened {
                    assert_eq!(k, data_key);
                }
            }
        }
    }
}
