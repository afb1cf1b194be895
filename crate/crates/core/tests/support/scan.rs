//! Byte scans for leaked key material.

#![allow(dead_code)]

use base64::engine::general_purpose::{STANDARD, STANDARD_NO_PAD, URL_SAFE_NO_PAD};
use base64::Engine;

/// Every textual form a 16-byte key could take inside serialized state.
pub fn encodings(key: &[u8; 16]) -> Vec<Vec<u8>> {
    let decimal = key.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(",");
    vec![
        key.to_vec(),
        hex::encode(key).into_bytes(),
        hex::encode_upper(key).into_bytes(),
        STANDARD.encode(key).into_bytes(),
        STANDARD_NO_PAD.encode(key).into_bytes(),
        URL_SAFE_NO_PAD.encode(key).into_bytes(),
        format!("[{decimal}]").into_bytes(),
    ]
}

/// Keys from `keys` that occur in `haystack` in any encoding.
pub fn leaked(keys: &[[u8; 16]], haystack: &[u8]) -> Vec<String> {
    keys.iter()
        .filter(|k| {
            encodings(k)
                .iter()
                .any(|needle| haystack.windows(needle.len()).any(|w| w == needle.as_slice()))
        })
        .map(hex::encode)
        .collect()
}
