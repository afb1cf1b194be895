//! Test instrumentation that records key material as it is generated.
//!
//! With the `key-tap` feature enabled, every [`DataKey`](crate::DataKey)
//! derivation and every key-encryption key draw on the current thread is
//! pushed into a thread-local buffer after [`start`] is called. Blindness
//! tests scan agent state for these bytes. Without the feature every
//! function here is a no-op.

#[cfg(feature = "key-tap")]
mod imp {
    use std::cell::RefCell;

    thread_local! {
        static TAP: RefCell<Option<Vec<[u8; 16]>>> = const { RefCell::new(None) };
    }

    pub fn start() {
        TAP.with(|t| *t.borrow_mut() = Some(Vec::new()));
    }

    pub fn take() -> Vec<[u8; 16]> {
        TAP.with(|t| t.borrow_mut().take().unwrap_or_default())
    }

    pub fn record(key: &[u8; 16]) {
        TAP.with(|t| {
            if let Some(keys) = t.borrow_mut().as_mut() {
                keys.push(*key);
            }
        });
    }
}

#[cfg(not(feature = "key-tap"))]
mod imp {
    pub fn start() {}

    pub fn take() -> Vec<[u8; 16]> {
        Vec::new()
    }

    #[inline(always)]
    pub fn record(_key: &[u8; 16]) {}
}

pub use imp::{start, take};
pub(crate) use imp::record;
