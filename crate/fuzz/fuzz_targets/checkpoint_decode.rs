#![no_main]
//! Arbitrary bytes through the checkpoint decoder.
//!
//! Anything that decodes must survive a re-encode and decode to identical bytes.

use libfuzzer_sys::fuzz_target;

use lava_core::checkpoint::{decode, encode};

fuzz_target!(|data: &[u8]| {
    if let Ok(params) = decode(data) {
        let bytes = encode(&params);
        let again = decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(bytes, encode(&again));
    }
});
