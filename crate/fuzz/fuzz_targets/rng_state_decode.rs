#![no_main]

use libfuzzer_sys::fuzz_target;
use stica_core::train::{decode_rng_state, encode_rng_state};

fuzz_target!(|data: &[u8]| {
    if let Ok(rng) = decode_rng_state(data) {
        assert_eq!(encode_rng_state(&rng), data);
    }
});
