#![no_main]

use libfuzzer_sys::fuzz_target;
use stica_core::augment::{format_time_spec, parse_time_spec};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = parse_time_spec(text) {
        assert_eq!(
            parse_time_spec(&format_time_spec(&spec)).expect("formatted spec parses"),
            spec
        );
    }
});
