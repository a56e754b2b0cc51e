#![no_main]

use libfuzzer_sys::fuzz_target;
use stica_core::container::Container;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Container::decode(data) {
        // compare bytes, not values: NaN payloads are legal tensor data
        let bytes = c.encode().expect("decoded container re-encodes");
        let again = Container::decode(&bytes).expect("re-encoded container decodes");
        assert_eq!(again.encode().expect("encodes"), bytes);
    }
});
