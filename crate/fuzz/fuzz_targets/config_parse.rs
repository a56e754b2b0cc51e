#![no_main]

use libfuzzer_sys::fuzz_target;
use stica_core::config::parse_config_str;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = parse_config_str(text, &[]) {
        assert_eq!(parse_config_str(&cfg.echo(), &[]).expect("echo parses"), cfg);
    }
});
