#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(map) = tme_core::io::parse_config(text) {
            let back = tme_core::io::parse_config(&tme_core::io::format_config(&map)).expect("round trip");
            assert_eq!(back, map);
        }
    }
});
