#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(fit) = tme_core::io::parse_fit(text) {
            let _ = tme_core::io::format_fit(&fit);
        }
    }
});
