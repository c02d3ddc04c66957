#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(batch) = tme_core::io::parse_tensor_batch(text) {
            // Whatever parses must format and parse back to the same shape.
            let again = tme_core::io::format_tensor_batch(&batch).expect("parsed batch formats");
            let back = tme_core::io::parse_tensor_batch(&again).expect("formatted batch parses");
            assert_eq!(back.len(), batch.len());
        }
    }
});
