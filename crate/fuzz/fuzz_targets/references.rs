#![no_main]

use dsc_core::metrics::{parse_references, write_references};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(refs) = parse_references(text) {
        let again = parse_references(&write_references(&refs).unwrap()).unwrap();
        assert_eq!(again, refs);
    }
});
