#![no_main]

use libfuzzer_sys::fuzz_target;

// First byte picks the expected vector width.
fuzz_target!(|data: &[u8]| {
    let Some((&dim, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    if let Ok(table) = dsc_core::data::embeddings::parse_embeddings(text, dim as usize % 8) {
        assert!(table.values().all(|v| v.len() == dim as usize % 8));
    }
});
