#![no_main]

use dsc_core::decoding::{parse_predictions, write_predictions};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(preds) = parse_predictions(text) {
        let again = parse_predictions(&write_predictions(&preds).unwrap()).unwrap();
        assert_eq!(again, preds);
    }
});
