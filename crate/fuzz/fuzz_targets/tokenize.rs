#![no_main]

use dsc_core::data::vocab::{normalize, Vocabulary};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let words = normalize(text);
    assert_eq!(normalize(&words.join(" ")), words);
    let mut vocab = Vocabulary::new();
    for w in &words {
        vocab.add(w);
    }
    let ids = vocab.tokenize(text);
    assert_eq!(ids.len(), words.len());
    if ids.iter().all(|&i| !Vocabulary::is_special(i)) {
        assert_eq!(vocab.detokenize(&ids), words.join(" "));
    }
});
