#![no_main]

use dsc_core::model::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::from_bytes(data) {
        let again = ck.to_bytes().expect("a loaded checkpoint serializes");
        Checkpoint::from_bytes(&again).expect("re-serialized checkpoint loads");
    }
});
