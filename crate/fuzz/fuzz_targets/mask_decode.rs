#![no_main]
use libfuzzer_sys::fuzz_target;

use prunelab::pruner::Mask;

fuzz_target!(|data: &[u8]| {
    if let Ok(mask) = Mask::from_bytes(data) {
        assert_eq!(mask.to_bytes(), data);
    }
});
