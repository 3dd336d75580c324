#![no_main]
use libfuzzer_sys::fuzz_target;

use prunelab_harness::range::{parse_f64_list, parse_u64_list};

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(v) = parse_f64_list(s) {
            assert!(!v.is_empty() && v.iter().all(|x| x.is_finite()));
        }
        if let Ok(v) = parse_u64_list(s) {
            assert!(!v.is_empty());
        }
    }
});
