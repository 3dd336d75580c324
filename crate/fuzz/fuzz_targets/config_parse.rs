#![no_main]
use libfuzzer_sys::fuzz_target;

use prunelab_harness::config::parse_config;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = parse_config(text) {
        let printed = spec.to_config_string();
        let again = parse_config(&printed).expect("printed config parses");
        assert_eq!(again.to_config_string(), printed);
    }
});
