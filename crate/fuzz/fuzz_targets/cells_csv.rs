#![no_main]
use libfuzzer_sys::fuzz_target;

use prunelab_harness::output::{read_cells, write_cells};

fuzz_target!(|data: &[u8]| {
    if let Ok(cells) = read_cells(data) {
        let mut first = Vec::new();
        write_cells(&mut first, &cells).unwrap();
        let mut second = Vec::new();
        write_cells(&mut second, &read_cells(&first[..]).unwrap()).unwrap();
        assert_eq!(first, second);
    }
});
