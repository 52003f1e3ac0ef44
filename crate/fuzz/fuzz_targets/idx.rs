#![no_main]

use libfuzzer_sys::fuzz_target;
use noveldec::dataset::{encode_idx, parse_idx};

fuzz_target!(|data: &[u8]| {
    if let Ok(array) = parse_idx(data) {
        let again = parse_idx(&encode_idx(&array)).expect("re-encoded IDX parses");
        assert_eq!(again, array);
    }
});
