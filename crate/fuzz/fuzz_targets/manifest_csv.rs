#![no_main]

use libfuzzer_sys::fuzz_target;
use noveldec::dataset::parse_manifest_csv;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(rows) = parse_manifest_csv(text) {
            assert!(rows.iter().all(|r| !r.id.is_empty()));
        }
    }
});
