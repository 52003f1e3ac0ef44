#![no_main]

use libfuzzer_sys::fuzz_target;
use noveldec::config::RunManifest;
use noveldec::dataset::SplitFile;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(split) = SplitFile::parse(text) {
        assert_eq!(SplitFile::parse(&split.to_json()).expect("split round trip"), split);
    }
    let _ = RunManifest::parse(text);
});
