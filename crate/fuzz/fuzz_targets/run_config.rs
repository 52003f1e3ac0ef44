#![no_main]

use libfuzzer_sys::fuzz_target;
use noveldec::config::RunConfig;
use noveldec::dataset::DatasetManifest;

// Run configs and dataset manifests are both TOML; the fuzzer feeds the same text to each.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text) {
        let again = RunConfig::parse(&cfg.to_toml()).expect("serialised config parses");
        assert_eq!(again, cfg);
    }
    let _ = DatasetManifest::parse(text);
});
