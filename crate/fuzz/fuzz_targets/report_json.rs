#![no_main]

use libfuzzer_sys::fuzz_target;
use noveldec::scoring::EvalReport;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(report) = EvalReport::from_json(text) {
        let json = report.to_json();
        let _ = EvalReport::from_json(&json).expect("report round trip");
    }
});
