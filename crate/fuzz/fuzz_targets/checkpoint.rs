#![no_main]

use libfuzzer_sys::fuzz_target;
use noveldec::trainer::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        let bytes = ckpt.encode();
        assert_eq!(Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes").encode(), bytes);
    }
});
