#![no_main]

use libfuzzer_sys::fuzz_target;
use star_dst::train::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        let bytes = ckpt.to_bytes();
        let again = Checkpoint::from_bytes(&bytes).expect("re-parse");
        assert_eq!(again.to_bytes(), bytes);
    }
});
