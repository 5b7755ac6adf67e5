#![no_main]

use libfuzzer_sys::fuzz_target;
use star_dst::context::Vocabulary;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(v) = Vocabulary::from_file_str(text) {
        let again = Vocabulary::from_file_str(&v.to_file_string()).expect("re-parse");
        assert_eq!(again.tokens(), v.tokens());
    }
});
