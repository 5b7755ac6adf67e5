#![no_main]

use libfuzzer_sys::fuzz_target;
use star_dst::corpus::Corpus;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(corpus) = Corpus::from_json_str(text) {
        let again = Corpus::from_json_str(&corpus.to_json_string()).expect("re-parse");
        assert_eq!(again.to_json_string(), corpus.to_json_string());
    }
});
