#![no_main]

use libfuzzer_sys::fuzz_target;
use star_dst::tracker::{parse_predictions, predictions_to_string};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok((header, records)) = parse_predictions(text) {
        let out = predictions_to_string(&header, &records);
        assert_eq!(parse_predictions(&out).expect("re-parse"), (header, records));
    }
});
