#![no_main]

use libfuzzer_sys::fuzz_target;
use star_cli::{parse_config, AnalyzeRunConfig, EvalRunConfig, GenDataConfig, TrackRunConfig, TrainRunConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_config::<GenDataConfig>(text);
    let _ = parse_config::<TrainRunConfig>(text);
    let _ = parse_config::<TrackRunConfig>(text);
    let _ = parse_config::<EvalRunConfig>(text);
    let _ = parse_config::<AnalyzeRunConfig>(text);
});
