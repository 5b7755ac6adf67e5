#![no_main]

use libfuzzer_sys::fuzz_target;
use star_dst::corpus::Ontology;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(o) = Ontology::from_export_json(text) {
        let again = Ontology::from_export_json(&o.to_export_json()).expect("re-parse");
        assert_eq!(again.to_export_json(), o.to_export_json());
    }
});
