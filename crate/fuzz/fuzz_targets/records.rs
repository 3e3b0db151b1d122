#![no_main]

use cmi_core::io::{parse_study_report, parse_test_record, to_json};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(r) = parse_test_record(text) {
        let written = to_json(&r);
        assert_eq!(to_json(&parse_test_record(&written).expect("round trip")), written);
    }
    if let Ok(r) = parse_study_report(text) {
        let written = to_json(&r);
        assert_eq!(to_json(&parse_study_report(&written).expect("round trip")), written);
    }
});
