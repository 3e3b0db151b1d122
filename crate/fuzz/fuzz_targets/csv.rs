#![no_main]

use cmi_core::io::{matrix_to_csv, parse_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = parse_csv(text) {
        let again = parse_csv(&matrix_to_csv(m.values.view(), m.header.as_deref())).expect("written CSV parses");
        assert_eq!(again.values.dim(), m.values.dim());
        for (a, b) in again.values.iter().zip(m.values.iter()) {
            assert!(a == b || (a.is_nan() && b.is_nan()));
        }
    }
});
