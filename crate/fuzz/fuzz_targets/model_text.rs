#![no_main]

use cmi_core::generator::GeneratorModel;
use cmi_core::regressor::RegressorModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(g) = GeneratorModel::from_text(text) {
        let written = g.to_text();
        assert_eq!(GeneratorModel::from_text(&written).expect("round trip").to_text(), written);
    }
    if let Ok(r) = RegressorModel::from_text(text) {
        let written = r.to_text();
        assert_eq!(RegressorModel::from_text(&written).expect("round trip").to_text(), written);
    }
});
