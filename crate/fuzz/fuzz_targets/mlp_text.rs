#![no_main]

use cmi_core::neuralnet::format::{mlp_from_text, mlp_to_text};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(net) = mlp_from_text(text) {
        let written = mlp_to_text(&net);
        let again = mlp_from_text(&written).expect("written network parses");
        assert_eq!(mlp_to_text(&again), written);
    }
});
