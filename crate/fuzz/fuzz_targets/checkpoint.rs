#![no_main]

use distillkit::nn::checkpoint::{from_json, to_json};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(params) = from_json(text) {
            if let Ok(out) = to_json(&params) {
                assert_eq!(from_json(&out).expect("round trip"), params);
            }
        }
    }
});
