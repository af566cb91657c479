#![no_main]

use distillkit::mining::{format_dump, parse_dump};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(trips) = parse_dump(text) {
            assert_eq!(parse_dump(&format_dump(&trips)).expect("round trip"), trips);
        }
    }
});
