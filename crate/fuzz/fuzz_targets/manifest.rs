#![no_main]

use distillkit::data::directory::parse_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = parse_manifest(text) {
            assert!(m.rows.iter().all(|r| !r.filename.is_empty()));
        }
    }
});
