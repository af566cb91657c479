#![no_main]

use distillkit::data::directory::{decode_png, encode_png};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_png(data) {
        assert_eq!(img.pixels.len(), img.height * img.width);
        assert!(img.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        let again = decode_png(&encode_png(&img).expect("re-encode")).expect("re-decode");
        assert_eq!(again, img);
    }
});
