#![no_main]

use std::path::Path;

use distillkit::cli::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = ExperimentConfig::from_json(text, Path::new("."), Some(0)) {
            let again = ExperimentConfig::from_json(&cfg.to_value().to_string(), Path::new("."), Some(0))
                .expect("canonical form parses");
            assert_eq!(again.hash(), cfg.hash());
        }
    }
});
