#![no_main]

use libfuzzer_sys::fuzz_target;
use neuroselect::trainer::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(config) = RunConfig::from_json(text) {
            let _ = config.validate();
            let _ = config.tag();
        }
    }
});
