#![no_main]

use libfuzzer_sys::fuzz_target;
use neuroselect::selection::StaticScheme;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(scheme) = StaticScheme::parse(text) {
            assert_eq!(StaticScheme::parse(&scheme.to_text()).ok(), Some(scheme));
        }
    }
});
