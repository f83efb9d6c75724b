#![no_main]

use libfuzzer_sys::fuzz_target;
use neuroselect::velocity::{decode_snapshot, encode_snapshot};

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = decode_snapshot(data) {
        let again = decode_snapshot(&encode_snapshot(&s)).expect("re-encoded snapshot decodes");
        assert_eq!(again.neuron_count(), s.neuron_count());
    }
});
