#![no_main]

use libfuzzer_sys::fuzz_target;
use neuroselect::registry::{decode_checkpoint, encode_checkpoint, AnyCheckpoint};

fn encode(ck: &AnyCheckpoint) -> Vec<u8> {
    match ck {
        AnyCheckpoint::F32(c) => encode_checkpoint(c),
        AnyCheckpoint::F64(c) => encode_checkpoint(c),
    }
}

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = decode_checkpoint(data) {
        let bytes = encode(&ck);
        let again = decode_checkpoint(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(encode(&again), bytes);
    }
});
