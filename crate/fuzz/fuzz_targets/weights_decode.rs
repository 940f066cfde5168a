#![no_main]

use camscope::unet::{decode_weights, encode_weights};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(model) = decode_weights(data) else { return };
    let bytes = encode_weights(&model);
    assert_eq!(encode_weights(&decode_weights(&bytes).unwrap()), bytes);
});
