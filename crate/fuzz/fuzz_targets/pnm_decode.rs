#![no_main]

use camscope::render::{decode_pnm, encode_pgm, encode_ppm};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(pnm) = decode_pnm(data) else { return };
    assert_eq!(pnm.data.len(), pnm.width * pnm.height * pnm.channels);
    let bytes = if pnm.channels == 1 {
        encode_pgm(pnm.width, pnm.height, &pnm.data).unwrap()
    } else {
        encode_ppm(&pnm.clone().into_rgb())
    };
    assert_eq!(decode_pnm(&bytes).unwrap(), pnm);
});
