#![no_main]

use camscope::cam::{resolve_pixel_set, PixelSetSpec};
use camscope::LabelMap;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(spec) = text.parse::<PixelSetSpec>() else { return };
    assert_eq!(spec.to_string().parse::<PixelSetSpec>().unwrap(), spec);
    let _ = resolve_pixel_set(&spec, &LabelMap::filled(16, 16, 1));
});
