#![no_main]

use camscope::trainer::SyntheticSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(spec) = text.parse::<SyntheticSpec>() else { return };
    assert_eq!(spec.to_string().parse::<SyntheticSpec>().unwrap(), spec);
});
