#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(records) = brandcap::data::parse_features(text, "fuzz") {
            assert!(records.iter().all(|r| r.features.iter().all(|x| x.is_finite())));
        }
    }
});
