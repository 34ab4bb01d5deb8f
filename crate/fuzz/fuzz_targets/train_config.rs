#![no_main]

use std::path::Path;

use brandcap::config::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(c) = TrainConfig::parse(text, "fuzz", None, Path::new("/")) {
            c.validate().expect("parsed configs are valid");
        }
    }
});
