#![no_main]

use brandcap::report::{parse_report, Comparison};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(report) = parse_report(text, "fuzz") {
            if let Ok(c) = Comparison::new(std::slice::from_ref(&report)) {
                let _ = c.to_table();
                let _ = c.to_json();
            }
        }
    }
});
