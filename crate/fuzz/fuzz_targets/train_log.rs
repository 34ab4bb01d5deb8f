#![no_main]

use brandcap::train::TrainLog;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(log) = TrainLog::parse_jsonl(text, "fuzz") {
            let _ = brandcap::report::loss_svg(&log);
        }
    }
});
