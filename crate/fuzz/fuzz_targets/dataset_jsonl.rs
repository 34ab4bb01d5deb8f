#![no_main]

use brandcap::data::{parse_dataset, to_jsonl, Tokenizer};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let tok = Tokenizer::default();
    if let Ok(ds) = parse_dataset(text, "fuzz", &tok) {
        // whatever parses must survive a write/read cycle unchanged
        let again = parse_dataset(&to_jsonl(&ds), "fuzz", &tok).expect("reparse of written dataset");
        assert_eq!(again.examples(), ds.examples());
    }
});
