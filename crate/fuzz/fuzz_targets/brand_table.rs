#![no_main]

use brandcap::data::Tokenizer;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let (table, sample) = text.split_once('\0').unwrap_or((text, "a man holds a coca cola can"));
    let mut tok = Tokenizer::plain();
    if tok.parse_table(table, "fuzz").is_ok() {
        let _ = tok.tokenize(sample);
    }
});
