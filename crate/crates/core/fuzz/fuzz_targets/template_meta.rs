#![no_main]

use libfuzzer_sys::fuzz_target;
use tica_core::template::parse_template_meta;

fuzz_target!(|text: &str| {
    if let Ok(meta) = parse_template_meta(text) {
        assert!(meta.l > 0 && meta.v > 0);
    }
});
