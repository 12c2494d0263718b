#![no_main]

use libfuzzer_sys::fuzz_target;
use tica_core::em::parse_fit_meta;

fuzz_target!(|text: &str| {
    if let Ok(meta) = parse_fit_meta(text) {
        assert!(meta.order >= meta.l);
    }
});
