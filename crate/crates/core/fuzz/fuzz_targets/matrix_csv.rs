#![no_main]

use libfuzzer_sys::fuzz_target;
use tica_core::matrix::{format_csv, parse_csv};

fuzz_target!(|text: &str| {
    if let Ok(m) = parse_csv(text) {
        let again = parse_csv(&format_csv(&m)).expect("formatted matrix parses");
        assert_eq!(again, m);
    }
});
