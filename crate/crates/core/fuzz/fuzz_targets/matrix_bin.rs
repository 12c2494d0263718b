#![no_main]

use libfuzzer_sys::fuzz_target;
use tica_core::matrix::{decode_bin, encode_bin};

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = decode_bin(data) {
        assert_eq!(encode_bin(&m), data);
    }
});
