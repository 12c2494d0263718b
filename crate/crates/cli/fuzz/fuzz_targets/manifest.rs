#![no_main]

use libfuzzer_sys::fuzz_target;
use tica_cli::manifest::parse_manifest;

fuzz_target!(|text: &str| {
    if let Ok(manifest) = parse_manifest(text) {
        assert!(manifest.artifacts.keys().all(|p| !p.starts_with('/') && !p.contains("..")));
    }
});
