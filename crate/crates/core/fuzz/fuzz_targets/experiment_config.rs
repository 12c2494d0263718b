#![no_main]

use libfuzzer_sys::fuzz_target;
use tica_core::simulation::parse_experiment_config;

fuzz_target!(|text: &str| {
    if let Ok(config) = parse_experiment_config(text) {
        let round = serde_json::to_string(&config).unwrap();
        assert_eq!(parse_experiment_config(&round).unwrap(), config);
    }
});
