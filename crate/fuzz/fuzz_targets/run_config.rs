#![no_main]

use blrhac::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::parse(text) {
            let again = RunConfig::parse(&serde_json::to_string(&cfg).unwrap()).unwrap();
            assert_eq!(again, cfg);
        }
    }
});
