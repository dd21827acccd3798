//! Parses arbitrary UTF-8 as a run configuration. Parsing must never
//! panic; accepted configs must round-trip through their own
//! serialization.

#![no_main]

use libfuzzer_sys::fuzz_target;
use poselift::harness::RunConfig;

fuzz_target!(|data: &[u8]| {
    if data.len() > 1 << 16 {
        return;
    }
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::from_kv(text) {
        let round = RunConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(round, cfg);
    }
});
