#![no_main]
//! Run configuration parsing and validation on arbitrary TOML text.

use libfuzzer_sys::fuzz_target;

use lava_core::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_toml_str(text) {
        if cfg.validate().is_ok() {
            let _ = cfg.hyper();
            let _ = cfg.grid();
            // the serialized form has to parse back
            RunConfig::from_toml_str(&cfg.to_toml()).expect("round trip");
        }
    }
});
