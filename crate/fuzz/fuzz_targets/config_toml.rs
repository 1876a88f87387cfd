//! Fuzzes the experiment-config pipeline: arbitrary bytes through the TOML
//! parser, and anything that parses through resolution. Both stages must
//! return structured errors on bad input, never panic.

#![no_main]

use libfuzzer_sys::fuzz_target;
use pollen_cli::config::{parse_config_str, CliOverrides};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(raw) = parse_config_str(text) {
        let _ = raw.resolve(&CliOverrides::default());
    }
});
