//! Fuzzes the sweep-file pipeline: parsing, then derivation and resolution of
//! every cell config the sweep would run (without running the experiments).

#![no_main]

use libfuzzer_sys::fuzz_target;
use pollen_cli::config::CliOverrides;
use pollen_cli::sweep::{cell_config, parse_sweep_str};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(sweep) = parse_sweep_str(text) else {
        return;
    };
    let overrides = CliOverrides::default();
    // Cap the grid so a fuzz input declaring thousands of cells stays cheap;
    // cell derivation is pure config manipulation, one corner is plenty.
    for value in sweep.values.iter().take(4) {
        for &seed in sweep.seeds.iter().take(4) {
            let _ = cell_config(&sweep, value, seed, &overrides);
        }
    }
});
