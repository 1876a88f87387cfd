//! Fuzzes the population CSV importer. Malformed input must fail with a
//! structured error; input that parses must survive an export/import
//! round-trip unchanged (the exporter is the canonical formatter).

#![no_main]

use libfuzzer_sys::fuzz_target;
use pollen_sim::population::{parse_population_csv, population_to_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(profiles) = parse_population_csv(text) {
        let exported = population_to_csv(&profiles);
        let reparsed = parse_population_csv(&exported).expect("exported population must reparse");
        assert_eq!(
            profiles, reparsed,
            "export/import round-trip changed the population"
        );
    }
});
