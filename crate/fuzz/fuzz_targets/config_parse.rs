//! Any accepted config must echo to canonical text that parses back to the
//! same config; rejected input must fail without panicking.

#![no_main]

use flowlab::config::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = TrainConfig::parse(text) else { return };
    let echoed = cfg.to_canonical_string();
    let again = TrainConfig::parse(&echoed).expect("canonical echo must parse");
    assert_eq!(again, cfg, "canonical echo drifted");
});
