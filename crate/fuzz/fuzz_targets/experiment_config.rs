#![no_main]

use fsde_core::harness::{ExperimentConfig, ExperimentKind};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = ExperimentConfig::parse(text, None);
    let _ = ExperimentConfig::parse(text, Some(ExperimentKind::Mehler));
});
