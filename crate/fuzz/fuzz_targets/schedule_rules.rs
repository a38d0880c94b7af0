#![no_main]

use fsde_core::estimators::{BandwidthRule, BandwidthSchedule, EpsilonRule, Kernel};
use fsde_core::fgn::HurstIndex;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = text.parse::<Kernel>();
    let (Ok(b), Ok(e)) = (text.parse::<BandwidthRule>(), text.parse::<EpsilonRule>()) else {
        // Try splitting one input into both rules.
        if let Some((l, r)) = text.split_once('|') {
            if let (Ok(b), Ok(e)) = (l.parse::<BandwidthRule>(), r.parse::<EpsilonRule>()) {
                check(b, e);
            }
        }
        return;
    };
    check(b, e);
});

fn check(b: BandwidthRule, e: EpsilonRule) {
    // Display must parse back to the same rule.
    assert_eq!(b.to_string().parse::<BandwidthRule>().unwrap(), b);
    assert_eq!(e.to_string().parse::<EpsilonRule>().unwrap(), e);
    let s = BandwidthSchedule::new(b, e);
    if let Ok((h, eps)) = fsde_core::estimators::schedule_eval(&s, 100.0, HurstIndex::new(0.7).unwrap()) {
        assert!(h > 0.0 && eps > 0.0);
    }
}
