#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(paths) = fsde_core::io::read_paths(data) {
        // Anything accepted must also survive rebuilding the coupling.
        let n = paths.base().values().len();
        assert!(n >= 2);
        let _ = paths.into_coupled();
    }
});
