#![no_main]

use brainage::runspec::RunSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(spec) = RunSpec::from_json(data) {
        let _ = spec.config_hash();
    }
});
