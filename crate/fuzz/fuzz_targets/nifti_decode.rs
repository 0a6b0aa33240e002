#![no_main]

use brainage::io::nifti;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(volume) = nifti::decode(data) {
        let bytes = nifti::encode(&volume).expect("decoded volumes re-encode");
        let again = nifti::decode(&bytes).expect("re-encoded volumes decode");
        assert_eq!(nifti::encode(&again).unwrap(), bytes);
    }
});
