#![no_main]

use brainage::io::native;
use libfuzzer_sys::fuzz_target;

// Input layout: sidecar JSON, a NUL byte, then the payload.
fuzz_target!(|data: &[u8]| {
    let (sidecar, payload) = match data.iter().position(|&b| b == 0) {
        Some(i) => (&data[..i], &data[i + 1..]),
        None => (data, &[][..]),
    };
    if let Ok(volume) = native::decode(sidecar, payload) {
        let (sidecar, payload) = native::encode(&volume).expect("decoded volumes re-encode");
        native::decode(sidecar.as_bytes(), &payload).expect("re-encoded volumes decode");
    }
});
