#![no_main]

use libfuzzer_sys::fuzz_target;

use dcmg_core::certify::Certificate;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cert) = Certificate::from_json(text) {
        let again = Certificate::from_json(&cert.to_json()).expect("re-encoded certificate parses");
        assert_eq!(again.to_json(), cert.to_json());
    }
});
