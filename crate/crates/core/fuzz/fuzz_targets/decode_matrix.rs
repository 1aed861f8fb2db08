#![no_main]

use libfuzzer_sys::fuzz_target;

use dcmg_core::certify::{decode_matrix, encode_matrix};

fuzz_target!(|data: &[u8]| {
    let Some((&dim, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    if let Ok(m) = decode_matrix(text, dim as usize % 65) {
        assert_eq!(decode_matrix(&encode_matrix(&m), m.nrows()).unwrap(), m);
    }
});
