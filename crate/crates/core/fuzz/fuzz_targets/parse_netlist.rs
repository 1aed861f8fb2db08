#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = dcmg_core::model::parse_netlist(text) {
        // Anything that parses must assemble without panicking.
        let m = dcmg_core::model::assemble(&spec);
        assert_eq!(m.a.nrows(), m.layout.dim());
        let _ = dcmg_core::uncertainty::delta_bounds(&spec, &m);
    }
});
