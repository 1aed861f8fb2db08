#![no_main]

use libfuzzer_sys::fuzz_target;

use dcmg_core::model::{uniform_bus, Line, MicrogridSpec};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let spec = MicrogridSpec::new(
        "fuzz",
        vec![uniform_bus(0.2), uniform_bus(0.2)],
        vec![Line { from: 0, to: 1, r: 1.0 }],
    )
    .unwrap();
    if let Ok(profile) = dcmg_core::sim::parse_profile(text, &spec) {
        let h = profile.horizon();
        for t in [0.0, h * 0.5, h, h + 1.0] {
            let p = profile.power_at(t);
            assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }
});
