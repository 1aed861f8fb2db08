use proptest::prelude::*;

use dcmg_core::model::{assemble, uniform_bus, BusParams, MicrogridSpec};
use dcmg_core::uncertainty::delta_bounds;

fn one(bus: BusParams) -> MicrogridSpec {
    MicrogridSpec::new("one", vec![bus], vec![]).unwrap()
}

proptest! {
    #[test]
    fn upper_bound_falls_with_voltage_floor(v1 in 200.0..330.0f64, gap in 1.0..100.0f64) {
        let lo = BusParams { v_e_min: v1, ..uniform_bus(0.2) };
        let hi = BusParams { v_e_min: v1 + gap, ..uniform_bus(0.2) };
        let (a, b) = (one(lo), one(hi));
        let da = delta_bounds(&a, &assemble(&a)).unwrap();
        let db = delta_bounds(&b, &assemble(&b)).unwrap();
        prop_assert!(db.delta_hi()[0] < da.delta_hi()[0]);
    }

    #[test]
    fn vertices_sit_on_box_corners(p_min in 0.0..10e3f64, extra in 1.0..10e3f64, j in 0u64..2) {
        let bus = BusParams { p_min, p_max: p_min + extra, ..uniform_bus(0.2) };
        let spec = one(bus);
        let m = assemble(&spec);
        let bx = delta_bounds(&spec, &m).unwrap();
        let row = bx.rows()[0];
        let v = bx.vertex(j);
        let delta = v[(row, row)] - bx.a()[(row, row)];
        let corner = if j == 0 { bx.delta_lo()[0] } else { bx.delta_hi()[0] };
        prop_assert!((delta - corner).abs() <= 1e-9 * corner.abs().max(1.0));
        prop_assert!(bx.delta_lo()[0] <= bx.delta_hi()[0]);
    }
}

#[test]
fn inverted_bounds_are_rejected() {
    let spec = one(uniform_bus(0.2));
    let bx = delta_bounds(&spec, &assemble(&spec)).unwrap();
    assert!(bx.with_bounds(vec![10.0], vec![5.0]).is_err());
    assert!(bx.with_bounds(vec![1.0, 2.0], vec![5.0, 6.0]).is_err());
}
