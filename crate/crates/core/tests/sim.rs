use dcmg_core::equilibrium::solve_equilibrium;
use dcmg_core::model::{uniform_bus, Line, MicrogridSpec};
use dcmg_core::sim::{parse_profile, simulate, simulate_from_equilibrium, LoadProfile, SimOptions};

fn pair(d: f64) -> MicrogridSpec {
    MicrogridSpec::new(
        "pair",
        vec![uniform_bus(d), uniform_bus(d)],
        vec![Line { from: 0, to: 1, r: 1.0 }],
    )
    .unwrap()
}

#[test]
fn equilibrium_is_stationary() {
    let spec = pair(0.2);
    let eq = solve_equilibrium(&spec, &[12e3, 12e3], None).unwrap();
    let profile = LoadProfile::constant(&spec, 12e3).unwrap();
    let opts = SimOptions { t_end: 0.05, ..SimOptions::default() };
    let trace = simulate(&spec, &profile, &eq.x_e, &opts).unwrap();
    assert!(trace.divergence.is_none());
    let drift = (trace.last() - &eq.x_e).amax() / eq.x_e.amax();
    assert!(drift < 1e-9, "drift {drift}");
}

#[test]
fn csv_has_header_and_one_row_per_sample() {
    let spec = pair(0.2);
    let profile = LoadProfile::ramp(&spec, 5e3, 10e3, 0.01).unwrap();
    let opts = SimOptions { t_end: 0.01, stride: 50, ..SimOptions::default() };
    let trace = simulate_from_equilibrium(&spec, &profile, &opts).unwrap();
    let mut buf = Vec::new();
    trace.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,i_s1,i_s2,i_l1,i_l2,v_b1,v_b2,v_l1,v_l2,p_1,p_2"
    );
    assert_eq!(lines.count(), trace.t.len());
}

#[test]
fn ripple_runs_are_seeded() {
    let spec = pair(0.2);
    let profile = LoadProfile::constant(&spec, 10e3).unwrap();
    let opts = SimOptions { t_end: 0.01, ripple: 0.05, seed: 3, ..SimOptions::default() };
    let a = simulate_from_equilibrium(&spec, &profile, &opts).unwrap();
    let b = simulate_from_equilibrium(&spec, &profile, &opts).unwrap();
    assert_eq!(a.last(), b.last());
    let c = simulate_from_equilibrium(&spec, &profile, &SimOptions { seed: 4, ..opts }).unwrap();
    assert_ne!(a.last(), c.last());
}

#[test]
fn bad_options_and_profiles_are_rejected() {
    let spec = pair(0.2);
    let profile = LoadProfile::constant(&spec, 10e3).unwrap();
    let x0 = solve_equilibrium(&spec, &[10e3, 10e3], None).unwrap().x_e;
    for bad in [
        SimOptions { dt: 0.0, ..SimOptions::default() },
        SimOptions { stride: 0, ..SimOptions::default() },
        SimOptions { ripple: 1.5, ..SimOptions::default() },
        SimOptions { t_end: f64::NAN, ..SimOptions::default() },
    ] {
        assert!(simulate(&spec, &profile, &x0, &bad).is_err());
    }
    assert!(parse_profile("[[load]]\nbus = 3\n[[load.knot]]\nt = 0.0\np = 1.0\n", &spec).is_err());
    assert!(parse_profile("[[load]]\nbus = 1\n[[load.knot]]\nt = 1.0\np = 1.0\n[[load.knot]]\nt = 0.5\np = 1.0\n", &spec).is_err());
    assert!(parse_profile("[[load]]\nbus = 1\n[[load.knot]]\nt = 0.0\np = -1.0\n", &spec).is_err());
    assert!(parse_profile("not toml", &spec).is_err());
}

#[test]
fn collapse_is_reported_with_onset_power() {
    // Ramp well past the single-bus power limit: the load voltage must collapse.
    let bus = uniform_bus(0.2);
    let limit = bus.v_ref * bus.v_ref / (4.0 * (bus.r_s + bus.d + bus.r_l));
    let spec = MicrogridSpec::new("one", vec![BusParams { p_max: 2.0 * limit, ..bus }], vec![]).unwrap();
    let profile = LoadProfile::ramp(&spec, 10e3, 2.0 * limit, 0.5).unwrap();
    let opts = SimOptions { t_end: 0.5, stride: 1000, ..SimOptions::default() };
    let trace = simulate_from_equilibrium(&spec, &profile, &opts).unwrap();
    let div = trace.divergence.expect("collapse");
    assert!(div.power[0] > 10e3 && div.power[0] <= 2.0 * limit);
}

use dcmg_core::model::BusParams;
